"""
Action generation from a trained field.

Fields are anything with `z_dim`, `cond_dim` and `forward(NetInput)`; the
trained MlpNet and the analytic SingletonOracle both qualify. The caller's Rng
supplies the starting noise A_1, so samples are reproducible.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import SampleConfig
from .error_handler import ContractViolation
from .linalg import Rng, axpy, gauss_sample
from .nnet import NetInput

logger = logging.getLogger(__name__)


@dataclass
class ActionChunk:
    """H consecutive actions of act_dim entries each"""
    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2 or self.actions.shape[0] < 1:
            raise ContractViolation(f"an action chunk is an H x act_dim matrix with H >= 1, got {self.actions.shape}")
        if not np.all(np.isfinite(self.actions)):
            raise ContractViolation("action chunk contains non-finite entries")

    @property
    def H(self) -> int:
        return self.actions.shape[0]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def flat(self) -> np.ndarray:
        return self.actions.ravel()


class SingletonOracle:
    """Exact mean field of a single data point x0 on the linear path: u(z, r, t) = (z - x0) / t.

    It is independent of r, so the same object is also the exact instantaneous field.
    """

    def __init__(self, x0, cond_dim: int = 0):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.z_dim = self.x0.shape[0]
        self.cond_dim = cond_dim

    def forward(self, inp: NetInput) -> np.ndarray:
        t = inp.t[..., None] if inp.t.ndim == 1 else inp.t
        if np.any(t <= 0.0):
            raise ContractViolation("the singleton field is undefined at t = 0")
        return (inp.z - self.x0) / t

    __call__ = forward

    def jvp(self, inp: NetInput, tangent_z, tangent_r=0.0, tangent_t=1.0) -> np.ndarray:
        t = inp.t[..., None] if inp.t.ndim == 1 else inp.t
        tt = np.asarray(tangent_t, dtype=np.float64)
        tt = tt[..., None] if tt.ndim == 1 else tt
        return np.asarray(tangent_z) / t - (inp.z - self.x0) / np.square(t) * tt


def _check_cond(field, cond: np.ndarray) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape[-1] != field.cond_dim:
        raise ContractViolation(f"cond has {cond.shape[-1]} entries, field expects {field.cond_dim}")
    return cond


def _initial_noise(field, cond: np.ndarray, rng: Rng) -> np.ndarray:
    """A_1 ~ N(0, I), one row per condition row"""
    if cond.ndim == 2:
        return rng.gauss(cond.shape[0], field.z_dim)
    return gauss_sample(rng, field.z_dim)


def sample_one_step(net, cond, rng: Rng) -> np.ndarray:
    """A_0 = A_1 - u(A_1, r=0, t=1 | cond)"""
    cond = _check_cond(net, cond)
    a1 = _initial_noise(net, cond, rng)
    u = net.forward(NetInput(a1, cond, 0.0, 1.0))
    return axpy(-1.0, u, a1)


def sample_multi_step(net, cond, nfe: int, rng: Rng) -> np.ndarray:
    """A_r = A_t - (t - r) u(A_t, r, t) over nfe equal intervals from t=1 down to 0"""
    if nfe < 1:
        raise ContractViolation(f"nfe must be >= 1, got {nfe}")
    cond = _check_cond(net, cond)
    a = _initial_noise(net, cond, rng)
    for k in range(nfe, 0, -1):
        t = k / nfe
        r = (k - 1) / nfe
        u = net.forward(NetInput(a, cond, r, t))
        a = axpy(-(t - r), u, a)
    return a


def sample_euler_fm(net, cond, nfe: int, rng: Rng) -> np.ndarray:
    """Euler steps of the instantaneous field: A_{t-d} = A_t - d u(A_t, t, t), d = 1/nfe"""
    if nfe < 1:
        raise ContractViolation(f"nfe must be >= 1, got {nfe}")
    cond = _check_cond(net, cond)
    a = _initial_noise(net, cond, rng)
    delta = 1.0 / nfe
    for k in range(nfe, 0, -1):
        t = k / nfe
        u = net.forward(NetInput(a, cond, t, t))
        a = axpy(-delta, u, a)
    return a


def sample(net, cond, cfg: SampleConfig, rng: Rng) -> np.ndarray:
    """Dispatch on cfg.mode / cfg.nfe; cond may carry a batch axis"""
    cfg.validate()
    if cfg.mode == 'euler_fm':
        return sample_euler_fm(net, cond, cfg.nfe, rng)
    if cfg.nfe == 1:
        return sample_one_step(net, cond, rng)
    return sample_multi_step(net, cond, cfg.nfe, rng)


def sample_batch(net, conds: np.ndarray, cfg: SampleConfig, rng: Rng) -> np.ndarray:
    """One sample per row of conds, shape (n, z_dim)"""
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    return sample(net, conds, cfg, rng)


def generate_chunk(net, obs, cfg: SampleConfig, rng: Rng, act_dim: int,
                   normalizer: Optional['object'] = None) -> ActionChunk:
    """Sample one flattened chunk for observation obs and reshape it to H x act_dim"""
    if net.z_dim % act_dim:
        raise ContractViolation(f"field dim {net.z_dim} is not a multiple of act_dim {act_dim}")
    flat = sample(net, np.asarray(obs, dtype=np.float64), cfg, rng)
    if normalizer is not None:
        flat = normalizer.inverse(flat)
    return ActionChunk(flat.reshape(net.z_dim // act_dim, act_dim))
