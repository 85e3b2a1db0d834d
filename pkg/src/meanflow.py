"""
MeanFlow training.

The network learns the mean field u(z, r, t) over the interval [r, t]. Its
regression target comes from the identity u = v - (t - r) du/dt, where du/dt
is the JVP of the current network along the tangent (v, 0, 1). The target is a
plain array computed outside the backward pass, so no gradient flows through it.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .config import TrainConfig
from .error_handler import ConfigurationError, ContractViolation, TrainingDivergence
from .flow import LINEAR, cond_velocity, interpolate
from .linalg import Rng
from .nnet import GradBuffer, MlpNet, NetInput
from .utils import write_csv, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimePair:
    """Interval endpoints 0 <= r <= t <= 1"""
    r: float
    t: float

    def __post_init__(self):
        if not 0.0 <= self.r <= self.t <= 1.0:
            raise ContractViolation(f"time pair must satisfy 0 <= r <= t <= 1, got ({self.r}, {self.t})")

    @property
    def degenerate(self) -> bool:
        return self.r == self.t


def sample_time_pairs(rng: Rng, n: int, flow_ratio: float) -> Tuple[np.ndarray, np.ndarray]:
    """n i.i.d. pairs: with prob. flow_ratio r, t are sorted uniforms, otherwise r = t ~ U(0,1)"""
    if not 0.0 <= flow_ratio <= 1.0:
        raise ConfigurationError(f"flow_ratio must be in [0,1], got {flow_ratio}")
    coin = rng.uniform(n)
    a = rng.uniform(n)
    b = rng.uniform(n)
    interval = coin < flow_ratio
    r = np.where(interval, np.minimum(a, b), a)
    t = np.where(interval, np.maximum(a, b), a)
    return r, t


def sample_time_pair(rng: Rng, flow_ratio: float) -> TimePair:
    r, t = sample_time_pairs(rng, 1, flow_ratio)
    return TimePair(float(r[0]), float(t[0]))


@dataclass
class TrainBatch:
    """Data chunks x, observations cond, noise e and time pairs (r, t)"""
    x: np.ndarray
    cond: np.ndarray
    e: np.ndarray
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        b = self.x.shape[0]
        if self.e.shape != self.x.shape:
            raise ContractViolation(f"noise shape {self.e.shape} does not match data shape {self.x.shape}")
        if self.cond.shape[0] != b or self.r.shape != (b,) or self.t.shape != (b,):
            raise ContractViolation("all batch dimensions must be equal")

    @property
    def size(self) -> int:
        return self.x.shape[0]


def make_batch(x: np.ndarray, cond: np.ndarray, rng: Rng, flow_ratio: float) -> TrainBatch:
    """Fresh noise and time pairs for the given data rows"""
    e = rng.gauss(*x.shape)
    r, t = sample_time_pairs(rng, x.shape[0], flow_ratio)
    return TrainBatch(x=x, cond=cond, e=e, r=r, t=t)


def _pair_arrays(pair) -> Tuple[Any, Any]:
    if isinstance(pair, TimePair):
        return pair.r, pair.t
    r, t = pair
    return np.asarray(r, dtype=np.float64), np.asarray(t, dtype=np.float64)


def meanflow_target(net, z: np.ndarray, cond: np.ndarray, pair, v: np.ndarray) -> np.ndarray:
    """u_tgt = v - (t - r) * JVP(net; tangent (v, 0, 1)), returned as a constant array"""
    r, t = _pair_arrays(pair)
    inp = NetInput(z, cond, r, t)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != inp.z.shape:
        raise ContractViolation(f"velocity shape {v.shape} does not match z shape {inp.z.shape}")
    du_dt = net.jvp(inp, v, 0.0, 1.0)
    gap = np.asarray(t - r, dtype=np.float64)
    if gap.ndim == 1:
        gap = gap[:, None]
    return v - gap * du_dt


def _check_pair_shapes(pred: np.ndarray, tgt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    tgt = np.atleast_2d(np.asarray(tgt, dtype=np.float64))
    if pred.shape != tgt.shape:
        raise ContractViolation(f"prediction shape {pred.shape} does not match target shape {tgt.shape}")
    return pred, tgt


def loss_l2(pred: np.ndarray, tgt: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error norm over the batch and its gradient 2*delta/B"""
    pred, tgt = _check_pair_shapes(pred, tgt)
    delta = pred - tgt
    sq = np.sum(np.square(delta), axis=1)
    return float(np.mean(sq)), 2.0 * delta / delta.shape[0]


def adaptive_weights(sq_err: np.ndarray, gamma: float, c: float) -> np.ndarray:
    """1 / (|delta|^2 + c)^(1 - gamma)"""
    if not 0.0 < gamma <= 1.0:
        raise ConfigurationError(f"gamma must be in (0,1], got {gamma}")
    if not c > 0.0:
        raise ConfigurationError(f"adaptive constant c must be > 0, got {c}")
    return 1.0 / np.power(sq_err + c, 1.0 - gamma)


def loss_adaptive(pred: np.ndarray, tgt: np.ndarray, gamma: float, c: float) -> Tuple[float, np.ndarray]:
    """Error-weighted squared loss; the weights are constants during differentiation"""
    pred, tgt = _check_pair_shapes(pred, tgt)
    delta = pred - tgt
    sq = np.sum(np.square(delta), axis=1)
    w = adaptive_weights(sq, gamma, c)
    return float(np.mean(w * sq)), w[:, None] * (2.0 * delta / delta.shape[0])


def compute_loss(pred: np.ndarray, tgt: np.ndarray, cfg: TrainConfig) -> Tuple[float, np.ndarray]:
    if cfg.gamma == 1.0:
        return loss_l2(pred, tgt)
    return loss_adaptive(pred, tgt, cfg.gamma, cfg.adaptive_c)


class Adam:
    """Adam optimizer state for one MlpNet"""

    def __init__(self, net: MlpNet, learn_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learn_rate = learn_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = GradBuffer.zeros_like(net)
        self.v = GradBuffer.zeros_like(net)

    @classmethod
    def from_config(cls, net: MlpNet, cfg: TrainConfig) -> 'Adam':
        return cls(net, cfg.learn_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def update(self, net: MlpNet, grads: GradBuffer):
        """One bias-corrected Adam step, in place"""
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        params = zip(net.weights + net.biases, grads.weights + grads.biases,
                     self.m.weights + self.m.biases, self.v.weights + self.v.biases)
        for p, g, m, v in params:
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learn_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based `step`: constant, or cosine-decayed towards 0"""
    if cfg.lr_schedule == 'constant':
        return cfg.learn_rate
    return 0.5 * cfg.learn_rate * (1.0 + math.cos(math.pi * step / cfg.steps))


def batch_gradients(net: MlpNet, batch: TrainBatch, cfg: TrainConfig,
                    target_net=None) -> Tuple[float, GradBuffer, np.ndarray]:
    """Loss, parameter gradients and the detached targets for one batch.

    `target_net` defaults to `net`; passing another field only changes the
    target values, never the gradient pathway.
    """
    z = interpolate(LINEAR, batch.x, batch.e, batch.t)
    v = cond_velocity(LINEAR, batch.x, batch.e)
    u_tgt = meanflow_target(target_net if target_net is not None else net,
                            z, batch.cond, (batch.r, batch.t), v)
    inp = NetInput(z, batch.cond, batch.r, batch.t)
    pred = net.forward(inp)
    loss, out_grad = compute_loss(pred, u_tgt, cfg)
    return loss, net.backward(inp, out_grad), u_tgt


def train_step(net: MlpNet, batch: TrainBatch, cfg: TrainConfig,
               opt_state: Optional[Adam] = None) -> Tuple[MlpNet, Adam, float]:
    """One Adam update on one batch; raises TrainingDivergence on a non-finite loss"""
    if batch.x.shape[1] != net.z_dim or batch.cond.shape[1] != net.cond_dim:
        raise ContractViolation(f"batch dims ({batch.x.shape[1]}, {batch.cond.shape[1]}) "
                                f"do not match net ({net.z_dim}, {net.cond_dim})")
    opt_state = opt_state or Adam.from_config(net, cfg)
    loss, grads, _ = batch_gradients(net, batch, cfg)
    if not np.isfinite(loss):
        raise TrainingDivergence(opt_state.step + 1, loss)
    opt_state.update(net, grads)
    return net, opt_state, loss


@dataclass
class TrainReport:
    """Loss curve, final checksum, wall time and the config that produced them"""
    losses: List[float]
    checksum: str
    wall_time: float
    config: Dict[str, Any]
    net: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'steps': len(self.losses),
            'final_loss': self.final_loss,
            'checksum': self.checksum,
            'wall_time_s': self.wall_time,
            'config': self.config,
            'net': self.net,
        }

    def write(self, out_dir: str) -> Dict[str, str]:
        """train_report.json and loss.csv (step,loss)"""
        os.makedirs(out_dir, exist_ok=True)
        report_path = write_json(os.path.join(out_dir, 'train_report.json'), self.to_dict())
        loss_path = write_csv(os.path.join(out_dir, 'loss.csv'), ['step', 'loss'],
                              [(i + 1, repr(loss)) for i, loss in enumerate(self.losses)])
        return {'train_report': report_path, 'loss_csv': loss_path}


class _BatchIndexer:
    """Endless stream of row indices, reshuffled every epoch from a derived seed"""

    def __init__(self, n: int, rng: Rng):
        self.n = n
        self.rng = rng
        self.epoch = 0
        self._perm = self.rng.derive(self.epoch).permutation(n)
        self._pos = 0

    def take(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            if self._pos == self.n:
                self.epoch += 1
                self._perm = self.rng.derive(self.epoch).permutation(self.n)
                self._pos = 0
            k = min(size - filled, self.n - self._pos)
            out[filled:filled + k] = self._perm[self._pos:self._pos + k]
            filled += k
            self._pos += k
        return out


def as_training_arrays(dataset) -> Tuple[np.ndarray, np.ndarray]:
    """(cond, x) matrices from a dataset object or a list of (cond, x) pairs"""
    if hasattr(dataset, 'cond') and hasattr(dataset, 'x'):
        cond, x = np.asarray(dataset.cond, dtype=np.float64), np.asarray(dataset.x, dtype=np.float64)
    else:
        pairs = list(dataset)
        if not pairs:
            raise ConfigurationError("dataset is empty", "empty_dataset")
        cond = np.array([p[0] for p in pairs], dtype=np.float64)
        x = np.array([p[1] for p in pairs], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("dataset is empty", "empty_dataset")
    if cond.ndim == 1:
        cond = cond.reshape(x.shape[0], cond.size // x.shape[0])
    return cond, x


def train(dataset,
          cfg: TrainConfig,
          net: Optional[MlpNet] = None,
          progress: bool = False,
          callback: Optional[Callable[[int, float], None]] = None) -> Tuple[MlpNet, TrainReport]:
    """Run cfg.steps train steps over shuffled minibatches"""
    cfg.validate()
    cond, x = as_training_arrays(dataset)
    if cfg.cond_dim and cfg.cond_dim != cond.shape[1]:
        raise ConfigurationError(f"cond_dim={cfg.cond_dim} but the dataset has {cond.shape[1]} features")
    if x.shape[1] != cfg.z_dim:
        raise ConfigurationError(f"dataset chunks have {x.shape[1]} entries, config expects "
                                 f"chunk_h*act_dim = {cfg.z_dim}")

    root = Rng(cfg.seed)
    if net is None:
        net = MlpNet.create(cfg.z_dim, cond.shape[1], cfg.hidden_dims, cfg.time_embed_dim,
                            cfg.activation, rng=root.derive(0))
    noise_rng = root.derive(1)
    indexer = _BatchIndexer(x.shape[0], root.derive(2))
    opt = Adam.from_config(net, cfg)

    logger.info(f"Training {net!r} on {x.shape[0]} samples for {cfg.steps} steps "
                f"(flow_ratio={cfg.flow_ratio}, gamma={cfg.gamma}, lr={cfg.learn_rate} {cfg.lr_schedule})")
    losses = []
    start = time.perf_counter()
    bar = tqdm(range(cfg.steps), desc="train", disable=not progress, leave=False)
    for step in bar:
        opt.learn_rate = learning_rate_at(cfg, step)
        idx = indexer.take(cfg.batch_size)
        batch = make_batch(x[idx], cond[idx], noise_rng, cfg.flow_ratio)
        net, opt, loss = train_step(net, batch, cfg, opt)
        losses.append(loss)
        if callback is not None:
            callback(step + 1, loss)
        if (step + 1) % cfg.log_every == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.info(f"step {step + 1}/{cfg.steps} loss={loss:.6f}")
    wall = time.perf_counter() - start

    report = TrainReport(losses=losses, checksum=net.checksum(), wall_time=wall,
                         config=cfg.to_dict(), net=net.describe())
    logger.info(f"Training finished in {wall:.1f}s, final loss {report.final_loss:.6f}")
    return net, report
