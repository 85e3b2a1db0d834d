"""
The action-expert network: a multilayer perceptron u(z, r, t | cond).

Inputs are the noisy flattened chunk z, the observation features cond and the
sinusoidal embeddings of t and of the interval t - r. The network supports a
forward pass, reverse-mode parameter gradients and a forward-mode JVP with
respect to (z, r, t). The JVP pass never touches parameter gradients.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from .error_handler import CheckpointError, ConfigurationError, ContractViolation
from .linalg import Rng, matvec

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "meanflow-actions-ckpt/1"
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
EMBED_BASE = 2.0 * np.pi
# must not be a multiple of 2*pi, or emb(0) == emb(1)
NET_TIME_BASE = 0.5 * np.pi


def _check_embed_dim(dim: int):
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"time embedding dim must be even and >= 2, got {dim}")


def _embed_freqs(dim: int, base: float) -> np.ndarray:
    return base * np.power(2.0, np.arange(dim // 2))


def time_embed(s, dim: int, base: float = EMBED_BASE) -> np.ndarray:
    """[sin(w_0 s), cos(w_0 s), sin(w_1 s), ...] with w_k = base * 2^k"""
    _check_embed_dim(dim)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ContractViolation(f"time embedding input must lie in [0,1], got {s}")
    phase = s[..., None] * _embed_freqs(dim, base)
    out = np.empty(s.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def time_embed_derivative(s, dim: int, base: float = EMBED_BASE) -> np.ndarray:
    """d time_embed(s, dim, base) / ds"""
    _check_embed_dim(dim)
    s = np.asarray(s, dtype=np.float64)
    freqs = _embed_freqs(dim, base)
    phase = s[..., None] * freqs
    out = np.empty(s.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = freqs * np.cos(phase)
    out[..., 1::2] = -freqs * np.sin(phase)
    return out


@dataclass
class NetInput:
    """One query point (z, cond, r, t); z and cond may carry a leading batch axis"""
    z: np.ndarray
    cond: np.ndarray
    r: Any
    t: Any

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.z.ndim not in (1, 2):
            raise ContractViolation(f"z must be a vector or a batch of vectors, got shape {self.z.shape}")
        if self.cond.ndim != self.z.ndim:
            raise ContractViolation(f"cond rank {self.cond.ndim} does not match z rank {self.z.ndim}")
        if self.z.ndim == 2 and self.cond.shape[0] != self.z.shape[0]:
            raise ContractViolation(f"batch mismatch: z has {self.z.shape[0]} rows, cond has {self.cond.shape[0]}")
        if np.any(self.r < 0.0) or np.any(self.t > 1.0) or np.any(self.r > self.t):
            raise ContractViolation("time pair must satisfy 0 <= r <= t <= 1")

    @property
    def batched(self) -> bool:
        return self.z.ndim == 2

    @property
    def batch_size(self) -> int:
        return self.z.shape[0] if self.batched else 1

    def as_batch(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(z, cond, r, t) with a batch axis of length B"""
        z = np.atleast_2d(self.z)
        cond = self.cond.reshape(z.shape[0], self.cond.shape[-1])
        r = np.broadcast_to(self.r, (z.shape[0],))
        t = np.broadcast_to(self.t, (z.shape[0],))
        return z, cond, r, t


def _unbatch(out: np.ndarray, inp: NetInput) -> np.ndarray:
    return out if inp.batched else out[0]


@dataclass
class GradBuffer:
    """Per-layer weight/bias gradients mirroring an MlpNet"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: 'MlpNet') -> 'GradBuffer':
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def __add__(self, other: 'GradBuffer') -> 'GradBuffer':
        return GradBuffer([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)])

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


class MlpNet:
    """Conditioned MLP field predictor with backprop and JVP"""

    def __init__(self,
                 weights: Sequence[np.ndarray],
                 biases: Sequence[np.ndarray],
                 z_dim: int,
                 cond_dim: int,
                 time_embed_dim: int,
                 activation: str = 'tanh',
                 time_base: float = NET_TIME_BASE):
        _check_embed_dim(time_embed_dim)
        if not np.isfinite(time_base) or time_base <= 0.0:
            raise ConfigurationError(f"time_base must be finite and > 0, got {time_base}")
        if activation not in ('tanh', 'gelu'):
            raise ConfigurationError(f"unknown activation '{activation}'")
        if len(weights) == 0 or len(weights) != len(biases):
            raise ContractViolation("a net needs at least one layer and one bias per layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.z_dim = int(z_dim)
        self.cond_dim = int(cond_dim)
        self.time_embed_dim = int(time_embed_dim)
        self.activation = activation
        self.time_base = float(time_base)

        expected_in = self.in_dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape} and bias {b.shape} do not fit")
            if w.shape[1] != expected_in:
                raise ContractViolation(f"layer {i}: expects {expected_in} inputs, weight has {w.shape[1]} columns")
            expected_in = w.shape[0]
        if expected_in != self.z_dim:
            raise ContractViolation(f"output dim {expected_in} must equal z_dim {self.z_dim}")

    @classmethod
    def create(cls,
               z_dim: int,
               cond_dim: int,
               hidden_dims: Sequence[int],
               time_embed_dim: int = 8,
               activation: str = 'tanh',
               rng: Optional[Rng] = None,
               zero_final: bool = True) -> 'MlpNet':
        """Glorot-uniform hidden layers, zero biases, zero final layer by default"""
        _check_embed_dim(time_embed_dim)
        rng = rng or Rng(0)
        dims = [z_dim + cond_dim + 2 * time_embed_dim, *hidden_dims, z_dim]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_final:
                w = np.zeros((fan_out, fan_in))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(fan_out, fan_in, low=-limit, high=limit)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, z_dim, cond_dim, time_embed_dim, activation)

    @property
    def in_dim(self) -> int:
        return self.z_dim + self.cond_dim + 2 * self.time_embed_dim

    @property
    def out_dim(self) -> int:
        return self.z_dim

    @property
    def hidden_dims(self) -> List[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _check_input(self, inp: NetInput):
        if inp.z.shape[-1] != self.z_dim:
            raise ContractViolation(f"z has {inp.z.shape[-1]} entries, net expects {self.z_dim}")
        if inp.cond.shape[-1] != self.cond_dim:
            raise ContractViolation(f"cond has {inp.cond.shape[-1]} entries, net expects {self.cond_dim}")

    # activations

    def _act(self, a: np.ndarray) -> np.ndarray:
        if self.activation == 'tanh':
            return np.tanh(a)
        return a * ndtr(a)

    def _act_grad(self, a: np.ndarray) -> np.ndarray:
        if self.activation == 'tanh':
            return 1.0 - np.square(np.tanh(a))
        return ndtr(a) + a * _INV_SQRT_2PI * np.exp(-0.5 * np.square(a))

    # evaluation

    def features(self, inp: NetInput) -> np.ndarray:
        """Concatenated first-layer input [z, cond, emb(t), emb(t - r)]"""
        self._check_input(inp)
        z, cond, r, t = inp.as_batch()
        return np.concatenate([z, cond,
                               time_embed(t, self.time_embed_dim, self.time_base),
                               time_embed(t - r, self.time_embed_dim, self.time_base)], axis=1)

    def _forward_cached(self, inp: NetInput):
        h = self.features(inp)
        inputs, preacts = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = matvec(w, h) + b
            if i < len(self.weights) - 1:
                preacts.append(a)
                h = self._act(a)
            else:
                h = a
        return h, inputs, preacts

    def forward(self, inp: NetInput) -> np.ndarray:
        """u(z, r, t | cond), shaped like z"""
        out, _, _ = self._forward_cached(inp)
        return _unbatch(out, inp)

    __call__ = forward

    def backward(self, inp: NetInput, out_grad: np.ndarray) -> GradBuffer:
        """Gradient of <forward(inp), out_grad> w.r.t. every weight and bias (summed over a batch)"""
        out_grad = np.asarray(out_grad, dtype=np.float64)
        if out_grad.shape != inp.z.shape:
            raise ContractViolation(f"out_grad shape {out_grad.shape} does not match output shape {inp.z.shape}")
        _, inputs, preacts = self._forward_cached(inp)
        g = np.atleast_2d(out_grad)
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            grad_w[i] = g.T @ inputs[i]
            grad_b[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i]) * self._act_grad(preacts[i - 1])
        return GradBuffer(grad_w, grad_b)

    def jvp(self, inp: NetInput, tangent_z: np.ndarray, tangent_r=0.0, tangent_t=1.0) -> np.ndarray:
        """[du/dz, du/dr, du/dt] . [tangent_z, tangent_r, tangent_t] by dual-number propagation"""
        tangent_z = np.asarray(tangent_z, dtype=np.float64)
        if tangent_z.shape != inp.z.shape:
            raise ContractViolation(f"tangent_z shape {tangent_z.shape} does not match z shape {inp.z.shape}")
        self._check_input(inp)
        z, cond, r, t = inp.as_batch()
        n = z.shape[0]
        tr = np.broadcast_to(np.asarray(tangent_r, dtype=np.float64), (n,))
        tt = np.broadcast_to(np.asarray(tangent_t, dtype=np.float64), (n,))
        dim, base = self.time_embed_dim, self.time_base

        h = np.concatenate([z, cond, time_embed(t, dim, base), time_embed(t - r, dim, base)], axis=1)
        # d(t - r) = dt - dr
        dh = np.concatenate([np.atleast_2d(tangent_z),
                             np.zeros_like(cond),
                             time_embed_derivative(t, dim, base) * tt[:, None],
                             time_embed_derivative(t - r, dim, base) * (tt - tr)[:, None]], axis=1)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = matvec(w, h) + b
            da = matvec(w, dh)
            if i < len(self.weights) - 1:
                h = self._act(a)
                dh = self._act_grad(a) * da
            else:
                dh = da
        return _unbatch(dh, inp)

    # parameters

    def parameters(self) -> np.ndarray:
        """All parameters flattened in layer order (weight then bias)"""
        return GradBuffer(self.weights, self.biases).flat()

    def set_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = flat[pos:pos + b.size]
            pos += b.size

    def copy(self) -> 'MlpNet':
        return MlpNet(self.weights, self.biases, self.z_dim, self.cond_dim, self.time_embed_dim, self.activation,
                      self.time_base)

    def checksum(self) -> str:
        """SHA-256 over the little-endian parameter bytes"""
        return hashlib.sha256(self.parameters().astype('<f8').tobytes()).hexdigest()

    def describe(self) -> Dict[str, Any]:
        return {
            'z_dim': self.z_dim,
            'cond_dim': self.cond_dim,
            'hidden_dims': self.hidden_dims,
            'time_embed_dim': self.time_embed_dim,
            'time_base': self.time_base,
            'activation': self.activation,
            'n_params': self.n_params,
        }

    def __repr__(self):
        dims = [self.in_dim, *self.hidden_dims, self.out_dim]
        return f"MlpNet({'-'.join(str(d) for d in dims)}, {self.activation})"


def save_checkpoint(path: str, net: MlpNet, metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write dims, activation and all parameters as JSON (bit-exact float repr)"""
    doc = {
        'format': CHECKPOINT_FORMAT,
        'z_dim': net.z_dim,
        'cond_dim': net.cond_dim,
        'time_embed_dim': net.time_embed_dim,
        'time_base': net.time_base,
        'activation': net.activation,
        'layers': [{'weight': w.tolist(), 'bias': b.tolist()} for w, b in zip(net.weights, net.biases)],
        'metadata': metadata or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f)
    logger.info(f"Checkpoint written: {path} ({net!r}, checksum {net.checksum()[:12]})")
    return path


def load_checkpoint(path: str) -> Tuple[MlpNet, Dict[str, Any]]:
    """Read a checkpoint; any parse or shape problem raises CheckpointError"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}", "missing")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from e

    if not isinstance(doc, dict) or doc.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing or unknown format tag (expected '{CHECKPOINT_FORMAT}')")
    try:
        layers = doc['layers']
        weights = [np.array(layer['weight'], dtype=np.float64) for layer in layers]
        biases = [np.array(layer['bias'], dtype=np.float64) for layer in layers]
        net = MlpNet(weights, biases, doc['z_dim'], doc['cond_dim'], doc['time_embed_dim'], doc['activation'],
                     doc['time_base'])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing field {e}") from e
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed layer data ({e})") from e
    if not np.all(np.isfinite(net.parameters())):
        raise CheckpointError(f"{path}: parameters contain non-finite values")
    logger.debug(f"Checkpoint loaded: {path} ({net!r})")
    return net, doc.get('metadata', {})
