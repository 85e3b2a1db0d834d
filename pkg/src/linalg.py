"""
Dense float64 arithmetic and deterministic random streams.

Vectors and matrices are plain numpy float64 arrays. Every random draw in the
package goes through an explicit Rng; there is no global generator.
"""

import logging
import numpy as np
import numpy.typing as npt

from .error_handler import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

Vec64 = npt.NDArray[np.float64]
Mat64 = npt.NDArray[np.float64]


class Rng:
    """Counter-based (Philox) generator with an explicit seed.

    Identical seed and call sequence give a bit-identical stream. Use derive()
    to hand independent streams to rollouts, epochs or sweep cells.
    """

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def derive(self, *ids: int) -> 'Rng':
        """Independent child stream keyed by (seed, *ids); does not advance self"""
        ss = np.random.SeedSequence([self.seed, *[int(i) for i in ids]])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def gauss(self, *shape: int) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def gauss_sample(rng: Rng, n: int) -> Vec64:
    """n independent standard-normal draws"""
    if n < 1:
        raise ContractViolation(f"gauss_sample needs n >= 1, got {n}")
    return rng.gauss(n)


def axpy(a, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """a*x + y elementwise; `a` may be a scalar or broadcast against x"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"axpy length mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def matvec(m: Mat64, x: np.ndarray) -> np.ndarray:
    """m @ x for a vector, or row-wise for a (batch, cols) array"""
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"matvec needs a matrix, got shape {m.shape}")
    if x.shape[-1] != m.shape[1]:
        raise ContractViolation(f"matvec dimension mismatch: cols={m.shape[1]}, x has {x.shape[-1]}")
    if x.ndim == 1:
        return m @ x
    return x @ m.T

