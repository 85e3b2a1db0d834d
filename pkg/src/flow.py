"""Interpolation paths between data (t=0) and noise (t=1)."""

from dataclasses import dataclass

import numpy as np

from .error_handler import ConfigurationError, ContractViolation
from .linalg import axpy


@dataclass(frozen=True)
class FlowPath:
    """z_t = a_t x + b_t e; only the linear schedule a_t = 1 - t, b_t = t exists"""
    schedule: str = 'linear'

    def __post_init__(self):
        if self.schedule != 'linear':
            raise ConfigurationError(f"unsupported flow schedule '{self.schedule}'")


LINEAR = FlowPath()


def _time_column(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractViolation(f"t must lie in [0,1], got {t}")
    if t.ndim == 1 and x.ndim == 2:
        if t.shape[0] != x.shape[0]:
            raise ContractViolation(f"{t.shape[0]} times for a batch of {x.shape[0]}")
        return t[:, None]
    return t


def interpolate(path: FlowPath, x: np.ndarray, e: np.ndarray, t) -> np.ndarray:
    """(1 - t) x + t e; exact at both ends"""
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if x.shape != e.shape:
        raise ContractViolation(f"interpolate length mismatch: {x.shape} vs {e.shape}")
    tc = _time_column(t, x)
    return axpy(tc, e, (1.0 - tc) * x)


def cond_velocity(path: FlowPath, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """dz_t/dt = e - x along the linear path"""
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if x.shape != e.shape:
        raise ContractViolation(f"cond_velocity length mismatch: {x.shape} vs {e.shape}")
    return e - x
