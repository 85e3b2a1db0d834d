"""Tests for the float64 helpers and the seeded random streams"""
import numpy as np
import pytest

from src.error_handler import ConfigurationError, ContractViolation
from src.linalg import Rng, axpy, gauss_sample, matvec


def test_same_seed_same_stream():
    assert np.array_equal(Rng(7).gauss(5, 3), Rng(7).gauss(5, 3))
    assert not np.array_equal(Rng(7).gauss(5), Rng(8).gauss(5))


def test_derive_is_independent_of_parent_position():
    parent = Rng(11)
    first = parent.derive(2).uniform(4)
    parent.gauss(100)
    assert np.array_equal(first, parent.derive(2).uniform(4))
    assert not np.array_equal(parent.derive(2).uniform(4), parent.derive(3).uniform(4))


def test_derive_does_not_advance_parent():
    a, b = Rng(5), Rng(5)
    a.derive(0, 1)
    assert np.array_equal(a.gauss(3), b.gauss(3))


def test_negative_seed_rejected():
    with pytest.raises(ConfigurationError):
        Rng(-1)


def test_gauss_sample_shape_and_precondition():
    assert gauss_sample(Rng(0), 6).shape == (6,)
    with pytest.raises(ContractViolation):
        gauss_sample(Rng(0), 0)


def test_uniform_bounds():
    u = Rng(2).uniform(1000, low=-0.005, high=0.005)
    assert u.min() >= -0.005 and u.max() < 0.005


def test_axpy_values_and_mismatch():
    assert np.array_equal(axpy(2.0, np.array([1.0, 2.0]), np.array([0.5, 0.5])), np.array([2.5, 4.5]))
    with pytest.raises(ContractViolation):
        axpy(1.0, np.zeros(2), np.zeros(3))


def test_axpy_column_coefficient():
    x = np.ones((3, 2))
    a = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(axpy(a, x, np.zeros((3, 2)))[:, 1], [1.0, 2.0, 3.0])


def test_matvec_single_and_batch_agree():
    rng = Rng(4)
    m = rng.gauss(3, 5)
    xs = rng.gauss(4, 5)
    batch = matvec(m, xs)
    for i in range(4):
        assert np.allclose(batch[i], matvec(m, xs[i]), rtol=0, atol=1e-14)


def test_matvec_dimension_mismatch():
    with pytest.raises(ContractViolation):
        matvec(np.zeros((2, 3)), np.zeros(2))

