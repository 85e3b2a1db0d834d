"""Tests for the field network: embeddings, forward, backprop, JVP and checkpoints"""
import json

import numpy as np
import pytest

from src.error_handler import CheckpointError, ConfigurationError, ContractViolation
from src.linalg import Rng
from src.nnet import (NET_TIME_BASE, GradBuffer, MlpNet, NetInput, load_checkpoint, save_checkpoint, time_embed,
                      time_embed_derivative)


def test_time_embed_layout():
    assert np.allclose(time_embed(0.0, 4), [0.0, 1.0, 0.0, 1.0], atol=0)
    quarter = time_embed(0.25, 2)
    assert np.allclose(quarter, [1.0, 0.0], atol=1e-15)


def test_time_embed_rejects_odd_dim():
    with pytest.raises(ConfigurationError):
        time_embed(0.5, 3)


def test_time_embed_derivative_matches_finite_difference():
    h = 1e-6
    for s in (0.1, 0.37, 0.8):
        fd = (time_embed(s + h, 6) - time_embed(s - h, 6)) / (2 * h)
        assert np.allclose(time_embed_derivative(s, 6), fd, rtol=1e-6, atol=1e-6)


def test_zero_final_layer_outputs_zero():
    net = MlpNet.create(z_dim=4, cond_dim=3, hidden_dims=[8, 8], rng=Rng(0))
    out = net.forward(NetInput(np.ones(4), np.ones(3), 0.2, 0.7))
    assert np.array_equal(out, np.zeros(4))


def test_glorot_bounds():
    net = MlpNet.create(z_dim=2, cond_dim=1, hidden_dims=[10], time_embed_dim=4, rng=Rng(1))
    fan_in = net.in_dim
    assert np.abs(net.weights[0]).max() <= np.sqrt(6.0 / (fan_in + 10))
    assert all(not b.any() for b in net.biases)


def test_features_concatenate_time_embeddings(small_net):
    inp = NetInput(np.array([0.5, -0.5]), np.array([1.0, 2.0]), 0.25, 0.75)
    feats = small_net.features(inp)[0]
    assert np.array_equal(feats[:4], [0.5, -0.5, 1.0, 2.0])
    assert np.array_equal(feats[4:8], time_embed(0.75, 4, NET_TIME_BASE))
    assert np.array_equal(feats[8:], time_embed(0.5, 4, NET_TIME_BASE))


def test_default_base_aliases_the_interval_ends():
    assert np.allclose(time_embed(1.0, 4), time_embed(0.0, 4), atol=1e-12)
    assert not np.allclose(time_embed(1.0, 4, NET_TIME_BASE), time_embed(0.0, 4, NET_TIME_BASE), atol=1e-3)


def test_net_features_separate_one_step_and_flow_queries(small_net):
    z, cond = np.zeros(2), np.zeros(2)
    corners = [small_net.features(NetInput(z, cond, r, t))[0] for r, t in ((0.0, 1.0), (1.0, 1.0), (0.0, 0.0))]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.abs(corners[i] - corners[j]).max() > 0.5


def test_time_embed_derivative_with_a_custom_base():
    h = 1e-6
    fd = (time_embed(0.4 + h, 4, NET_TIME_BASE) - time_embed(0.4 - h, 4, NET_TIME_BASE)) / (2 * h)
    assert np.allclose(time_embed_derivative(0.4, 4, NET_TIME_BASE), fd, rtol=1e-6, atol=1e-6)


def test_batched_forward_matches_rows(small_net, rng, inputs):
    z, cond, r, t = inputs(rng, 5)
    batch = small_net.forward(NetInput(z, cond, r, t))
    for i in range(5):
        row = small_net.forward(NetInput(z[i], cond[i], r[i], t[i]))
        assert np.allclose(batch[i], row, rtol=0, atol=1e-14)


def test_input_contract():
    net = MlpNet.create(z_dim=2, cond_dim=2, hidden_dims=[4])
    with pytest.raises(ContractViolation):
        net.forward(NetInput(np.zeros(2), np.zeros(3), 0.0, 1.0))
    with pytest.raises(ContractViolation):
        NetInput(np.zeros(2), np.zeros(2), 0.8, 0.3)
    with pytest.raises(ContractViolation):
        NetInput(np.zeros((3, 2)), np.zeros((2, 2)), 0.0, 1.0)


def _relative_error(a, b, floor=1e-3):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), floor)


@pytest.mark.parametrize('activation', ['tanh', 'gelu'])
def test_jvp_matches_central_differences(activation):
    """2-16-16-2 field, 100 random tangent directions"""
    net = MlpNet.create(z_dim=2, cond_dim=2, hidden_dims=[16, 16], time_embed_dim=4,
                        activation=activation, rng=Rng(21), zero_final=False)
    rng = Rng(22)
    h = 1e-5
    for _ in range(100):
        z, cond = rng.gauss(2), rng.gauss(2)
        t = float(rng.uniform(1, low=0.3, high=0.8)[0])
        r = t - float(rng.uniform(1, low=0.1, high=0.2)[0])
        tz, tr, tt = rng.gauss(2), float(rng.gauss(1)[0]), float(rng.gauss(1)[0])
        jvp = net.jvp(NetInput(z, cond, r, t), tz, tr, tt)
        plus = net.forward(NetInput(z + h * tz, cond, r + h * tr, t + h * tt))
        minus = net.forward(NetInput(z - h * tz, cond, r - h * tr, t - h * tt))
        assert _relative_error(jvp, (plus - minus) / (2 * h)) < 1e-6


def test_jvp_batched_matches_rows(small_net, rng, inputs):
    z, cond, r, t = inputs(rng, 4)
    v = rng.gauss(4, 2)
    batch = small_net.jvp(NetInput(z, cond, r, t), v, 0.0, 1.0)
    for i in range(4):
        assert np.allclose(batch[i], small_net.jvp(NetInput(z[i], cond[i], r[i], t[i]), v[i]), rtol=0, atol=1e-13)


def test_jvp_leaves_parameters_untouched(small_net, rng, inputs):
    before = small_net.parameters().copy()
    z, cond, r, t = inputs(rng, 3)
    small_net.jvp(NetInput(z, cond, r, t), rng.gauss(3, 2))
    assert np.array_equal(before, small_net.parameters())


@pytest.mark.parametrize('activation', ['tanh', 'gelu'])
def test_backward_matches_per_parameter_finite_differences(activation):
    net = MlpNet.create(z_dim=2, cond_dim=1, hidden_dims=[8, 8], time_embed_dim=4,
                        activation=activation, rng=Rng(5), zero_final=False)
    assert net.n_params <= 1000
    rng = Rng(6)
    z, cond = rng.gauss(4, 2), rng.gauss(4, 1)
    t = rng.uniform(4, low=0.3, high=0.9)
    r = t * rng.uniform(4)
    inp = NetInput(z, cond, r, t)
    g = rng.gauss(4, 2)

    analytic = net.backward(inp, g).flat()
    theta = net.parameters().copy()
    h = 1e-6
    for k in range(theta.size):
        bumped = theta.copy()
        bumped[k] += h
        net.set_parameters(bumped)
        up = np.sum(net.forward(inp) * g)
        bumped[k] -= 2 * h
        net.set_parameters(bumped)
        down = np.sum(net.forward(inp) * g)
        fd = (up - down) / (2 * h)
        assert abs(analytic[k] - fd) / max(abs(analytic[k]), abs(fd), 1e-3) < 1e-5
    net.set_parameters(theta)


def test_backward_sums_over_batch(small_net, rng, inputs):
    z, cond, r, t = inputs(rng, 3)
    g = rng.gauss(3, 2)
    total = small_net.backward(NetInput(z, cond, r, t), g)
    parts = GradBuffer.zeros_like(small_net)
    for i in range(3):
        parts = parts + small_net.backward(NetInput(z[i], cond[i], r[i], t[i]), g[i])
    assert np.allclose(total.flat(), parts.flat(), rtol=1e-12, atol=1e-13)


def test_backward_shape_contract(small_net):
    with pytest.raises(ContractViolation):
        small_net.backward(NetInput(np.zeros(2), np.zeros(2), 0.0, 1.0), np.zeros(3))


def test_parameters_round_trip_and_checksum(small_net):
    theta = small_net.parameters()
    digest = small_net.checksum()
    clone = small_net.copy()
    clone.set_parameters(theta + 1.0)
    assert clone.checksum() != digest
    clone.set_parameters(theta)
    assert clone.checksum() == digest
    with pytest.raises(ContractViolation):
        clone.set_parameters(theta[:-1])


def test_copy_is_independent(small_net):
    clone = small_net.copy()
    clone.weights[0][0, 0] += 1.0
    assert clone.checksum() != small_net.checksum()


def test_checkpoint_round_trip_is_bit_exact(small_net, tmp_path):
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(path, small_net, {'task': 'gmm'})
    loaded, meta = load_checkpoint(path)
    assert loaded.checksum() == small_net.checksum()
    assert meta == {'task': 'gmm'}
    assert loaded.describe() == small_net.describe()


def test_checkpoint_errors(tmp_path, small_net):
    with pytest.raises(CheckpointError) as missing:
        load_checkpoint(str(tmp_path / 'nope.json'))
    assert missing.value.error_type == 'missing'

    garbage = tmp_path / 'garbage.json'
    garbage.write_text('{"format": "meanflow-actions-ckpt/1", "layers": [')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(garbage))

    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(path, small_net)
    with open(path) as f:
        doc = json.load(f)
    doc['layers'][0]['weight'] = doc['layers'][0]['weight'][:-1]
    with open(path, 'w') as f:
        json.dump(doc, f)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_keeps_the_time_base(small_net, tmp_path):
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(path, small_net)
    assert load_checkpoint(path)[0].time_base == NET_TIME_BASE
    with open(path) as f:
        doc = json.load(f)
    del doc['time_base']
    with open(path, 'w') as f:
        json.dump(doc, f)
    with pytest.raises(CheckpointError) as missing:
        load_checkpoint(path)
    assert 'time_base' in str(missing.value)
