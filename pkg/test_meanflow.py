"""Tests for time-pair sampling, the MeanFlow target, the losses and training"""
import os

import numpy as np
import pytest

from src.config import TrainConfig
from src.error_handler import ConfigurationError, ContractViolation, TrainingDivergence
from src.flow import LINEAR, cond_velocity, interpolate
from src.linalg import Rng
from src.meanflow import (Adam, TimePair, TrainBatch, TrainReport, batch_gradients, compute_loss, learning_rate_at,
                          loss_adaptive, loss_l2, make_batch, meanflow_target, sample_time_pair, sample_time_pairs,
                          train, train_step)
from src.nnet import MlpNet, NetInput
from src.sampler import SingletonOracle


def test_pure_flow_matching_pairs_are_degenerate():
    r, t = sample_time_pairs(Rng(0), 1000, 0.0)
    assert np.array_equal(r, t)


def test_pairs_are_ordered():
    r, t = sample_time_pairs(Rng(1), 1000, 1.0)
    assert np.all((0.0 <= r) & (r <= t) & (t <= 1.0))
    assert np.mean(r == t) == 0.0


def test_degenerate_fraction_follows_flow_ratio():
    r, t = sample_time_pairs(Rng(2), 100_000, 0.2)
    assert abs(np.mean(r == t) - 0.8) < 0.004


def test_flow_ratio_out_of_range():
    with pytest.raises(ConfigurationError):
        sample_time_pairs(Rng(0), 10, 1.2)


def test_time_pair_contract():
    pair = sample_time_pair(Rng(3), 0.5)
    assert 0.0 <= pair.r <= pair.t <= 1.0
    assert TimePair(0.4, 0.4).degenerate
    with pytest.raises(ContractViolation):
        TimePair(0.6, 0.2)


def test_degenerate_target_is_the_velocity():
    """r = t makes the JVP term vanish exactly"""
    rng = Rng(4)
    for k in range(10):
        net = MlpNet.create(2, 2, [16, 16], time_embed_dim=4, rng=rng.derive(k), zero_final=False)
        x, e, cond = rng.gauss(100, 2), rng.gauss(100, 2), rng.gauss(100, 2)
        t = rng.uniform(100)
        z = interpolate(LINEAR, x, e, t)
        v = cond_velocity(LINEAR, x, e)
        assert np.array_equal(meanflow_target(net, z, cond, (t, t), v), v)


def test_target_uses_the_jvp(small_net):
    rng = Rng(5)
    z, cond, v = rng.gauss(2), rng.gauss(2), rng.gauss(2)
    pair = TimePair(0.2, 0.7)
    expected = v - 0.5 * small_net.jvp(NetInput(z, cond, 0.2, 0.7), v, 0.0, 1.0)
    assert np.allclose(meanflow_target(small_net, z, cond, pair, v), expected, rtol=0, atol=1e-14)


def test_oracle_target_is_the_oracle():
    """On the exact singleton field the target reproduces the field itself"""
    x0 = np.array([0.3, -0.7])
    oracle = SingletonOracle(x0)
    rng = Rng(6)
    e = rng.gauss(2)
    t, r = 0.8, 0.3
    z = interpolate(LINEAR, x0, e, t)
    v = cond_velocity(LINEAR, x0, e)
    tgt = meanflow_target(oracle, z, np.zeros(0), (r, t), v)
    assert np.allclose(tgt, oracle.forward(NetInput(z, np.zeros(0), r, t)), atol=1e-12)


def test_stop_gradient_matches_frozen_target(small_net):
    cfg = TrainConfig(gamma=0.5)
    batch = make_batch(Rng(7).gauss(32, 2), Rng(8).gauss(32, 2), Rng(9), 0.5)
    loss, grads, u_tgt = batch_gradients(small_net, batch, cfg)

    frozen = u_tgt.copy()
    z = interpolate(LINEAR, batch.x, batch.e, batch.t)
    inp = NetInput(z, batch.cond, batch.r, batch.t)
    _, out_grad = compute_loss(small_net.forward(inp), frozen, cfg)
    manual = small_net.backward(inp, out_grad)
    assert np.array_equal(grads.flat(), manual.flat())


def test_target_net_changes_only_the_target(small_net):
    cfg = TrainConfig(gamma=1.0)
    batch = make_batch(Rng(10).gauss(8, 2), np.zeros((8, 2)), Rng(11), 1.0)
    other = small_net.copy()
    other.set_parameters(other.parameters() * 0.5)
    _, _, own = batch_gradients(small_net, batch, cfg)
    _, _, foreign = batch_gradients(small_net, batch, cfg, target_net=other)
    assert not np.array_equal(own, foreign)


def test_adaptive_loss_hand_value():
    loss, _ = loss_adaptive(np.array([[3.0, 4.0]]), np.zeros((1, 2)), gamma=0.5, c=1e-3)
    assert abs(loss - 25.0 / np.sqrt(25.001)) < 1e-9


def test_gamma_one_is_plain_l2():
    rng = Rng(12)
    pred, tgt = rng.gauss(16, 3), rng.gauss(16, 3)
    l2, g2 = loss_l2(pred, tgt)
    la, ga = loss_adaptive(pred, tgt, gamma=1.0, c=1e-3)
    assert l2 == la
    assert np.array_equal(g2, ga)
    lc, gc = compute_loss(pred, tgt, TrainConfig(gamma=1.0))
    assert lc == l2 and np.array_equal(gc, g2)


def test_l2_gradient():
    pred = np.array([[1.0, 2.0], [0.0, 0.0]])
    loss, grad = loss_l2(pred, np.zeros((2, 2)))
    assert loss == 2.5
    assert np.array_equal(grad, pred)


def test_adaptive_weights_downweight_large_errors():
    pred = np.array([[0.1, 0.0], [1.0, 0.0], [0.0, 10.0], [100.0, 0.0]])
    _, grad = loss_adaptive(pred, np.zeros((4, 2)), gamma=0.5, c=1e-3)
    _, grad_l2 = loss_l2(pred, np.zeros((4, 2)))
    ratio = np.linalg.norm(grad, axis=1) / np.linalg.norm(grad_l2, axis=1)
    assert np.all(np.diff(ratio) < 0)


def test_loss_shape_mismatch():
    with pytest.raises(ContractViolation):
        loss_l2(np.zeros((2, 2)), np.zeros((2, 3)))


def test_invalid_gamma():
    with pytest.raises(ConfigurationError):
        loss_adaptive(np.zeros((1, 2)), np.zeros((1, 2)), gamma=0.0, c=1e-3)


def test_adam_first_step_is_signed_learn_rate(small_net):
    opt = Adam(small_net, learn_rate=0.01)
    before = small_net.parameters().copy()
    grads = small_net.backward(NetInput(np.ones(2), np.ones(2), 0.2, 0.6), np.ones(2))
    opt.update(small_net, grads)
    step = small_net.parameters() - before
    g = grads.flat()
    moved = np.abs(g) > 1e-3
    assert np.allclose(step[moved], -0.01 * np.sign(g[moved]), rtol=1e-4)
    assert opt.step == 1


def test_train_step_raises_on_divergence(small_net):
    x = np.full((4, 2), np.inf)
    batch = make_batch(x, np.zeros((4, 2)), Rng(14), 0.2)
    with pytest.raises(TrainingDivergence) as err:
        train_step(small_net, batch, TrainConfig())
    assert err.value.step == 1


def test_train_step_dimension_contract(small_net):
    batch = TrainBatch(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros(2), np.ones(2))
    with pytest.raises(ContractViolation):
        train_step(small_net, batch, TrainConfig())


def _singleton_pairs(n=64):
    return [(np.zeros(0), np.array([0.3, -0.7]))] * n


def test_training_is_deterministic(tiny_config):
    net_a, rep_a = train(_singleton_pairs(), tiny_config)
    net_b, rep_b = train(_singleton_pairs(), tiny_config)
    assert rep_a.checksum == rep_b.checksum
    assert rep_a.losses == rep_b.losses
    assert net_a.checksum() == net_b.checksum()


def test_flow_matching_training_reduces_the_loss():
    cfg = TrainConfig(steps=300, batch_size=32, hidden_dims=[32], time_embed_dim=4, chunk_h=1, act_dim=2,
                      learn_rate=3e-3, lr_schedule='constant', gamma=1.0, flow_ratio=0.0)
    _, report = train(_singleton_pairs(), cfg)
    assert np.mean(report.losses[-20:]) < 0.5 * np.mean(report.losses[:20])


def test_meanflow_training_reduces_the_loss():
    cfg = TrainConfig(steps=300, batch_size=32, hidden_dims=[32], time_embed_dim=4, chunk_h=1, act_dim=2,
                      learn_rate=3e-3, lr_schedule='constant', gamma=1.0, flow_ratio=0.2)
    _, report = train(_singleton_pairs(), cfg)
    assert np.mean(report.losses[-20:]) < 0.8 * np.mean(report.losses[:20])


def test_cosine_schedule_decays_to_zero():
    cfg = TrainConfig(steps=100, learn_rate=2e-3)
    assert learning_rate_at(cfg, 0) == pytest.approx(2e-3)
    assert learning_rate_at(cfg, 50) == pytest.approx(1e-3)
    assert learning_rate_at(cfg, 99) < 1e-5
    rates = [learning_rate_at(cfg, s) for s in range(100)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    constant = TrainConfig(steps=100, learn_rate=2e-3, lr_schedule='constant')
    assert {learning_rate_at(constant, s) for s in range(100)} == {2e-3}


def test_zero_learn_rate_leaves_parameters_unchanged(tiny_config):
    net = MlpNet.create(2, 0, [8], time_embed_dim=4, rng=Rng(5), zero_final=False)
    before = net.checksum()
    cfg = TrainConfig(**{**tiny_config.to_dict(), 'learn_rate': 0.0})
    _, report = train(_singleton_pairs(), cfg, net=net)
    assert net.checksum() == before
    assert len(report.losses) == cfg.steps


def test_unknown_lr_schedule_rejected():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule='step').validate()


def test_train_rejects_empty_and_mismatched_data(tiny_config):
    with pytest.raises(ConfigurationError) as empty:
        train([], tiny_config)
    assert empty.value.error_type == 'empty_dataset'
    with pytest.raises(ConfigurationError):
        train([(np.zeros(0), np.zeros(5))], tiny_config)


def test_train_report_files(tiny_config, run_dir):
    net, report = train(_singleton_pairs(), tiny_config)
    paths = report.write(run_dir)
    assert os.path.exists(paths['train_report'])
    with open(paths['loss_csv']) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'step,loss'
    assert len(lines) == tiny_config.steps + 1
    assert report.to_dict()['checksum'] == net.checksum()


@pytest.mark.slow
def test_singleton_recovery_after_training():
    """One-step samples land on the single data point"""
    from src.sampler import sample_one_step
    x0 = np.array([0.3, -0.7])
    cfg = TrainConfig(steps=2000, batch_size=256, hidden_dims=[64, 64], time_embed_dim=4, chunk_h=1,
                      act_dim=2, learn_rate=3e-3, lr_schedule='cosine')
    net, _ = train(_singleton_pairs(256), cfg)
    rng = Rng(99)
    hits = sum(np.max(np.abs(sample_one_step(net, np.zeros(0), rng) - x0)) < 1e-2 for _ in range(100))
    assert hits >= 95
