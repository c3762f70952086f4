import math

import numpy as np
import pytest

from tslab import critical_points as cp
from tslab.activations import ERF, RELU
from tslab.gradient_flow import (OPT_CA, OTHER, PERTURBED_N_COPY, ClassifierThresholds, FlowConfig,
                                 FlowRecord, NotConvergedError, _Field, classify, init_student,
                                 integrate)
from tslab.kernels import ERF_ANALYTIC, RELU_ANALYTIC
from tslab.population_loss import (StudentNet, build_unit_orthonormal_teacher, loss,
                                   to_order_params)


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(grad_tol=0)
    with pytest.raises(ValueError):
        FlowConfig(max_steps=0)
    with pytest.raises(ValueError):
        FlowConfig(init="uniform")
    assert FlowConfig(thresholds={"pnc_corr": 0.8}).thresholds.pnc_corr == 0.8


def test_init_is_deterministic():
    a = init_student(3, 5, FlowConfig(seed=11))
    b = init_student(3, 5, FlowConfig(seed=11))
    np.testing.assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_student(3, 5, FlowConfig(seed=12)).theta)
    with pytest.raises(ValueError):
        init_student(0, 3, FlowConfig())


def test_gaussian_init_std():
    draws = np.concatenate([init_student(8, 9, FlowConfig(seed=s)).theta for s in range(125)])
    assert draws.size == 10_000
    assert 0.095 <= draws.std() <= 0.105


def test_glorot_init_std():
    n, d = 8, 30
    W = np.concatenate([init_student(n, d, FlowConfig(init="glorot", seed=s)).W.ravel() for s in range(200)])
    a = np.concatenate([init_student(n, d, FlowConfig(init="glorot", seed=s)).a for s in range(200)])
    assert W.std() == pytest.approx(math.sqrt(2 / (d + n)), rel=0.03)
    assert a.std() == pytest.approx(math.sqrt(2 / (n + 1)), rel=0.08)


def test_compiled_field_matches_numpy():
    rng = np.random.default_rng(0)
    t = build_unit_orthonormal_teacher(4, 6, seed=1)
    fast, slow = _Field(3, 6, t, ERF_ANALYTIC), _Field(3, 6, t, ERF_ANALYTIC, compiled=False)
    assert fast.compiled and not slow.compiled
    for _ in range(10):
        y = rng.standard_normal(21)
        (v1, g1), (v2, g2) = fast(y), slow(y)
        assert v1 == pytest.approx(v2, abs=1e-13)
        np.testing.assert_allclose(g1, g2, atol=1e-13)


def test_two_neuron_flow_reaches_copy_average():
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=3)
    rec = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    assert rec.converged and rec.final_grad_norm <= 5e-8 and not rec.polished
    assert abs(rec.final_loss - cp.erf_one_neuron_loss(2)) <= 1e-4
    assert classify(rec, t, 2, 3) == OPT_CA


def test_one_neuron_flow_reaches_closed_form():
    t = build_unit_orthonormal_teacher(4, 5)
    cfg = FlowConfig(seed=0)
    rec = integrate(init_student(1, 5, cfg), t, ERF_ANALYTIC, cfg)
    assert rec.converged
    s = rec.final_student
    assert np.linalg.norm(s.W) == pytest.approx(1 / math.sqrt(7), abs=1e-5)
    assert abs(s.a[0]) == pytest.approx(4, abs=1e-3)
    np.testing.assert_allclose(np.abs(to_order_params(s, t).U), 0.5, atol=1e-6)


def test_start_at_critical_point():
    t = build_unit_orthonormal_teacher(8, 9)
    point = cp.optimal_ca(4, 8, t)
    rec = integrate(point.student, t, ERF_ANALYTIC, FlowConfig())
    assert rec.converged and rec.steps == 0
    np.testing.assert_array_equal(rec.final_student.theta, point.student.theta)
    assert classify(rec, t, 4, 8) == OPT_CA


def test_determinism_and_monotone_loss():
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=5, snapshot_stride=1, max_steps=400)
    r1 = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    r2 = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    np.testing.assert_array_equal(r1.final_student.theta, r2.final_student.theta)
    assert [s.loss for s in r1.snapshots] == [s.loss for s in r2.snapshots]
    losses = np.array([s.loss for s in r1.snapshots])
    assert np.all(np.diff(losses) <= 1e-10)
    assert len(r1.snapshots) == r1.steps + 1
    assert np.all(np.diff([s.time for s in r1.snapshots]) > 0)


def test_snapshot_stride():
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=1, snapshot_stride=50, max_steps=500)
    rec = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    # initial point, every 50th step and the final point
    assert len(rec.snapshots) == 1 + rec.steps // 50 + (rec.steps % 50 != 0)


def test_sign_flip_equivariance():
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=2, snapshot_stride=25, max_steps=300)
    s0 = init_student(2, 4, cfg)
    flip = np.array([-1.0, 1.0])
    s1 = StudentNet(s0.W * flip, s0.a * flip)
    r0 = integrate(s0, t, ERF_ANALYTIC, cfg)
    r1 = integrate(s1, t, ERF_ANALYTIC, cfg)
    assert r0.steps == r1.steps
    np.testing.assert_allclose(r1.final_student.W, r0.final_student.W * flip, atol=1e-10)
    np.testing.assert_allclose(r1.final_student.a, r0.final_student.a * flip, atol=1e-10)
    for a, b in zip(r0.snapshots, r1.snapshots):
        np.testing.assert_allclose(b.order.U, a.order.U * flip[:, None], atol=1e-10)


def test_max_steps_gives_unconverged_record():
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=0, max_steps=10)
    rec = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    assert not rec.converged and rec.steps == 10 and "max_steps" in rec.status
    assert rec.final_grad_norm > cfg.grad_tol
    with pytest.raises(NotConvergedError):
        classify(rec, t, 2, 3)


def test_zero_norm_start_is_degenerate():
    t = build_unit_orthonormal_teacher(3, 4)
    s0 = StudentNet(np.zeros((4, 2)), np.ones(2))
    rec = integrate(s0, t, ERF_ANALYTIC, FlowConfig())
    assert rec.degenerate and not rec.converged


def test_newton_polish_is_flagged():
    t = build_unit_orthonormal_teacher(8, 9)
    cfg = FlowConfig(seed=0, newton_polish=True, snapshot_stride=0)
    rec = integrate(init_student(4, 9, cfg), t, ERF_ANALYTIC, cfg)
    assert rec.converged and rec.polished and "newton" in rec.status
    assert classify(rec, t, 4, 8) == OPT_CA


def test_n_copy_start_settles_to_perturbed_copy():
    t = build_unit_orthonormal_teacher(9, 10)
    s0 = StudentNet(t.V[:, :8].copy(), np.ones(8))
    cfg = FlowConfig(snapshot_stride=0)
    rec = integrate(s0, t, ERF_ANALYTIC, cfg)
    assert rec.converged
    assert classify(rec, t, 8, 9) == PERTURBED_N_COPY
    assert rec.final_loss < cp.erf_one_neuron_loss(2)


def test_random_student_is_other():
    t = build_unit_orthonormal_teacher(8, 9)
    rng = np.random.default_rng(0)
    s = StudentNet(rng.standard_normal((9, 4)), rng.standard_normal(4))
    rec = FlowRecord(s, loss(s, t, ERF_ANALYTIC), 0.0, True, 0, 0.0)
    assert classify(rec, t, 4, 8) == OTHER


def test_thresholds_are_overridable():
    t = build_unit_orthonormal_teacher(8, 9)
    point = cp.optimal_ca(4, 8, t)
    rec = FlowRecord(point.student, point.loss_value, 0.0, True, 0, 0.0)
    assert classify(rec, t, 4, 8) == OPT_CA
    strict = ClassifierThresholds(loss_gap=-1.0)     # no loss can pass the cross-check
    assert classify(rec, t, 4, 8, strict) == OTHER


def test_relu_flow_runs():
    t = build_unit_orthonormal_teacher(4, 5, RELU)
    cfg = FlowConfig(seed=1, snapshot_stride=0)
    rec = integrate(init_student(1, 5, cfg, RELU), t, RELU_ANALYTIC, cfg)
    assert rec.converged
    s = rec.final_student
    assert np.linalg.norm(s.W) * s.a[0] == pytest.approx(cp.relu_one_neuron_magnitude(4), abs=1e-3)
