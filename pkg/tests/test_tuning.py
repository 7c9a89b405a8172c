import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hptune.planner import ObstaclePrediction, TunableParams
from hptune.tuning import (
    ExecutedHistory,
    LossWeights,
    MarginConfig,
    RiskGrid,
    SlowTuner,
    UpdateStats,
    build_risk_grid,
    gradient_check,
    gradients,
    loss_L1,
    loss_L2,
    loss_L3,
    margin_grid,
    proactive_margin,
    random_instance,
    total_loss,
    update_params,
)
from hptune.vehicle import rollout

from oracles import central_difference, loss_oracle

CFG = MarginConfig()
W = LossWeights()


def _hist(pairs, T=None):
    """History whose entries have the given (|ds|^2, |dw|^2)."""
    h = ExecutedHistory(T or len(pairs))
    for es, ew in pairs:
        h.append([math.sqrt(es), 0, 0], [math.sqrt(ew), 0], [0, 0, 0], [0, 0])
    return h


# --- margins ---------------------------------------------------------------

def test_margin_examples():
    assert proactive_margin(-1.0, 1.0, 5.0) == 0.2
    assert proactive_margin(0.0, 1.0, 5.0) == 0.2
    assert proactive_margin(0.2, 1.0, 5.0) - 0.2 == pytest.approx(1.8 * math.tanh(1.0), abs=1e-9)
    assert 1.8 * math.tanh(1.0) == pytest.approx(1.8 * 0.7615941559557649, abs=1e-12)
    assert round(1.8 * math.tanh(1.0), 3) == 1.371
    assert proactive_margin(1e6, 1e-9, 5.0) == pytest.approx(2.0)
    assert proactive_margin(1.0, 0.0, 1.0) == pytest.approx(2.0)  # d floored at d_min


finite = st.floats(-50, 50, allow_nan=False)


@given(v=finite, d=st.floats(0, 100), beta=st.floats(0, 100))
def test_margin_bounds(v, d, beta):
    phi = proactive_margin(v, d, beta)
    assert CFG.phi_base <= phi <= CFG.phi_max
    if v <= 0 or beta == 0:
        assert phi == CFG.phi_base


@given(v=st.floats(0.001, 50), d=st.floats(0, 100), b1=st.floats(0, 50), db=st.floats(0, 50))
def test_margin_monotone_in_beta(v, d, b1, db):
    assert proactive_margin(v, d, b1 + db) >= proactive_margin(v, d, b1)


def test_margin_grid_sweeps():
    rng = np.random.default_rng(0)
    for _ in range(50):
        risk = RiskGrid(rng.uniform(0, 5, (14, 3)), rng.normal(0, 3, (14, 3)))
        beta = rng.uniform(0, 20)
        assert np.all(margin_grid(risk, 2 * beta) >= margin_grid(risk, beta))
    receding = RiskGrid(np.ones((14, 4)), -np.ones((14, 4)))
    assert np.all(margin_grid(receding, 5.0) == 0.2)
    assert np.all(margin_grid(RiskGrid(np.ones((3, 2)), np.ones((3, 2))), 0.0) == 0.2)


def test_margin_config_validation():
    with pytest.raises(ValueError):
        MarginConfig(phi_base=2.0, phi_max=1.0)
    with pytest.raises(ValueError):
        MarginConfig(phi_base=0.0)


# --- risk grid -------------------------------------------------------------

def _pred(poses, vel=(0.0, 0.0)):
    poses = np.asarray(poses, dtype=float)
    return ObstaclePrediction(poses, np.tile(vel, (len(poses), 1)), 4.0, 2.0)


def test_risk_grid_far_static_obstacle():
    acts = np.tile([1.0, 0.0], (15, 1))
    states = rollout((0, 0, 0), acts, 0.12)
    risk = build_risk_grid(states, acts, [_pred(np.tile([30.0, 0.0, 0.0], (14, 1)))])
    assert risk.shape == (14, 1)
    assert np.all(risk.d_prox >= 19.0)
    np.testing.assert_allclose(risk.v_closing, 1.0, atol=1e-9)


def test_risk_grid_coincident_and_empty():
    acts = np.tile([1.0, 0.0], (15, 1))
    states = rollout((0, 0, 0), acts, 0.12)
    poses = np.tile([50.0, 0.0, 0.0], (14, 1))
    poses[3] = states[3]
    risk = build_risk_grid(states, acts, [_pred(poses)])
    assert risk.d_prox[3, 0] == 0.0
    assert build_risk_grid(states, acts, []).shape == (14, 0)
    with pytest.raises(ValueError):
        build_risk_grid(states, acts, [_pred(poses[:5])])


# --- losses ----------------------------------------------------------------

def test_L1_examples():
    assert loss_L1(_hist([(0, 0)] * 3), 0.2) == 0.0
    assert loss_L1(_hist([(4, 2)]), 0.2) == pytest.approx(2.4)
    h = _hist([(4, 2), (1, 3), (0.5, 0.1)])
    slope = (4 - 2) + (1 - 3) + (0.5 - 0.1)
    assert loss_L1(h, 0.7) - loss_L1(h, 0.3) == pytest.approx(0.4 * slope)


def test_L1_warm_up_and_ring_buffer():
    h = ExecutedHistory(2)
    assert loss_L1(h, 0.5) == 0.0
    for es in (9.0, 4.0, 1.0):
        h.append([math.sqrt(es), 0, 0], [0, 0], [0, 0, 0], [0, 0])
    assert len(h) == 2
    assert loss_L1(h, 1.0) == pytest.approx(5.0)


def test_L2_examples():
    assert loss_L2(RiskGrid([[5.0]], [[-1.0]]), 5.0) == 0.0
    # phi = 0.5 exactly: choose the closing speed that produces it
    d = 0.25
    r = math.atanh((0.5 - 0.2) / 1.8) / 5.0
    assert loss_L2(RiskGrid([[d]], [[r * d]]), 5.0) == pytest.approx(-1.0)


def test_L2_sign_and_scaling_sweep():
    rng = np.random.default_rng(1)
    for _ in range(30):
        d = rng.uniform(0.01, 2.0, (14, 3))
        v = rng.normal(0, 2, (14, 3))
        risk = RiskGrid(d, v)
        assert loss_L2(risk, 5.0) <= 0.0
        # margins held fixed while distances grow
        phi = margin_grid(risk, 5.0)
        prev = None
        for k in np.linspace(1, 10, 10):
            dk = k * d
            l2 = -np.sum(np.maximum((phi - dk) / np.maximum(dk, 1e-3), 0.0))
            assert prev is None or l2 >= prev
            prev = l2


def test_L3_examples():
    receding = RiskGrid(np.ones((14, 4)), -np.ones((14, 4)))
    assert loss_L3(receding, 5.0) == pytest.approx(11.2)
    approaching = RiskGrid(np.ones((14, 4)), np.ones((14, 4)))
    assert loss_L3(approaching, 0.0) == pytest.approx(11.2)
    assert loss_L3(approaching, 1.0) <= loss_L3(approaching, 2.0)


def test_total_loss_example():
    d = 0.25
    r = math.atanh((0.5 - 0.2) / 1.8) / 5.0
    risk = RiskGrid([[d]], [[r * d]])
    hist = _hist([(4, 2)])
    l1, l2, l3 = loss_L1(hist, 0.2), loss_L2(risk, 5.0), loss_L3(risk, 5.0)
    assert total_loss(hist, risk, TunableParams(0.2, 5.0), W) == pytest.approx(0.1 * l1 + 0.1 * l2 + 1e-3 * l3)
    assert 0.1 * 2.4 + 0.1 * -1.0 + 1e-3 * 11.2 == pytest.approx(0.1512)
    assert total_loss(_hist([(0, 0)]), RiskGrid(np.zeros((0, 0)), np.zeros((0, 0))), TunableParams(), W) == 0.0
    pure = LossWeights(eta2=0.0, eta3=0.0)
    assert total_loss(hist, risk, TunableParams(0.2, 5.0), pure) == pytest.approx(0.1 * l1)


def test_total_loss_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        hist, risk, p = random_instance(rng)
        entries = list(hist._buf)
        ref = loss_oracle(entries, risk.d_prox, risk.v_closing, p.alpha, p.beta)
        assert total_loss(hist, risk, p, W) == pytest.approx(ref, rel=1e-12, abs=1e-12)


# --- gradients -------------------------------------------------------------

def test_gradient_trivial_cases():
    receding = RiskGrid(np.ones((14, 2)), -np.ones((14, 2)))
    assert gradients(_hist([(1, 2)]), receding, TunableParams(), W)[1] == 0.0
    assert gradients(_hist([(3, 3), (1, 1)]), receding, TunableParams(), W)[0] == 0.0


def test_gradients_match_independent_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        hist, risk, p = random_instance(rng)
        entries = list(hist._buf)
        ga, gb = gradients(hist, risk, p, W)
        na = central_difference(lambda a: loss_oracle(entries, risk.d_prox, risk.v_closing, a, p.beta), p.alpha)
        nb = central_difference(lambda b: loss_oracle(entries, risk.d_prox, risk.v_closing, p.alpha, b), p.beta)
        for g, n in ((ga, na), (gb, nb)):
            worst = max(worst, abs(g - n) / max(abs(g), abs(n), 1e-12))
    assert worst < 1e-5


def test_gradient_check_harness():
    err, rows = gradient_check(50, seed=3)
    assert len(rows) == 50 and err < 1e-5
    with pytest.raises(ValueError):
        gradient_check(0)


def test_gradients_scale_with_weights():
    rng = np.random.default_rng(9)
    hist, risk, p = random_instance(rng)
    g1 = np.array(gradients(hist, risk, p, W))
    big = LossWeights(eta1=0.7, eta2=0.7, eta3=7e-3)
    g2 = np.array(gradients(hist, risk, p, big))
    np.testing.assert_allclose(g2, 7 * g1, rtol=1e-12)
    assert total_loss(hist, risk, p, big) == pytest.approx(7 * total_loss(hist, risk, p, W))


def test_predicted_violation_raises_beta():
    risk = RiskGrid(np.full((14, 1), 0.4), np.full((14, 1), 0.05))
    p = TunableParams(0.2, 5.0)
    assert np.any(margin_grid(risk, 5.0) > 0.4)
    new = update_params(p, gradients(_hist([(0, 0)]), risk, p, W), W.epsilon, W)
    assert new.beta > p.beta


# --- updates ---------------------------------------------------------------

def test_update_examples():
    p = TunableParams(0.2, 5.0)
    assert update_params(p, (0.0, 0.0), 1e-3) == p
    assert update_params(p, (10.0, 0.0), 1e-3).alpha == pytest.approx(0.19)
    assert update_params(p, (1e6, 0.0), 1e-3).alpha == 0.01
    assert update_params(p, (-1e6, 1e9), 1e-3) == TunableParams(0.99, 0.0)
    assert update_params(p, (0.0, -1e9), 1e-3).beta == 100.0


def test_update_skips_non_finite():
    stats = UpdateStats()
    p = TunableParams(0.3, 2.0)
    assert update_params(p, (float("nan"), 0.0), 1e-3, stats=stats) == p
    assert update_params(p, (0.0, float("inf")), 1e-3, stats=stats) == p
    assert stats.skipped == 2


def test_slow_tuner_record_and_update():
    tuner = SlowTuner(TunableParams(0.2, 5.0))
    for _ in range(7):
        tuner.record([1, 0, 0], [0, 0], [0, 0, 0], [0, 0])
    assert len(tuner.history) == W.T
    rec = tuner.update(5, RiskGrid(np.ones((14, 1)), -np.ones((14, 1))))
    # es = 1, ew = 0 over 5 entries -> dL/dalpha = 0.1 * 5
    assert rec.alpha == pytest.approx(0.2 - 1e-3 * 0.5)
    assert rec.beta == 5.0
    assert rec.L1 == pytest.approx(0.2 * 5)
    assert tuner.n_updates == 1 and tuner.params.alpha == rec.alpha


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(T=0)
    with pytest.raises(ValueError):
        LossWeights(epsilon=0.0)
    with pytest.raises(ValueError):
        LossWeights(eta1=-1.0)
