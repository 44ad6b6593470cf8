import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chf.errors import InvalidConfig
from chf.experiments import laplace_sources, rotation
from chf.learning import (
    IcaState, LearningConfig, amari_index, hebbian_update_M, hebbian_update_Q, hidden_correction,
    ica_update_P, inverse_term, noise_inverse_term, p_update_direction, present_repeatedly,
    run_learning_epoch, whiten_then_separate,
)
from chf.recon import ReconNet


def uniform(rng, n, d):
    return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (n, d))


# --- config -------------------------------------------------------------------

def test_config_enforces_rate_ordering():
    LearningConfig(eta_W=0.1, eta_P=0.1, eta_Q=0.01, eta_M=0.0)
    with pytest.raises(InvalidConfig):
        LearningConfig(eta_W=0.01, eta_P=0.1, eta_Q=0.0)
    with pytest.raises(InvalidConfig):
        LearningConfig(eta_W=float("nan"))
    with pytest.raises(InvalidConfig):
        LearningConfig(inv_mode="pseudo")


def test_default_ratio():
    cfg = LearningConfig.from_ratio(0.01)
    assert (cfg.eta_W, cfg.eta_P, cfg.eta_Q, cfg.eta_M) == pytest.approx((0.1, 0.03, 0.01, 0.01))


def test_amari_index_bounds():
    assert amari_index(np.array([[0.0, 2.0], [-3.0, 0.0]])) == 0.0
    assert amari_index(np.ones((3, 3))) == pytest.approx(1.0)


# --- P rule -------------------------------------------------------------------

def test_zero_rate_leaves_P():
    net = ReconNet.create(np.eye(2), np.eye(2))
    before = net.P.copy()
    ica_update_P(net, None, np.ones(2), 0.0)
    assert np.array_equal(net.P, before)


def test_noise_inverse_term_estimates_readout():
    rng = np.random.default_rng(0)
    net = ReconNet.create(np.eye(3), rng.normal(size=(3, 3)))
    est = noise_inverse_term(net, rng, samples=200000)
    assert np.max(np.abs(est - (net.Q @ net.N).T)) < 0.05


def test_exact_inverse_modes_and_singular_fallback():
    P = np.array([[2.0, 1.0], [0.0, 1.0]])
    net = ReconNet.create(np.eye(2), np.eye(2), P=P)
    assert np.allclose(inverse_term(net, "transpose"), np.linalg.inv(P).T)
    assert np.allclose(inverse_term(net, "inverse"), np.linalg.inv(P))
    net.P = np.zeros((2, 2))
    with pytest.warns(RuntimeWarning):
        inverse_term(net, "transpose", rng=np.random.default_rng(0))


def test_two_source_ica_recovers_mixing():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((2, 2))
    X = uniform(rng, 50000, 2) @ A.T
    net = ReconNet.create(np.eye(2), np.eye(2))
    net.P = np.eye(2) / np.std(X)
    for k, x in enumerate(X):
        ica_update_P(net, None, x, 0.01 if k < 40000 else 0.002, mode="natural", kind="sub")
    assert amari_index(net.P @ A) < 0.1


def test_independent_input_is_an_equilibrium():
    rng = np.random.default_rng(3)
    net = ReconNet.create(np.eye(2), np.eye(2))
    for _ in range(600):
        ica_update_P(net, None, uniform(rng, 500, 2), 0.05, mode="natural", kind="sub")
    X = uniform(rng, 200000, 2)
    start = p_update_direction(ReconNet.create(np.eye(2), np.eye(2)), X, None, "natural", "sub")
    settled = p_update_direction(net, X, None, "natural", "sub")
    assert np.linalg.norm(settled) < 0.1 * np.linalg.norm(start)
    # separation of already independent sources leaves P diagonal
    assert amari_index(net.P) < 0.01


# --- whitening ----------------------------------------------------------------

def exactly_white(rng, n, d):
    Z = rng.standard_normal((n, d))
    Z -= Z.mean(axis=0)
    L = np.linalg.cholesky(Z.T @ Z / n)
    return Z @ np.linalg.inv(L).T


def test_white_input_keeps_whitening_orthogonal():
    rng = np.random.default_rng(0)
    st_ = IcaState.create(2)
    for _ in range(20):
        st_ = whiten_then_separate(st_, exactly_white(rng, 1000, 2))
    V = st_.whitening
    assert np.max(np.abs(V @ V.T - np.eye(2))) < 1e-3
    assert st_.count == 20000


def test_gaussian_batches_drift_within_sampling_noise():
    rng = np.random.default_rng(0)
    n = 100000
    st_ = IcaState.create(2)
    for _ in range(20):
        st_ = whiten_then_separate(st_, rng.standard_normal((n, 2)))
    V = st_.whitening
    assert np.max(np.abs(V @ V.T - np.eye(2))) < 3 * np.sqrt(2.0 / n)


def test_repeated_vector_warns():
    with pytest.warns(RuntimeWarning):
        whiten_then_separate(IcaState.create(2), np.tile([1.0, 2.0], (10, 1)))


def test_correlated_pairs_are_decorrelated():
    rng = np.random.default_rng(0)
    L = np.linalg.cholesky(np.array([[1.0, 0.9], [0.9, 1.0]]))
    st_ = IcaState.create(2)
    for _ in range(10):
        st_ = whiten_then_separate(st_, rng.standard_normal((1000, 2)) @ L.T, eta_white=0.3)
    Z = (rng.standard_normal((100000, 2)) @ L.T) @ st_.whitening.T
    assert abs(np.cov(Z.T)[0, 1]) < 0.05


# --- Q rule -------------------------------------------------------------------

def test_q_fixed_points():
    net = ReconNet.create(np.eye(2), np.eye(2))
    hebbian_update_Q(net, np.zeros(2), np.ones(2), 0.5)
    hebbian_update_Q(net, np.ones(2), np.ones(2), 0.0)
    assert np.array_equal(net.Q, np.eye(2))


def test_scalar_delta_rule_closed_form():
    net = ReconNet.create([[1.0]], [[0.0]])
    eta = 0.1
    for k in range(1, 101):
        hebbian_update_Q(net, [1.0 - net.Q[0, 0]], [1.0], eta)
        assert net.Q[0, 0] == pytest.approx(1 - (1 - eta) ** k, abs=1e-12)
    assert 1.0 - net.Q[0, 0] < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-3, 3), min_size=2, max_size=2).filter(lambda v: np.linalg.norm(v) > 1e-2),
       st.integers(0, 2 ** 31))
def test_delta_rule_descends(x, h, seed):
    rng = np.random.default_rng(seed)
    x, h = np.array(x), np.array(h)
    Q0 = rng.normal(size=(3, 2))
    e0 = x - Q0 @ h
    if np.linalg.norm(e0) < 1e-6:
        return
    eta = 1.0 / (h @ h)
    for rate in (eta, eta / 2):
        net = ReconNet.create(np.zeros((2, 3)), Q0.copy())
        hebbian_update_Q(net, e0, h, rate)
        assert np.sum((x - net.Q @ h) ** 2) < np.sum(e0 ** 2)


def test_nonnegative_clamp():
    net = ReconNet.create(np.eye(2), np.eye(2), nonneg_Q=True)
    hebbian_update_Q(net, [-5.0, 0.0], [1.0, 0.0], 1.0)
    assert net.Q.min() == 0.0


# --- M rule -------------------------------------------------------------------

def test_m_fixed_points():
    net = ReconNet.create(np.eye(2), np.eye(2))
    hebbian_update_M(net, np.ones(2), np.zeros(2), 0.5)
    hebbian_update_M(net, np.ones(2), np.ones(2), 0.0)
    assert np.array_equal(net.M, np.zeros((2, 2)))


def test_m_learns_one_step_predictor_of_sine():
    dt, n = 0.1, 10001
    h = np.sin(np.arange(n) * dt)
    diff = (h[1:] - h[:-1]) / dt
    target = (diff @ h[:-1]) / (h[:-1] @ h[:-1])
    net = ReconNet.create([[1.0]], [[1.0]])
    for k in range(n - 1):
        corr = hidden_correction(net, h[k:k + 1], h[k + 1:k + 2], dt)
        hebbian_update_M(net, h[k:k + 1], corr, 1e-3)
    assert abs(net.M[0, 0] / target - 1) < 0.1


# --- epochs -------------------------------------------------------------------

def planted_net(rng):
    return ReconNet.create(np.eye(2) + 0.1 * rng.standard_normal((2, 2)), 0.5 * np.eye(2), theta=0.3)


def test_zero_rates_leave_net_bitwise():
    rng = np.random.default_rng(0)
    net = planted_net(rng)
    before = net.clone()
    cfg = LearningConfig(0.0, 0.0, 0.0, 0.0)
    run_learning_epoch(net, rng.standard_normal((500, 2)), cfg, rng)
    for name in ("W", "Q", "N", "M", "P"):
        assert np.array_equal(getattr(net, name), getattr(before, name))


def test_epoch_change_norms_follow_schedule(tmp_path):
    rng = np.random.default_rng(1)
    net = planted_net(rng)
    D = rotation(0.5)
    _, trace = run_learning_epoch(net, laplace_sources(rng, 4000, 2) @ D.T, LearningConfig(), rng, mixing=D)
    tot = trace.totals()
    assert tot["dW"] > tot["dP"] > tot["dQ"]
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "dW", "dP", "dQ", "dM", "qnw_dist", "amari"]
    assert len(rows) == 1 + 4000 // LearningConfig().batch_size


def test_repeated_presentation_speeds_relaxation():
    rng = np.random.default_rng(2)
    D = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    net = ReconNet.create(D.T, D, theta=0.5, alpha=0.1)
    coeffs = np.array([1.5, -1.2, 1.8, 0.3, -0.2, 0.4])
    Q0 = net.Q.copy()
    recs = present_repeatedly(net, D @ coeffs, 3, rng=rng, cap=5000)
    steps = [r.steps_to_tolerance for r in recs]
    assert None not in steps
    assert steps[1] <= steps[0] and steps[2] <= steps[1]
    assert np.array_equal(net.Q, Q0)
