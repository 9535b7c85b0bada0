import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from stealthy_estimation.attack import reference_costs
from stealthy_estimation.chain import (
    ChannelParams,
    ReferencePolicy,
    Verdict,
    check_boundedness,
    j_upper,
    joint_kernel,
    joint_stationary,
    min_secrecy_threshold,
    sensor_belief_kernel,
    stationary_sensor_belief,
    stationary_vector,
)
from stealthy_estimation.errors import DegeneratePolicy, NoFiniteThreshold, NotUnstable, Unbounded
from stealthy_estimation.simulator import SimConfig, empirical_costs, histogram_with_errors, simulate
from stealthy_estimation.sysmodel import SystemModel, solve_steady_covariance

P = 0.6 * 0.95


def test_all_transmit_is_geometric(chan):
    d = stationary_sensor_belief(ReferencePolicy((1.0,) * 4), chan, trunc=30)
    i = np.arange(31)
    assert np.allclose(d.probs, P * (1 - P) ** i, atol=1e-15)
    assert d.total() == pytest.approx(1.0, abs=1e-12)


def test_half_policy_with_perfect_links():
    # horizon long enough that the all-transmit tail carries 2^-60 of the mass
    d = stationary_sensor_belief(ReferencePolicy((0.5,) * 60), ChannelParams(1.0, 1.0, 0.5), trunc=70)
    assert np.allclose(d.probs[:20], 0.5 ** (np.arange(20) + 1), rtol=1e-12)
    short = stationary_sensor_belief(ReferencePolicy((0.5,) * 6), ChannelParams(1.0, 1.0, 0.5), trunc=20)
    head = 1.0 / ((1 - 0.5 ** 6) / 0.5 + 0.5 ** 6)
    assert np.allclose(short.probs[:7], head * 0.5 ** np.arange(7), rtol=1e-12)


def test_threshold6_closed_form(chan, threshold6):
    d = stationary_sensor_belief(threshold6, chan)
    head = 1.0 / (7 + (1 - P) / P)
    assert np.allclose(d.probs[:7], head, rtol=1e-12)
    assert np.allclose(d.probs[7:20], head * (1 - P) ** np.arange(1, 14), rtol=1e-12)


@pytest.mark.parametrize("taus", [(0.0,) * 6, (0.3, 0.9, 0.1), (1.0,), (0.2, 0.0, 0.7, 0.5, 0.05)])
def test_closed_form_is_fixed_point_of_kernel(chan, taus):
    pol = ReferencePolicy(taus)
    trunc = 80
    d = stationary_sensor_belief(pol, chan, trunc=trunc)
    K = sensor_belief_kernel(pol, chan, trunc)
    lumped = d.probs.copy()
    lumped[-1] += d.tail_mass
    assert np.abs(K.T @ lumped - lumped).max() < 1e-12
    # an independent dense power iteration reaches the same vector
    x = np.full(trunc + 1, 1.0 / (trunc + 1))
    Kd = K.toarray()
    for _ in range(20000):
        x = x @ Kd
    assert np.abs(x - lumped).max() < 1e-9
    assert d.total() == pytest.approx(1.0, abs=1e-10)


def test_degenerate_policy_rejected(chan):
    with pytest.raises(DegeneratePolicy):
        stationary_sensor_belief(ReferencePolicy((0.0,), tail=0.0), chan)


def test_j_upper_paper_value(chan, steady, model, threshold6):
    d = stationary_sensor_belief(threshold6, chan, trunc=400)
    tr = steady.traces(model, 400)
    brute = float(d.probs @ tr)
    assert j_upper(threshold6, chan, steady, model) == pytest.approx(brute, rel=1e-9)
    assert j_upper(threshold6, chan, steady, model) == pytest.approx(4.12066, abs=5e-5)


def test_j_upper_perfect_channel_is_trace_pbar(steady, model):
    pol = ReferencePolicy((1.0,) * 3)
    assert j_upper(pol, ChannelParams(1, 1, 0.5), steady, model) == pytest.approx(np.trace(steady.PBar), rel=1e-12)


def test_j_upper_unbounded_when_tail_too_weak(steady, model):
    with pytest.raises(Unbounded):
        j_upper(ReferencePolicy((1.0,)), ChannelParams(0.5, 0.6, 0.6), steady, model)


def test_j_upper_matches_simulation(chan, steady, model, threshold6):
    trace = simulate(SimConfig(10**7, 42, threshold6, chan))
    est = empirical_costs(trace, steady, model)
    assert abs(est.J_u - j_upper(threshold6, chan, steady, model)) <= 3 * est.se_u
    assert est.J_l <= est.J_u + 3 * np.hypot(est.se_l, est.se_u)


def test_sensor_belief_matches_long_simulation(chan, threshold6):
    trace = simulate(SimConfig(10**7, 3, threshold6, chan))
    n = 30
    freq, se = histogram_with_errors(trace.eta_s[1001:], n)
    d = stationary_sensor_belief(threshold6, chan, trunc=n)
    expected = d.probs[:n].copy()
    expected[n - 1] = d.probs[n - 1:].sum() + d.tail_mass
    assert np.all(np.abs(freq - expected) <= 3 * se + 1e-6)


def test_boundedness_verdicts(chan, model):
    assert check_boundedness(ReferencePolicy((0.0,) * 3), chan, model) is Verdict.SUFFICIENT
    assert check_boundedness(ReferencePolicy((0.0,), tail=0.0), chan, model) is Verdict.NECESSARY_VIOLATED
    assert check_boundedness(ReferencePolicy((1.0,), tail=0.5), chan, model) is Verdict.INCONCLUSIVE
    stable = SystemModel([[0.5, 0.0], [0.0, 0.2]], [[1.0, 1.0]], 0.01 * np.eye(2), [[0.01]])
    assert check_boundedness(ReferencePolicy((0.0,), tail=0.0), chan, stable) is Verdict.SUFFICIENT


def test_min_secrecy_threshold(chan, model):
    assert min_secrecy_threshold(chan, model) == 2
    assert min_secrecy_threshold(chan, model, mode="ack_weighted") == 2
    # 1/1.69 < lam(1 - lam_e) already at t=0
    assert min_secrecy_threshold(ChannelParams(0.9, 1.0, 0.1), model) == 0
    with pytest.raises(NoFiniteThreshold):
        min_secrecy_threshold(ChannelParams(0.6, 0.95, 1.0), model, mode="ack_weighted")
    stable = SystemModel([[0.5, 0.0], [0.0, 0.2]], [[1.0, 1.0]], 0.01 * np.eye(2), [[0.01]])
    with pytest.raises(NotUnstable):
        min_secrecy_threshold(chan, stable)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_min_secrecy_threshold_is_smallest(lam, lam_e):
    from stealthy_estimation.sysmodel import paper_model

    m = paper_model()
    t = min_secrecy_threshold(ChannelParams(lam, 0.9, lam_e), m)
    rhs = lam * (1 - lam_e)
    assert 1.69 ** -(t + 1) < rhs
    assert t == 0 or 1.69 ** -t >= rhs


def test_joint_marginal_and_zero_pattern(chan, threshold6):
    d = joint_stationary(threshold6, chan, trunc=60)
    s = stationary_sensor_belief(threshold6, chan, trunc=60)
    assert np.abs(d.probs.sum(axis=0) - s.probs).max() < 1e-12
    assert np.all(np.tril(d.probs, -1) == 0)
    gap = np.subtract.outer(np.arange(61), np.arange(61)).T  # gap[i, j] = j - i
    # a lost ack can only happen at j >= 6, so the gap jumps straight to >= 7
    unreachable = (gap >= 1) & (gap <= 6)
    assert np.all(d.probs[unreachable] <= 1e-14)
    reachable = (gap >= 0) & ~unreachable
    reachable[:, 21:] = False  # deeper states underflow the tolerance
    assert np.all(d.probs[reachable] > 1e-12)


def test_joint_all_positive_for_positive_policy(chan):
    pol = ReferencePolicy((0.3, 0.6, 0.2, 0.9))
    d = joint_stationary(pol, chan, trunc=40)
    upper = np.triu(np.ones_like(d.probs, dtype=bool))
    assert np.all(d.probs[upper] > 0)
    assert d.total() == pytest.approx(1.0, abs=1e-10)


def test_joint_perfect_ack_is_diagonal():
    chan = ChannelParams(0.6, 1.0, 0.6)
    pol = ReferencePolicy.threshold(3, 5)
    d = joint_stationary(pol, chan, trunc=40)
    assert np.abs(d.probs - np.diag(np.diag(d.probs))).max() < 1e-15
    s = stationary_sensor_belief(pol, chan, trunc=40)
    assert np.abs(np.diag(d.probs) - s.probs).max() < 1e-12


def test_joint_is_fixed_point(chan, threshold6):
    cap = 30
    K = joint_kernel(threshold6, chan, cap)
    x = stationary_vector(K)
    assert np.abs(K.T @ x - x).max() < 1e-12
    assert abs(x.sum() - 1) < 1e-12


def test_joint_matches_simulation(chan, threshold6):
    trace = simulate(SimConfig(10**7, 5, threshold6, chan))
    n = 25
    d = joint_stationary(threshold6, chan, trunc=n)
    # marginal of the true holding time eta (the belief marginal is checked elsewhere)
    exp = d.probs.sum(axis=1)
    freq, se = histogram_with_errors(trace.eta[1001:], n + 2)
    assert np.all(np.abs(freq[: n] - exp[: n]) <= 3 * se[: n] + 1e-6)


def test_stationary_vector_periodic_chain():
    P = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(stationary_vector(P), [0.5, 0.5])


def test_marginally_stable_eavesdropper_cost_grows_with_threshold(chan):
    model = SystemModel([[1.0, 1.0], [0.0, 1.0]], [[1.0, 0.0]], 0.01 * np.eye(2), [[0.01]])
    steady = solve_steady_covariance(model)
    costs = []
    for t in range(1, 21):
        pol = ReferencePolicy.threshold(t, t)
        costs.append(reference_costs(pol, chan, steady, model, 60)[1])
    assert np.all(np.diff(costs) > 0)


def test_prop1_random_policies(chan, steady, model):
    """Simulated estimator cost never exceeds the belief-based bound (beyond noise)."""
    rng = np.random.default_rng(99)
    for k in range(20):
        pol = ReferencePolicy(tuple(rng.uniform(0, 1, int(rng.integers(1, 8)))))
        trace = simulate(SimConfig(2 * 10**5, 1000 + k, pol, chan))
        est = empirical_costs(trace, steady, model)
        bound = j_upper(pol, chan, steady, model)
        assert est.J_l <= bound + 3 * est.se_l


def test_prop1_equality_with_perfect_ack(steady, model, threshold6):
    chan = ChannelParams(0.6, 1.0, 0.6)
    trace = simulate(SimConfig(10**7, 8, threshold6, chan))
    est = empirical_costs(trace, steady, model)
    assert np.array_equal(trace.eta, trace.eta_s)
    assert abs(est.J_l - j_upper(threshold6, chan, steady, model)) <= 3 * est.se_l
