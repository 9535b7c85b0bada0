import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stealthy_estimation import rng
from stealthy_estimation.attack import (
    MaliciousPolicy,
    flat_index,
    reference_occupation,
    synthesize_malicious_policy,
)
from stealthy_estimation.chain import ChannelParams, ReferencePolicy, j_upper
from stealthy_estimation.errors import TailMassTooLarge, UnstableWindow, WindowTooLong
from stealthy_estimation.simulator import (
    CHUNK,
    SimConfig,
    WindowDistribution,
    batch_means,
    calibrate_eps_s,
    empirical_costs,
    empirical_window_distribution,
    exact_window_distribution,
    histogram_with_errors,
    kl_divergence,
    signal_level_check,
    simulate,
    stealth_audit,
    window_indices,
)
from stealthy_estimation.sysmodel import SystemModel, riccati_map, solve_steady_covariance

PERFECT = ChannelParams(1.0, 1.0, 1.0)


def test_perfect_links_never_wait():
    tr = simulate(SimConfig(1000, 1, ReferencePolicy((1.0,)), PERFECT))
    assert np.all(tr.eta[1:] == 0) and np.all(tr.eta_s[1:] == 0) and np.all(tr.eta_e[1:] == 0)
    assert tr.eta[0] == 0 and len(tr) == 1001


def test_silent_policy_counts_up(chan):
    tr = simulate(SimConfig(500, 2, ReferencePolicy((0.0,), tail=0.0), chan))
    k = np.arange(501)
    assert np.array_equal(tr.eta, k) and np.array_equal(tr.eta_s, k) and np.array_equal(tr.eta_e, k)
    assert tr.nu.sum() == 0


def test_holding_time_cap_counts_saturation(chan):
    tr = simulate(SimConfig(50, 2, ReferencePolicy((0.0,), tail=0.0), chan, eta_cap=10))
    assert tr.eta.max() == 10
    assert tr.saturated == 3 * 40


def test_config_validation(chan, threshold6):
    with pytest.raises(ValueError):
        SimConfig(0, 1, threshold6, chan)
    with pytest.raises(ValueError):
        SimConfig(10, -1, threshold6, chan)
    with pytest.raises(TypeError):
        simulate(SimConfig(10, 1, "policy", chan))


def test_deterministic_and_prefix_stable(chan, threshold6):
    a = simulate(SimConfig(CHUNK + 5000, 9, threshold6, chan))
    b = simulate(SimConfig(CHUNK + 5000, 9, threshold6, chan))
    short = simulate(SimConfig(3000, 9, threshold6, chan))
    for name in ("nu", "gamma", "gamma_a", "gamma_e", "eta", "eta_s", "eta_e"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(getattr(a, name)[:3001], getattr(short, name))
    other = simulate(SimConfig(3000, 10, threshold6, chan))
    assert not np.array_equal(other.nu, short.nu)


def test_streams_are_restartable():
    whole = rng.uniforms(5, rng.GAMMA, 0, 100)
    assert np.array_equal(rng.uniforms(5, rng.GAMMA, 37, 20), whole[37:57])
    assert np.array_equal(rng.stream(5, rng.GAMMA).random(100), whole)
    assert not np.array_equal(rng.uniforms(5, rng.NU, 0, 100), whole)
    with pytest.raises(ValueError):
        rng.stream(-1, 0)


def test_recursions_hold_every_step(chan):
    pol = MaliciousPolicy(np.random.default_rng(0).uniform(0, 1, (6, 6)))
    for policy in (ReferencePolicy((0.0, 0.3, 0.0, 1.0)), pol):
        tr = simulate(SimConfig(200_000, 4, policy, chan))
        nu, g, ga, ge = (x[1:].astype(bool) for x in (tr.nu, tr.gamma, tr.gamma_a, tr.gamma_e))
        assert not np.any(ga & ~g)  # an ack needs a delivered packet
        for eta, reset in ((tr.eta, nu & g), (tr.eta_s, nu & ga), (tr.eta_e, nu & ge)):
            expect = np.where(reset, 0, eta[:-1] + 1)
            assert np.array_equal(eta[1:], expect)
        assert np.all(tr.eta <= tr.eta_s)


def test_reference_policy_lookup(chan):
    # tau depends on eta_s only, with the tail beyond the horizon
    tr = simulate(SimConfig(100_000, 6, ReferencePolicy((0.0, 0.0, 0.0), tail=1.0), chan))
    prev = tr.eta_s[:-1]
    assert np.all(tr.nu[1:][prev < 3] == 0)
    assert np.all(tr.nu[1:][prev >= 3] == 1)


def test_pbar_identity(chan, steady, model, threshold6):
    tr = simulate(SimConfig(2000, 3, threshold6, chan))
    P = tr.trace_P(steady, model)
    assert P[tr.eta == 0] == pytest.approx(np.trace(steady.PBar))
    assert np.all(P[tr.eta == 1] == np.trace(riccati_map(steady.PBar, model)))


def test_perfect_channel_cost_is_trace_pbar(steady, model):
    tr = simulate(SimConfig(10_000, 1, ReferencePolicy((1.0,)), ChannelParams(1.0, 1.0, 0.5)))
    est = empirical_costs(tr, steady, model)
    assert est.J_l == pytest.approx(np.trace(steady.PBar), rel=1e-13)
    J_l, J_e, J_u = est
    assert J_u == J_l


def test_costs_match_analytic_and_prop1(chan, steady, model, threshold6):
    tr = simulate(SimConfig(10**7, 11, threshold6, chan))
    est = empirical_costs(tr, steady, model)
    analytic = j_upper(threshold6, chan, steady, model)
    assert est.J_u == pytest.approx(analytic, rel=0.02)
    assert est.J_l <= est.J_u + 3 * est.se_u
    with pytest.raises(ValueError):
        empirical_costs(simulate(SimConfig(100, 1, threshold6, chan)), steady, model)


def test_sensor_and_joint_occupation_match_simulation(chan, threshold6):
    n_t = 20
    tr = simulate(SimConfig(10**7, 13, threshold6, chan))
    omega = reference_occupation(threshold6, chan, n_t)
    i = np.minimum(tr.eta_s[1000:-1], n_t)
    j = np.minimum(tr.eta_e[1000:-1], n_t)
    a = tr.nu[1001:].astype(np.int64)
    freq, se = histogram_with_errors(flat_index(n_t, i, j, a), omega.flat.size)
    assert np.all(np.abs(freq - omega.flat) <= 3 * se + 1e-6)


def test_batch_means():
    x = np.arange(100.0)
    mean, se = batch_means(x, n_batches=10)
    assert mean == 49.5
    assert se == pytest.approx(np.arange(4.5, 100, 10).std(ddof=1) / math.sqrt(10))
    assert math.isnan(batch_means(np.ones(3), n_batches=10)[1])


def test_signal_level_buckets(steady, model):
    tr = simulate(SimConfig(2 * 10**6, 21, ReferencePolicy((1.0,)), ChannelParams(0.6, 0.95, 0.6),
                            signal_level=True), model, steady)
    rep = signal_level_check(tr, model, steady, h_max=3)
    assert rep[0].rel_error < 0.05
    assert rep[1].rel_error < 0.05
    assert np.allclose(rep[1].analytic, riccati_map(steady.PBar, model))


def test_signal_level_memoryless_plant():
    model = SystemModel([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    steady = solve_steady_covariance(model)
    tr = simulate(SimConfig(10**6, 5, ReferencePolicy((0.5,)), ChannelParams(0.6, 0.95, 0.6),
                            signal_level=True), model, steady)
    rep = signal_level_check(tr, model, steady, h_max=4)
    # one step without data forgets everything: f^h(PBar) = Q for h >= 1
    for r in rep[1:]:
        assert r.analytic[0, 0] == pytest.approx(1.0)
        assert r.rel_error < 0.05


def test_signal_level_guards(chan, steady, model, threshold6):
    with pytest.raises(ValueError):
        simulate(SimConfig(100, 1, threshold6, chan, signal_level=True))
    with pytest.raises(ValueError):
        signal_level_check(simulate(SimConfig(100, 1, threshold6, chan)), model, steady)
    tr = simulate(SimConfig(5000, 1, ReferencePolicy((0.0,) * 8, tail=0.05), chan, signal_level=True), model, steady)
    with pytest.raises(UnstableWindow):
        signal_level_check(tr, model, steady, eta_limit=20, burn_in=10)


def test_window_indices_msb_first():
    obs = np.array([1, 0, 1, 1, 0])
    assert window_indices(obs, 3).tolist() == [0b101, 0b011, 0b110]
    with pytest.raises(ValueError):
        window_indices(obs, 6)


def test_exact_window_trivial():
    d = exact_window_distribution(ReferencePolicy((1.0,)), PERFECT, n_r=4)
    assert d.prob([1, 1, 1, 1]) == pytest.approx(1.0)
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_exact_window_matches_simulation(chan):
    pol = ReferencePolicy.threshold(2, 2)
    d = exact_window_distribution(pol, chan, n_r=3)
    tr = simulate(SimConfig(10**7, 17, pol, chan))
    freq, se = histogram_with_errors(window_indices(tr.observations[1000:], 3), 8)
    assert np.all(np.abs(freq - d.probs) <= 3 * se + 1e-6)
    emp = empirical_window_distribution(tr, 3)
    assert emp.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_exact_window_malicious_matches_simulation(chan):
    pol = MaliciousPolicy(np.random.default_rng(3).uniform(0, 1, (5, 5)))
    d = exact_window_distribution(pol, chan, n_r=4)
    tr = simulate(SimConfig(5 * 10**6, 19, pol, chan))
    freq, se = histogram_with_errors(window_indices(tr.observations[1000:], 4), 16)
    assert np.all(np.abs(freq - d.probs) <= 3 * se + 1e-6)


def test_all_windows_positive(chan, threshold6):
    d = exact_window_distribution(threshold6, chan, n_r=10)
    assert d.probs.min() > 0
    assert abs(d.probs.sum() - 1) < 1e-9


def test_window_guards(chan, threshold6):
    with pytest.raises(WindowTooLong):
        exact_window_distribution(threshold6, chan, n_r=13)
    with pytest.raises(WindowTooLong):
        exact_window_distribution(threshold6, chan, n_r=0)
    with pytest.raises(TailMassTooLarge):
        exact_window_distribution(threshold6, chan, n_r=4, trunc=3)
    with pytest.raises(ValueError):
        WindowDistribution(3, np.ones(4) / 4)


def test_kl_values():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p).value == 0.0
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]).value == pytest.approx(
        0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-15)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]).value == pytest.approx(0.1438, abs=1e-4)
    res = kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert res.value == math.inf and res.support_mismatch
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]).value == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        kl_divergence([1.0], [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.integers(0, 2**31))
def test_kl_nonnegative(weights, seed):
    p = np.array(weights) / sum(weights)
    q = np.random.default_rng(seed).dirichlet(np.ones(p.size))
    assert kl_divergence(p, q).value >= 0.0
    assert kl_divergence(p, p).value == 0.0


def test_embedded_reference_is_invisible(chan, threshold6):
    # the cap forces transmission once eta_e reaches n_t, so the cap must be rarely hit
    embedded = MaliciousPolicy.from_reference(threshold6, 50)
    exact = stealth_audit(threshold6, embedded, chan, 10, 10**4, 1, method="exact")
    assert exact.eps_kl_hat <= 1e-5
    mixed = stealth_audit(threshold6, embedded, chan, 10, 10**7, 1)
    assert mixed.eps_kl_hat <= 1e-3
    assert mixed.l1_hat <= 5e-3


def test_audit_l1_within_budget(chan, steady, model, threshold6):
    eps = 0.05
    pol = synthesize_malicious_policy(threshold6, chan, steady, model, 20, eps).policy
    res = stealth_audit(threshold6, pol, chan, 6, 10**7, 2, n_t=20)
    # sampling error of an l1 distance over 42 cells at 1e7 correlated steps
    assert res.l1_hat <= eps + 5e-3
    assert res.eps_kl_hat > 0
    with pytest.raises(ValueError):
        stealth_audit(threshold6, pol, chan, 6, 100, 2, method="magic")


def test_calibration_respects_target(chan, steady, model, threshold6):
    eps, kl = calibrate_eps_s(threshold6, chan, steady, model, 20, eps_kl=0.05, n_r=6, iters=6)
    assert kl <= 0.05
    assert 0 < eps < 1
