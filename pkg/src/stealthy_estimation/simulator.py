"""Monte Carlo of the hijackable sensor link and the window-statistics detector.

Step ``k`` draws ``nu_k`` from the policy evaluated at the holding times of
step ``k-1`` and then the three channel indicators.  ``o_k = nu_k gamma_k``
is what a detector at the legitimate estimator sees.  Window strings are
indexed with the earliest observation as the most significant bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np
import scipy.sparse as sp

from . import rng
from .attack import MaliciousPolicy, reference_sensor_marginal
from .chain import ChannelParams, ReferencePolicy
from .errors import TailMassTooLarge, UnstableWindow, WindowTooLong
from .sysmodel import SteadyCovariance, SystemModel, riccati_map

ETA_CAP = 10_000
BURN_IN = 1_000
CHUNK = 1 << 20
N_BATCHES = 50
MAX_WINDOW = 12


@dataclass(frozen=True)
class SimConfig:
    horizon: int
    seed: int
    policy: ReferencePolicy | MaliciousPolicy
    chan: ChannelParams
    signal_level: bool = False
    eta_cap: int = ETA_CAP

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0 <= int(self.seed) <= rng.MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.eta_cap < 1:
            raise ValueError("eta_cap must be >= 1")


@dataclass(eq=False)
class SimTrace:
    """Per-step records; index 0 is the initial condition (all holding times 0).

    Signal-level runs store the estimation errors ``x - xhat`` of the
    estimator, the sensor filter and the eavesdropper rather than the states
    themselves, which grow without bound for an unstable open-loop plant.
    """

    nu: np.ndarray
    gamma: np.ndarray
    gamma_a: np.ndarray
    gamma_e: np.ndarray
    eta: np.ndarray
    eta_s: np.ndarray
    eta_e: np.ndarray
    saturated: int = 0
    err: np.ndarray | None = None
    err_s: np.ndarray | None = None
    err_e: np.ndarray | None = None
    config: SimConfig | None = field(default=None, repr=False)

    def __len__(self):
        return self.eta.shape[0]

    @property
    def observations(self) -> np.ndarray:
        """``o_k = nu_k gamma_k`` for k >= 1."""
        return (self.nu[1:] & self.gamma[1:]).astype(np.uint8)

    def trace_P(self, steady: SteadyCovariance, model: SystemModel) -> np.ndarray:
        return steady.traces(model, int(self.eta.max()))[self.eta]

    def trace_P_e(self, steady: SteadyCovariance, model: SystemModel) -> np.ndarray:
        return steady.traces(model, int(self.eta_e.max()))[self.eta_e]

    def to_csv(self, path) -> None:
        cols = ("nu", "gamma", "gamma_a", "gamma_e", "eta", "eta_s", "eta_e")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step",) + cols)
            arrays = [getattr(self, c) for c in cols]
            for k in range(len(self)):
                w.writerow([k] + [int(a[k]) for a in arrays])

    def summary(self) -> dict:
        return {
            "steps": len(self) - 1,
            "saturated": self.saturated,
            "transmission_rate": float(self.nu[1:].mean()),
            "reception_rate": float(self.observations.mean()),
            "eta_max": int(self.eta.max()),
            "eta_s_max": int(self.eta_s.max()),
            "eta_e_max": int(self.eta_e.max()),
        }


def _policy_grid(policy) -> np.ndarray:
    """Lookup table ``grid[min(eta_s, I-1), min(eta_e, J-1)]``."""
    if isinstance(policy, MaliciousPolicy):
        return np.ascontiguousarray(policy.full())
    if isinstance(policy, ReferencePolicy):
        return np.ascontiguousarray(policy.vector(policy.n_r + 1)[:, None])
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


@numba.njit(cache=True)
def _run_chunk(grid, lam, lam_a, lam_e, cap, u_nu, u_g, u_a, u_e, state,
               nu, g, ga, ge, eta, eta_s, eta_e):
    I, J = grid.shape
    e, es, ee = state[0], state[1], state[2]
    sat = 0
    for k in range(u_nu.shape[0]):
        tau = grid[min(es, I - 1), min(ee, J - 1)]
        n = 1 if u_nu[k] < tau else 0
        gm = 1 if u_g[k] < lam else 0
        ack = 1 if (gm == 1 and u_a[k] < lam_a) else 0
        gme = 1 if u_e[k] < lam_e else 0
        if n == 1 and gm == 1:
            e = 0
        elif e < cap:
            e += 1
        else:
            sat += 1
        if n == 1 and ack == 1:
            es = 0
        elif es < cap:
            es += 1
        else:
            sat += 1
        if n == 1 and gme == 1:
            ee = 0
        elif ee < cap:
            ee += 1
        else:
            sat += 1
        nu[k] = n
        g[k] = gm
        ga[k] = ack
        ge[k] = gme
        eta[k] = e
        eta_s[k] = es
        eta_e[k] = ee
    state[0], state[1], state[2] = e, es, ee
    return sat


@numba.njit(cache=True)
def _signal_chunk(A, C, K, Lw, Lv, zw, zv, nu, g, ge, sig):
    # estimation errors x - xhat for the sensor filter, the estimator and the
    # eavesdropper; sig carries the three previous errors across chunks
    n = A.shape[0]
    T = nu.shape[0]
    IKC = np.eye(n) - K @ C
    es = np.empty((T, n))
    el = np.empty((T, n))
    ee = np.empty((T, n))
    ps, pl, pe = sig[0].copy(), sig[1].copy(), sig[2].copy()
    for k in range(T):
        w = Lw @ zw[k]
        v = Lv @ zv[k]
        sk = IKC @ (A @ ps + w) - K @ v
        lk = sk if (nu[k] == 1 and g[k] == 1) else A @ pl + w
        ek = sk if (nu[k] == 1 and ge[k] == 1) else A @ pe + w
        es[k], el[k], ee[k] = sk, lk, ek
        ps, pl, pe = sk, lk, ek
    sig[0], sig[1], sig[2] = ps, pl, pe
    return es, el, ee


def _chol(M):
    w, V = np.linalg.eigh(M)
    return V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def simulate(config: SimConfig, model: SystemModel | None = None,
             steady: SteadyCovariance | None = None) -> SimTrace:
    """Run the covariance-level (and optionally signal-level) simulation."""
    T = int(config.horizon)
    grid = _policy_grid(config.policy)
    chan = config.chan
    arrays = {name: np.zeros(T + 1, dtype=np.uint8) for name in ("nu", "gamma", "gamma_a", "gamma_e")}
    etas = {name: np.zeros(T + 1, dtype=np.int32) for name in ("eta", "eta_s", "eta_e")}
    state = np.zeros(3, dtype=np.int64)
    sat = 0

    signal = None
    if config.signal_level:
        if model is None or steady is None:
            raise ValueError("signal-level simulation needs the model and its steady covariance")
        A, C = np.asarray(model.A), np.asarray(model.C)
        M = riccati_map(steady.PBar, model)
        K = M @ C.T @ np.linalg.inv(C @ M @ C.T + model.R)
        Lw, Lv = _chol(np.asarray(model.Q)), _chol(np.asarray(model.R))
        signal = {k: np.zeros((T + 1, model.n_s)) for k in ("err_s", "err", "err_e")}
        sig_state = np.zeros((3, model.n_s))
        gw = rng.stream(config.seed, rng.PROCESS_NOISE)
        gv = rng.stream(config.seed, rng.MEASUREMENT_NOISE)

    for start in range(0, T, CHUNK):
        count = min(CHUNK, T - start)
        u = [rng.uniforms(config.seed, s, start, count) for s in (rng.NU, rng.GAMMA, rng.GAMMA_A, rng.GAMMA_E)]
        sl = slice(start + 1, start + 1 + count)
        sat += _run_chunk(grid, chan.lam, chan.lam_a, chan.lam_e, config.eta_cap, *u, state,
                          arrays["nu"][sl], arrays["gamma"][sl], arrays["gamma_a"][sl], arrays["gamma_e"][sl],
                          etas["eta"][sl], etas["eta_s"][sl], etas["eta_e"][sl])
        if signal is not None:
            zw = gw.standard_normal((count, model.n_s))
            zv = gv.standard_normal((count, model.n_y))
            with np.errstate(over="ignore", invalid="ignore"):
                out = _signal_chunk(A, C, K, Lw, Lv, zw, zv, arrays["nu"][sl], arrays["gamma"][sl],
                                    arrays["gamma_e"][sl], sig_state)
            for key, val in zip(("err_s", "err", "err_e"), out):
                signal[key][sl] = val

    trace = SimTrace(nu=arrays["nu"], gamma=arrays["gamma"], gamma_a=arrays["gamma_a"], gamma_e=arrays["gamma_e"],
                     eta=etas["eta"], eta_s=etas["eta_s"], eta_e=etas["eta_e"], saturated=int(sat), config=config)
    if signal is not None:
        trace.err, trace.err_s, trace.err_e = signal["err"], signal["err_s"], signal["err_e"]
    return trace


# ---------------------------------------------------------------------------
# estimates


def batch_means(values: np.ndarray, n_batches: int = N_BATCHES) -> tuple[float, float]:
    """Mean and batch-means standard error of a correlated series."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    size = values.size // n_batches
    if size < 1:
        return mean, math.nan
    b = values[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return mean, float(b.std(ddof=1) / math.sqrt(n_batches))


@dataclass(frozen=True)
class CostEstimate:
    J_l: float
    J_e: float
    J_u: float
    se_l: float
    se_e: float
    se_u: float

    def __iter__(self):  # (J_l, J_e, J_u) unpacking
        return iter((self.J_l, self.J_e, self.J_u))


def empirical_costs(trace: SimTrace, steady: SteadyCovariance, model: SystemModel,
                    burn_in: int = BURN_IN) -> CostEstimate:
    """Time averages of tr f^eta(PBar) for the estimator, the eavesdropper and the sensor's belief."""
    if len(trace) - 1 <= burn_in:
        raise ValueError(f"trace of {len(trace) - 1} steps is not longer than burn_in={burn_in}")
    top = int(max(trace.eta.max(), trace.eta_s.max(), trace.eta_e.max()))
    tr = steady.traces(model, top)
    sl = slice(burn_in + 1, None)
    l, se_l = batch_means(tr[trace.eta[sl]])
    e, se_e = batch_means(tr[trace.eta_e[sl]])
    u, se_u = batch_means(tr[trace.eta_s[sl]])
    return CostEstimate(l, e, u, se_l, se_e, se_u)


@dataclass(frozen=True)
class BucketReport:
    h: int
    samples: int
    empirical: np.ndarray
    analytic: np.ndarray

    @property
    def rel_error(self) -> float:
        return float(np.linalg.norm(self.empirical - self.analytic) / np.linalg.norm(self.analytic))


def signal_level_check(trace: SimTrace, model: SystemModel, steady: SteadyCovariance,
                       h_max: int = 5, burn_in: int = BURN_IN, eta_limit: int = 500) -> list[BucketReport]:
    """Empirical E[(x - xhat)(x - xhat)^T | eta = h] against f^h(PBar) for h <= h_max."""
    if trace.err is None:
        raise ValueError("trace has no signal-level records; simulate with signal_level=True")
    sl = slice(burn_in + 1, None)
    err = trace.err[sl]
    eta = trace.eta[sl]
    if eta.max() > eta_limit or not np.all(np.isfinite(err)):
        raise UnstableWindow(f"holding time reached {int(eta.max())} (> {eta_limit}); covariance buckets are meaningless")
    out = []
    X = np.array(steady.PBar)
    for h in range(h_max + 1):
        sel = err[eta == h]
        emp = sel.T @ sel / sel.shape[0] if sel.shape[0] else np.full_like(X, np.nan)
        out.append(BucketReport(h, int(sel.shape[0]), emp, X.copy()))
        X = riccati_map(X, model)
    return out


# ---------------------------------------------------------------------------
# window distributions and the detector


@dataclass(frozen=True, eq=False)
class WindowDistribution:
    n_r: int
    probs: np.ndarray
    samples: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (1 << self.n_r,):
            raise ValueError(f"expected {1 << self.n_r} probabilities, got {p.shape}")
        object.__setattr__(self, "probs", p)

    def prob(self, bits) -> float:
        idx = 0
        for b in bits:
            idx = 2 * idx + int(b)
        return float(self.probs[idx])

    def to_csv_rows(self):
        return [(format(i, f"0{self.n_r}b"), float(p)) for i, p in enumerate(self.probs)]


def _emission_kernels(policy, chan: ChannelParams, trunc: int):
    """Sub-stochastic transfer matrices (T0, T1) and the start vector on the hidden chain."""
    lam, la, le = chan.lam, chan.lam_a, chan.lam_e
    if isinstance(policy, ReferencePolicy):
        if trunc < policy.n_r:
            raise TailMassTooLarge(f"trunc={trunc} < n_r={policy.n_r}: the capped chain would not lump exactly")
        S = trunc + 1
        i = np.arange(S)
        nxt = np.minimum(i + 1, trunc)
        tau = policy.vector(S)
        T0 = sp.csr_matrix((1.0 - tau * lam, (i, nxt)), shape=(S, S))
        T1 = sp.csr_matrix((np.concatenate([tau * lam * la, tau * lam * (1 - la)]),
                            (np.concatenate([i, i]), np.concatenate([np.zeros(S, int), nxt]))), shape=(S, S))
        return T0, T1
    if isinstance(policy, MaliciousPolicy):
        n_t = policy.n_t
        n1 = n_t + 1
        tau = policy.full().ravel()
        ii, jj = np.divmod(np.arange(n1 * n1), n1)
        i1, j1 = np.minimum(ii + 1, n_t), np.minimum(jj + 1, n_t)
        src = np.arange(n1 * n1)
        # o = 0: silent, or sent and lost at the estimator
        r0 = np.concatenate([src, src, src])
        c0 = np.concatenate([n1 * i1 + j1, n1 * i1 + j1, n1 * i1])
        v0 = np.concatenate([1.0 - tau, tau * (1 - lam) * (1 - le), tau * (1 - lam) * le])
        # o = 1: delivered; ack and eavesdropper reception are independent
        r1 = np.concatenate([src] * 4)
        c1 = np.concatenate([n1 * i1 + j1, j1, n1 * i1, np.zeros_like(src)])
        v1 = np.concatenate([tau * lam * (1 - la) * (1 - le), tau * lam * la * (1 - le),
                             tau * lam * (1 - la) * le, tau * lam * la * le])
        S = n1 * n1
        T0 = sp.csr_matrix((v0, (r0, c0)), shape=(S, S))
        T1 = sp.csr_matrix((v1, (r1, c1)), shape=(S, S))
        return T0, T1
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def exact_window_distribution(policy, chan: ChannelParams, n_r: int | None = None,
                              trunc: int | None = None) -> WindowDistribution:
    """Stationary law of ``n_r`` consecutive observations, hidden states marginalised.

    The hidden chain is the sensor's holding time for a reference policy and
    the (sensor, eavesdropper) pair for a hijacked one; both are capped where
    the policy becomes constant, so the capped chain is an exact lumping.
    """
    from .chain import stationary_vector

    if n_r is None:
        n_r = policy.n_r if isinstance(policy, ReferencePolicy) else min(policy.n_t, MAX_WINDOW)
    if not 1 <= n_r <= MAX_WINDOW:
        raise WindowTooLong(f"window length {n_r} outside [1, {MAX_WINDOW}]")
    if trunc is None:
        trunc = max(policy.n_r, 1) if isinstance(policy, ReferencePolicy) else policy.n_t
    T0, T1 = _emission_kernels(policy, chan, trunc)
    pi = stationary_vector((T0 + T1).tocsr())
    T0t, T1t = T0.T.tocsr(), T1.T.tocsr()
    V = pi[None, :]
    for _ in range(n_r):
        # new index = 2 * old + bit
        V = np.stack([(T0t @ V.T).T, (T1t @ V.T).T], axis=1).reshape(-1, V.shape[1])
    probs = V.sum(axis=1)
    probs = np.clip(probs, 0.0, None)
    return WindowDistribution(n_r, probs / probs.sum())


def window_indices(obs: np.ndarray, n_r: int) -> np.ndarray:
    """Index of every overlapping window of ``obs`` (earliest bit most significant)."""
    obs = np.asarray(obs, dtype=np.int64)
    L = obs.size - n_r + 1
    if L < 1:
        raise ValueError(f"need at least {n_r} observations")
    idx = np.zeros(L, dtype=np.int64)
    for m in range(n_r):
        idx = (idx << 1) | obs[m: m + L]
    return idx


def empirical_window_distribution(trace: SimTrace, n_r: int, burn_in: int = BURN_IN) -> WindowDistribution:
    if not 1 <= n_r <= 20:
        raise WindowTooLong(f"window length {n_r} outside [1, 20]")
    idx = window_indices(trace.observations[burn_in:], n_r)
    counts = np.bincount(idx, minlength=1 << n_r).astype(float)
    return WindowDistribution(n_r, counts / counts.sum(), samples=int(idx.size))


class KLResult(NamedTuple):
    value: float
    support_mismatch: bool


def kl_divergence(p1, p0) -> KLResult:
    """Natural-log KL(p1 || p0); +inf with the mismatch flag when p1 charges a p0-null string."""
    a = np.asarray(p1.probs if isinstance(p1, WindowDistribution) else p1, dtype=float)
    b = np.asarray(p0.probs if isinstance(p0, WindowDistribution) else p0, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    pos = a > 0
    if np.any(b[pos] <= 0):
        return KLResult(math.inf, True)
    val = float(np.sum(a[pos] * np.log(a[pos] / b[pos])))
    return KLResult(max(val, 0.0), False)


class AuditResult(NamedTuple):
    eps_kl_hat: float
    l1_hat: float


def _sensor_counts(trace: SimTrace, n_t: int, burn_in: int) -> np.ndarray:
    """Empirical rho_s[i, a]: state eta_s at step k-1, action nu at step k."""
    i = np.minimum(trace.eta_s[burn_in:-1], n_t)
    a = trace.nu[burn_in + 1:].astype(np.int64)
    counts = np.bincount(2 * i + a, minlength=2 * (n_t + 1)).astype(float)
    return counts.reshape(n_t + 1, 2) / counts.sum()


def stealth_audit(reference: ReferencePolicy, malicious, chan: ChannelParams, n_r: int, T: int, seed: int,
                  method: str = "mixed", n_t: int | None = None, burn_in: int = BURN_IN) -> AuditResult:
    """Detector-side view of a hijack: window KL and the realised l1 marginal distance.

    ``method`` picks how the window laws are obtained: "exact" for both,
    "empirical" for both (common random numbers), or "mixed" (default):
    simulated hijacked law against the exact reference law, which keeps the
    reference support complete.  The l1 distance is always measured on the
    simulated hijacked run against the analytic reference marginal.
    """
    if method not in ("exact", "empirical", "mixed"):
        raise ValueError(f"unknown method {method!r}")
    if n_t is None:
        n_t = malicious.n_t if isinstance(malicious, MaliciousPolicy) else max(reference.n_r, 1)
    sim1 = simulate(SimConfig(T, seed, malicious, chan))
    if method == "exact":
        kl = kl_divergence(exact_window_distribution(malicious, chan, n_r),
                           exact_window_distribution(reference, chan, n_r)).value
    else:
        p1 = empirical_window_distribution(sim1, n_r, burn_in)
        if method == "mixed":
            p0 = exact_window_distribution(reference, chan, n_r)
        else:
            p0 = empirical_window_distribution(simulate(SimConfig(T, seed, reference, chan)), n_r, burn_in)
        kl = kl_divergence(p1, p0).value
    omega_s = reference_sensor_marginal(reference, chan, n_t)
    l1 = float(np.abs(_sensor_counts(sim1, n_t, burn_in) - omega_s).sum())
    return AuditResult(kl, l1)


def calibrate_eps_s(reference: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance, model: SystemModel,
                    n_t: int, eps_kl: float, n_r: int | None = None, hi: float = 1.0, iters: int = 20,
                    T: int = 10**6, seed: int = 0, method: str = "exact") -> tuple[float, float]:
    """Largest budget (by bisection) whose optimal hijack keeps the window KL at or below ``eps_kl``.

    Returns (eps_s, measured KL at that budget).
    """
    from .attack import synthesize_malicious_policy
    from .errors import InfeasibleStealth

    n_r = n_r or reference.n_r

    def kl_at(eps):
        try:
            pol = synthesize_malicious_policy(reference, chan, steady, model, n_t, eps).policy
        except InfeasibleStealth:
            return 0.0
        return stealth_audit(reference, pol, chan, n_r, T, seed, method=method, n_t=n_t).eps_kl_hat

    lo, kl_lo = 0.0, kl_at(0.0)
    if kl_lo > eps_kl:
        return 0.0, kl_lo
    kl_hi = kl_at(hi)
    if kl_hi <= eps_kl:
        return hi, kl_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        k = kl_at(mid)
        if k <= eps_kl:
            lo, kl_lo = mid, k
        else:
            hi = mid
    return lo, kl_lo


def write_summary(path, **payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def histogram_with_errors(values: np.ndarray, n_bins: int, n_batches: int = N_BATCHES) -> tuple[np.ndarray, np.ndarray]:
    """Empirical frequencies of ``min(values, n_bins-1)`` and their batch-means standard errors."""
    v = np.minimum(np.asarray(values, dtype=np.int64), n_bins - 1)
    size = v.size // n_batches
    if size < 1:
        raise ValueError(f"need at least {n_batches} samples")
    v = v[: size * n_batches].reshape(n_batches, size)
    freq = np.stack([np.bincount(row, minlength=n_bins) for row in v]) / size
    return freq.mean(axis=0), freq.std(axis=0, ddof=1) / math.sqrt(n_batches)
