"""Stationary analysis of the holding-time chains seen before any intrusion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegeneratePolicy,
    InvalidPolicy,
    NonConvergence,
    NoFiniteThreshold,
    NotUnstable,
    Unbounded,
)
from .sysmodel import SteadyCovariance, SystemModel, geometric_trace_series

DEFAULT_TRUNC = 64
POWER_TOL = 1e-12
POWER_MAX_ITER = 10**6


def _check_prob(x, name):
    x = float(x)
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise InvalidPolicy(f"{name} must be a probability in [0, 1], got {x}")
    return x


@dataclass(frozen=True)
class ChannelParams:
    """Reception probabilities of the data, ACK and eavesdropping links."""

    lam: float
    lam_a: float
    lam_e: float

    def __post_init__(self):
        for name in ("lam", "lam_a", "lam_e"):
            object.__setattr__(self, name, _check_prob(getattr(self, name), name))

    @property
    def p_ack(self) -> float:
        """Probability that a transmission is received *and* acknowledged."""
        return self.lam * self.lam_a

    def to_dict(self):
        return {"lambda": self.lam, "lambda_a": self.lam_a, "lambda_e": self.lam_e}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["lambda"], doc["lambda_a"], doc["lambda_e"])


PAPER_CHANNEL = ChannelParams(0.6, 0.95, 0.6)


@dataclass(frozen=True)
class ReferencePolicy:
    """Transmission probabilities indexed by the sensor's holding time.

    ``taus[i]`` applies for ``i < n_r``; every ``i >= n_r`` uses ``tail``
    (1.0 for the policy family searched by the defender).
    """

    taus: tuple
    tail: float = 1.0

    def __post_init__(self):
        taus = tuple(_check_prob(t, f"taus[{i}]") for i, t in enumerate(self.taus))
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "tail", _check_prob(self.tail, "tail"))

    @property
    def n_r(self) -> int:
        return len(self.taus)

    def tau(self, i: int) -> float:
        return self.taus[i] if i < len(self.taus) else self.tail

    def vector(self, n: int) -> np.ndarray:
        """Probabilities for holding times ``0..n-1``."""
        return np.array([self.tau(i) for i in range(n)])

    @classmethod
    def threshold(cls, t: int, n_r: int) -> "ReferencePolicy":
        """Silent while the holding time is below ``t``, transmit afterwards."""
        if not 0 <= t <= n_r:
            raise InvalidPolicy(f"threshold {t} outside [0, {n_r}]")
        return cls(tuple([0.0] * t + [1.0] * (n_r - t)))

    @property
    def threshold_value(self) -> int | None:
        """Number of leading zeros when the policy is of threshold type, else None."""
        t = 0
        while t < self.n_r and self.taus[t] == 0.0:
            t += 1
        if all(x == 1.0 for x in self.taus[t:]) and self.tail == 1.0:
            return t
        return None

    def to_dict(self):
        doc = {"taus": list(self.taus), "n_r": self.n_r}
        if self.tail != 1.0:
            doc["tail"] = self.tail
        return doc

    @classmethod
    def from_dict(cls, doc):
        taus = doc["taus"]
        if "n_r" in doc and doc["n_r"] != len(taus):
            raise InvalidPolicy(f"n_r={doc['n_r']} does not match {len(taus)} taus")
        return cls(tuple(taus), doc.get("tail", 1.0))


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    """Probabilities on a truncated support plus the mass left outside it.

    ``probs`` is a vector for single chains and a matrix for joint chains.
    """

    probs: np.ndarray
    tail_mass: float = 0.0
    meta: dict = field(default_factory=dict)

    def total(self) -> float:
        return float(self.probs.sum() + self.tail_mass)

    def to_csv_rows(self):
        if self.probs.ndim == 1:
            return [(i, float(p)) for i, p in enumerate(self.probs)]
        return [(i, j, float(self.probs[i, j])) for i, j in zip(*np.nonzero(self.probs >= 0))]


class Verdict(enum.Enum):
    SUFFICIENT = "Sufficient"
    NECESSARY_VIOLATED = "NecessaryViolated"
    INCONCLUSIVE = "Inconclusive"


# ---------------------------------------------------------------------------
# generic finite-chain stationary solve


def stationary_vector(P: sp.spmatrix, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                      polish_min: int = 0) -> np.ndarray:
    """Stationary row vector of a row-stochastic sparse matrix.

    A sparse direct solve seeds the estimate; power iteration on the lazy
    kernel ``(P + I)/2`` then runs until the max-entry change drops below
    ``tol`` (laziness keeps periodic chains convergent without moving the fixed point).
    """
    P = sp.csr_matrix(P)
    n = P.shape[0]
    M = (P.T - sp.identity(n, format="csr")).tolil()
    M[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[n - 1] = 1.0
    try:
        x = spla.spsolve(M.tocsc(), rhs)
    except Exception:  # singular seed: fall back to uniform start
        x = np.full(n, 1.0 / n)
    if not np.all(np.isfinite(x)):
        x = np.full(n, 1.0 / n)
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    PT = P.T.tocsr()
    it = 0
    while it < max_iter:
        nxt = 0.5 * (x + PT @ x)
        nxt /= nxt.sum()
        change = np.abs(nxt - x).max()
        x = nxt
        it += 1
        if change < tol and it >= polish_min:
            return x
    raise NonConvergence(f"power iteration did not settle below {tol} in {max_iter} steps")


# ---------------------------------------------------------------------------
# sensor belief chain


def _survival(policy: ReferencePolicy, chan: ChannelParams, n: int) -> np.ndarray:
    """q_i = prod_{m<i} (1 - tau_m lam lam_a) for i = 0..n."""
    p = chan.p_ack
    factors = 1.0 - policy.vector(n) * p
    q = np.empty(n + 1)
    q[0] = 1.0
    np.cumprod(factors, out=q[1:])
    return q


def stationary_sensor_belief(policy: ReferencePolicy, chan: ChannelParams,
                             trunc: int | None = None) -> StationaryDistribution:
    """Closed-form stationary law of the sensor's believed holding time.

    Beyond ``n_r`` the survival products are geometric with ratio
    ``1 - tail*lam*lam_a``, which yields the normalizer and ``tail_mass`` exactly.
    """
    if trunc is None:
        trunc = max(policy.n_r, DEFAULT_TRUNC)
    if trunc < policy.n_r:
        raise ValueError(f"trunc={trunc} must be >= n_r={policy.n_r}")
    p = chan.p_ack
    if p * policy.tail == 0.0:
        raise DegeneratePolicy("no return path to holding time 0 from the policy tail "
                               "(tail * lam * lam_a = 0)")
    q = _survival(policy, chan, trunc + 1)
    r = 1.0 - policy.tail * p
    # sum_{i >= n_r} q_i = q_{n_r} / (tail p); evaluate the finite part on 0..trunc
    head = q[: trunc + 1]
    beyond = q[trunc + 1] / (policy.tail * p)
    z = head.sum() + beyond
    probs = head / z
    return StationaryDistribution(probs=probs, tail_mass=float(beyond / z), meta={"ratio": r})


def sensor_belief_kernel(policy: ReferencePolicy, chan: ChannelParams, trunc: int) -> sp.csr_matrix:
    """Transition matrix on ``0..trunc`` with the last state absorbing the tail."""
    p = chan.p_ack
    t = policy.vector(trunc + 1)
    rows = np.repeat(np.arange(trunc + 1), 2)
    nxt = np.minimum(np.arange(trunc + 1) + 1, trunc)
    cols = np.column_stack([np.zeros(trunc + 1, dtype=int), nxt]).ravel()
    vals = np.column_stack([t * p, 1.0 - t * p]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(trunc + 1, trunc + 1))


def j_upper(policy: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance,
            model: SystemModel, tail_tol: float = 1e-9, trunc: int | None = None) -> float:
    """Stationary average of ``tr f^{eta_s}(PBar)``; an upper bound on the estimator's cost."""
    rho = model.spectral_radius
    p = chan.p_ack
    r = 1.0 - policy.tail * p
    if r * rho * rho >= 1.0:
        raise Unbounded(f"tail transmission probability {policy.tail} with lam*lam_a={p:.6g} "
                        f"does not beat 1 - 1/|lambda_max|^2 = {1 - 1 / rho**2:.6g}")
    dist = stationary_sensor_belief(policy, chan, trunc)
    n = dist.probs.shape[0] - 1
    tr = steady.traces(model, n)
    head = float(dist.probs @ tr)
    if dist.tail_mass == 0.0:
        return head
    # pi_{n+1+m} = pi_n r^{m+1}
    scale = dist.probs[n] * r
    return head + scale * geometric_trace_series(steady, model, n + 1, r, tol=tail_tol / max(scale, 1e-300))


def check_boundedness(policy: ReferencePolicy, chan: ChannelParams, model: SystemModel) -> Verdict:
    """Classify the policy tail against the sufficient and necessary conditions for a finite J_u."""
    rho = model.spectral_radius
    p = chan.p_ack
    rhs = (1.0 - 1.0 / rho**2) / p if p > 0 else math.inf
    if rho < 1.0:
        return Verdict.SUFFICIENT
    if policy.tail > rhs:
        return Verdict.SUFFICIENT
    if policy.tail * chan.lam == 0.0:
        return Verdict.NECESSARY_VIOLATED
    return Verdict.INCONCLUSIVE


def min_secrecy_threshold(chan: ChannelParams, model: SystemModel, mode: str = "loss_only",
                          max_t: int = 10**6) -> int:
    """Smallest silent horizon that starves an eavesdropper under a reliable ACK link.

    ``mode="loss_only"`` tests ``|lambda_max|^{-2(t+1)} < lam (1 - lam_e)``;
    ``mode="ack_weighted"`` tests the ACK-weighted form ``< lam lam_a (1 - lam_e)``.
    The two differ whenever ``lam_a < 1``; both are offered and neither is preferred.
    """
    rho = model.spectral_radius
    if rho <= 1.0:
        raise NotUnstable(f"|lambda_max(A)| = {rho:.6g} is not above 1")
    if mode == "loss_only":
        rhs = chan.lam * (1.0 - chan.lam_e)
    elif mode == "ack_weighted":
        rhs = chan.lam * chan.lam_a * (1.0 - chan.lam_e)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if rhs <= 0.0:
        raise NoFiniteThreshold(f"right-hand side {rhs} leaves no finite threshold")
    rho2 = rho * rho
    lhs = 1.0 / rho2
    for t in range(max_t + 1):
        if lhs < rhs:
            return t
        lhs /= rho2
    raise NoFiniteThreshold(f"no threshold below {max_t}")


# ---------------------------------------------------------------------------
# joint (true, believed) holding-time chain


def _joint_index(cap: int):
    """Map lower-triangular (i <= j <= cap) states to consecutive ids."""
    ii, jj = np.nonzero(np.triu(np.ones((cap + 1, cap + 1), dtype=bool)))
    ids = -np.ones((cap + 1, cap + 1), dtype=int)
    ids[ii, jj] = np.arange(ii.size)
    return ii, jj, ids


def joint_kernel(policy: ReferencePolicy, chan: ChannelParams, cap: int) -> sp.csr_matrix:
    """Kernel of (eta, eta_s) with both coordinates capped at ``cap`` (exact lumping for cap >= n_r)."""
    ii, jj, ids = _joint_index(cap)
    t = policy.vector(cap + 1)[jj]
    lam, lam_a = chan.lam, chan.lam_a
    j1 = np.minimum(jj + 1, cap)
    i1 = np.minimum(ii + 1, cap)
    src = np.arange(ii.size)
    rows = np.concatenate([src, src, src])
    cols = np.concatenate([np.full(ii.size, ids[0, 0]), ids[0, j1], ids[i1, j1]])
    vals = np.concatenate([t * lam * lam_a, t * lam * (1 - lam_a), 1 - t * lam])
    return sp.csr_matrix((vals, (rows, cols)), shape=(ii.size, ii.size))


def joint_stationary(policy: ReferencePolicy, chan: ChannelParams,
                     trunc: int | None = None) -> StationaryDistribution:
    """Stationary law of (eta, eta_s) on ``0 <= i <= j <= trunc``.

    The chain is solved with both coordinates capped at ``trunc + 1``; the
    states with ``j <= trunc`` are then exact and the capped column becomes
    ``tail_mass``.
    """
    if trunc is None:
        trunc = max(policy.n_r, DEFAULT_TRUNC)
    if trunc < policy.n_r:
        raise ValueError(f"trunc={trunc} must be >= n_r={policy.n_r}")
    if chan.p_ack * policy.tail == 0.0 and chan.lam * policy.tail == 0.0:
        raise DegeneratePolicy("joint chain has no return path to (0, 0)")
    if chan.p_ack * policy.tail == 0.0:
        raise DegeneratePolicy("believed holding time never resets in the policy tail")
    cap = trunc + 1
    ii, jj, _ = _joint_index(cap)
    x = stationary_vector(joint_kernel(policy, chan, cap))
    full = np.zeros((cap + 1, cap + 1))
    full[ii, jj] = x
    probs = full[: trunc + 1, : trunc + 1].copy()
    return StationaryDistribution(probs=probs, tail_mass=float(full[:, cap].sum()))
