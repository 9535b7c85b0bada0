"""Adversary side: truncated (eta_s, eta_e) MDP, occupation-measure LP and policy extraction.

States ``(i, j)`` pair the sensor's believed holding time with the
eavesdropper's holding time, both capped at ``n_t``.  Occupation measures
are stored flat with index ``2 (n_t + 1) i + 2 j + a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .chain import ChannelParams, ReferencePolicy, stationary_sensor_belief, stationary_vector
from .errors import DegeneratePolicy, DivergentTail, InfeasibleStealth, InvalidPolicy, Unbounded
from .linprog import LinearProgram, LpStatus, solve_lp
from .sysmodel import SteadyCovariance, SystemModel, geometric_trace_series

MASS_TOL = 1e-10
BOUNDARY_MODES = ("transmit", "lumped")


def flat_index(n_t: int, i, j, a):
    return 2 * (n_t + 1) * np.asarray(i) + 2 * np.asarray(j) + np.asarray(a)


@dataclass(frozen=True, eq=False)
class TruncatedMDP:
    """Kernel of the capped chain; ``kernel[k, s']`` with ``k`` a flat (i, j, a) index."""

    n_t: int
    chan: ChannelParams
    kernel: sp.csr_matrix

    @property
    def n_states(self) -> int:
        return (self.n_t + 1) ** 2

    @property
    def n_pairs(self) -> int:
        return 2 * self.n_states

    def state(self, i: int, j: int) -> int:
        return (self.n_t + 1) * i + j

    def row(self, i: int, j: int, a: int) -> dict:
        """Successor distribution of one state-action pair as {(i', j'): prob}."""
        r = self.kernel.getrow(int(flat_index(self.n_t, i, j, a)))
        n1 = self.n_t + 1
        return {(int(s) // n1, int(s) % n1): float(v) for s, v in zip(r.indices, r.data)}


def build_truncated_mdp(chan: ChannelParams, n_t: int) -> TruncatedMDP:
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    p, le = chan.p_ack, chan.lam_e
    n1 = n_t + 1
    ii, jj = np.meshgrid(np.arange(n1), np.arange(n1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    i1, j1 = np.minimum(ii + 1, n_t), np.minimum(jj + 1, n_t)
    k0 = flat_index(n_t, ii, jj, 0)
    k1 = flat_index(n_t, ii, jj, 1)
    rows = [k0, k1, k1, k1, k1]
    cols = [n1 * i1 + j1, n1 * i1 + j1, j1, n1 * i1, np.zeros_like(ii)]
    probs = [1.0, (1 - p) * (1 - le), p * (1 - le), (1 - p) * le, p * le]
    vals = [np.full(ii.size, v) for v in probs]
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * n1 * n1, n1 * n1))
    K.sum_duplicates()
    K.eliminate_zeros()
    return TruncatedMDP(n_t=n_t, chan=chan, kernel=K)


@dataclass(frozen=True, eq=False)
class OccupationMeasure:
    """Stationary state-action probabilities ``rho[i, j, a]`` on the capped chain."""

    rho: np.ndarray

    @property
    def n_t(self) -> int:
        return self.rho.shape[0] - 1

    @property
    def flat(self) -> np.ndarray:
        return self.rho.reshape(-1)

    @classmethod
    def from_flat(cls, vec, n_t: int) -> "OccupationMeasure":
        return cls(np.asarray(vec, dtype=float).reshape(n_t + 1, n_t + 1, 2))

    def sensor_marginal(self) -> np.ndarray:
        """``rho_s[i, a] = sum_j rho[i, j, a]`` with row ``n_t`` aggregating ``i >= n_t``."""
        return self.rho.sum(axis=1)

    def eavesdropper_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=(0, 2))

    def state_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=2)

    def balance_residual(self, mdp: TruncatedMDP) -> float:
        inflow = mdp.kernel.T @ self.flat
        return float(np.abs(self.state_marginal().ravel() - inflow).max())

    def to_csv_rows(self):
        n1 = self.rho.shape[0]
        return [(i, j, a, float(self.rho[i, j, a])) for i in range(n1) for j in range(n1) for a in (0, 1)]


@dataclass(frozen=True, eq=False)
class MaliciousPolicy:
    """Hijacked transmission probabilities for ``i, j < n_t``; 1 on and beyond the cap."""

    tau_tilde: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tau_tilde, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 1:
            raise InvalidPolicy(f"tau_tilde must be a square matrix, got shape {t.shape}")
        if np.any(~np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
            raise InvalidPolicy("tau_tilde entries must lie in [0, 1]")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "tau_tilde", t)

    @property
    def n_t(self) -> int:
        return self.tau_tilde.shape[0]

    def full(self) -> np.ndarray:
        """(n_t+1) x (n_t+1) matrix including the all-transmit boundary."""
        out = np.ones((self.n_t + 1, self.n_t + 1))
        out[: self.n_t, : self.n_t] = self.tau_tilde
        return out

    def tau(self, i: int, j: int) -> float:
        if i >= self.n_t or j >= self.n_t:
            return 1.0
        return float(self.tau_tilde[i, j])

    @classmethod
    def from_reference(cls, reference: ReferencePolicy, n_t: int) -> "MaliciousPolicy":
        """The reference policy embedded in the (i, j) family (ignores j)."""
        col = reference.vector(n_t)
        return cls(np.repeat(col[:, None], n_t, axis=1))

    def to_dict(self):
        return {"n_t": self.n_t, "tau_tilde": self.tau_tilde.tolist()}

    @classmethod
    def from_dict(cls, doc):
        pol = cls(np.asarray(doc["tau_tilde"], dtype=float))
        if "n_t" in doc and doc["n_t"] != pol.n_t:
            raise InvalidPolicy(f"n_t={doc['n_t']} does not match tau_tilde shape {pol.tau_tilde.shape}")
        return pol


@dataclass(frozen=True)
class StealthBudget:
    eps_s: float

    def __post_init__(self):
        if not (self.eps_s >= 0.0) or math.isinf(self.eps_s):
            raise ValueError(f"eps_s must be a finite non-negative number, got {self.eps_s}")


# ---------------------------------------------------------------------------
# measures induced by fixed policies


def _policy_grid(n_t: int, tau_of) -> np.ndarray:
    return np.array([[tau_of(i, j) for j in range(n_t + 1)] for i in range(n_t + 1)])


def induced_occupation(mdp: TruncatedMDP, tau: np.ndarray) -> OccupationMeasure:
    """Stationary occupation of the chain that transmits with probability ``tau[i, j]``."""
    n_t = mdp.n_t
    t = np.asarray(tau, dtype=float).ravel()
    K = mdp.kernel
    P = sp.diags(1.0 - t) @ K[0::2] + sp.diags(t) @ K[1::2]
    pi = stationary_vector(P)
    rho = np.stack([pi * (1.0 - t), pi * t], axis=-1).reshape(n_t + 1, n_t + 1, 2)
    return OccupationMeasure(rho)


def reference_occupation(policy: ReferencePolicy, chan: ChannelParams, n_t: int) -> OccupationMeasure:
    """Occupation measure of the capped chain under the reference policy.

    Capping is exact lumping here because transmission depends on ``i`` only
    and is constant (the policy tail) for ``i >= n_t >= n_r``.
    """
    if n_t < policy.n_r:
        raise ValueError(f"n_t={n_t} must be >= n_r={policy.n_r}")
    if chan.p_ack * policy.tail == 0.0:
        raise DegeneratePolicy("reference policy never resets the sensor's holding time")
    mdp = build_truncated_mdp(chan, n_t)
    taus = policy.vector(n_t + 1)
    return induced_occupation(mdp, np.repeat(taus[:, None], n_t + 1, axis=1))


def reference_sensor_marginal(policy: ReferencePolicy, chan: ChannelParams, n_t: int) -> np.ndarray:
    """omega_s[i, a] for i < n_t from the closed form; row n_t aggregates the geometric tail."""
    dist = stationary_sensor_belief(policy, chan, max(n_t, policy.n_r))
    probs = dist.probs[: n_t + 1].copy()
    probs[n_t] = dist.probs[n_t:].sum() + dist.tail_mass
    taus = policy.vector(n_t + 1)
    return np.column_stack([probs * (1.0 - taus), probs * taus])


# ---------------------------------------------------------------------------
# cost vectors


def adversary_cost_vector(steady: SteadyCovariance, model: SystemModel, chan: ChannelParams, n_t: int,
                          tail_tol: float = 1e-9, boundary: str = "transmit") -> np.ndarray:
    """Linear coefficients c_e with J_e = c_e . rho (flat layout).

    ``boundary="transmit"`` prices capped eavesdropper states with the
    geometric tail reached under all-transmit; ``"lumped"`` uses
    ``tr f^{n_t}`` (a lower bound valid for any behaviour past the cap).
    """
    _check_boundary(boundary)
    tr = steady.traces(model, n_t)
    n1 = n_t + 1
    c = np.empty((n1, n1, 2))
    c[:, :, :] = tr[None, :, None]
    if boundary == "transmit":
        le = chan.lam_e
        rho = model.spectral_radius
        if (1.0 - le) * rho * rho >= 1.0:
            raise DivergentTail(f"lam_e={le} is not above 1 - 1/|lambda_max|^2 = {1 - 1 / rho**2:.6g}")
        c[:, n_t, 1] = le * geometric_trace_series(steady, model, n_t, 1.0 - le, tol=tail_tol / max(le, 1e-300))
    return c.reshape(-1)


def legit_cost_vector(steady: SteadyCovariance, model: SystemModel, chan: ChannelParams, n_t: int,
                      tail_tol: float = 1e-9, boundary: str = "transmit") -> np.ndarray:
    """Coefficients c_u with J_u = c_u . rho, pricing the sensor's believed holding time."""
    _check_boundary(boundary)
    tr = steady.traces(model, n_t)
    n1 = n_t + 1
    c = np.empty((n1, n1, 2))
    c[:, :, :] = tr[:, None, None]
    if boundary == "transmit":
        p = chan.p_ack
        rho = model.spectral_radius
        if (1.0 - p) * rho * rho >= 1.0:
            raise Unbounded(f"lam*lam_a={p} leaves the all-transmit tail unbounded")
        c[n_t, :, :] = p * geometric_trace_series(steady, model, n_t, 1.0 - p, tol=tail_tol / max(p, 1e-300))
    return c.reshape(-1)


def _check_boundary(boundary):
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {BOUNDARY_MODES}, got {boundary!r}")


# ---------------------------------------------------------------------------
# LP assembly


def balance_system(mdp: TruncatedMDP) -> tuple[sp.csr_matrix, np.ndarray]:
    """Balance rows (one per state) plus normalisation: ``M rho = m``."""
    S = mdp.n_states
    out = sp.csr_matrix((np.ones(mdp.n_pairs), (np.arange(mdp.n_pairs) // 2, np.arange(mdp.n_pairs))),
                        shape=(S, mdp.n_pairs))
    M = sp.vstack([out - mdp.kernel.T, sp.csr_matrix(np.ones((1, mdp.n_pairs)))], format="csr")
    m = np.zeros(S + 1)
    m[-1] = 1.0
    return M, m


def sensor_aggregator(n_t: int) -> sp.csr_matrix:
    """G with ``(G rho)[2 i + a] = sum_j rho[i, j, a]``."""
    n1 = n_t + 1
    ii, jj, aa = np.meshgrid(np.arange(n1), np.arange(n1), np.arange(2), indexing="ij")
    cols = flat_index(n_t, ii, jj, aa).ravel()
    rows = (2 * ii + aa).ravel()
    return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(2 * n1, 2 * n1 * n1))


def boundary_zero_mask(n_t: int) -> np.ndarray:
    """Flat mask of (i, n_t, 0) and (n_t, j, 0)."""
    n1 = n_t + 1
    mask = np.zeros((n1, n1, 2), dtype=bool)
    mask[:, n_t, 0] = True
    mask[n_t, :, 0] = True
    return mask.reshape(-1)


def stealth_rows(n_t: int, n_extra_before: int = 0) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """Pieces of ``-eps <= G rho - omega_s <= eps`` and ``sum eps <= eps_s``.

    Returns (G, E, ones) so callers can stack them against their own variable layout.
    """
    G = sensor_aggregator(n_t)
    E = sp.identity(G.shape[0], format="csr")
    return G, E, sp.csr_matrix(np.ones((1, G.shape[0])))


@dataclass(eq=False)
class AttackResult:
    policy: MaliciousPolicy
    J_e: float
    occupation: OccupationMeasure
    slacks: np.ndarray
    l1: float
    J_u: float = math.nan
    boundary: str = "transmit"
    lp_iterations: int = 0
    duals: dict = field(default_factory=dict)

    def __iter__(self):  # (policy, J_e, occupation) unpacking
        return iter((self.policy, self.J_e, self.occupation))


def assemble_attack_lp(omega_s: np.ndarray, c_e: np.ndarray, mdp: TruncatedMDP, eps_s: float,
                       boundary: str = "transmit") -> LinearProgram:
    n_t = mdp.n_t
    M, m = balance_system(mdp)
    G, E, ones = stealth_rows(n_t)
    nr, ne = mdp.n_pairs, G.shape[0]
    A_eq = sp.hstack([M, sp.csr_matrix((M.shape[0], ne))], format="csr")
    A_ub = sp.vstack([
        sp.hstack([G, -E]),
        sp.hstack([-G, -E]),
        sp.hstack([sp.csr_matrix((1, nr)), ones]),
    ], format="csr")
    w = omega_s.reshape(-1)
    b_ub = np.concatenate([w, -w, [eps_s]])
    hi = np.concatenate([np.ones(nr), np.full(ne, np.inf)])
    if boundary == "transmit":
        hi[:nr][boundary_zero_mask(n_t)] = 0.0
    c = np.concatenate([c_e, np.zeros(ne)])
    return LinearProgram(c, A_eq=A_eq, b_eq=m, A_ub=A_ub, b_ub=b_ub, lo=np.zeros(nr + ne), hi=hi)


def policy_from_occupation(occ: OccupationMeasure, mass_tol: float = MASS_TOL) -> MaliciousPolicy:
    """tau_tilde = rho(., ., 1) / sum_a rho where mass exceeds ``mass_tol``; 1 elsewhere."""
    rho = np.clip(occ.rho, 0.0, None)
    n_t = occ.n_t
    mass = rho.sum(axis=2)[:n_t, :n_t]
    on = rho[:n_t, :n_t, 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(mass > mass_tol, on / mass, 1.0)
    return MaliciousPolicy(np.clip(tau, 0.0, 1.0))


def synthesize_malicious_policy(reference: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance,
                                model: SystemModel, n_t: int, budget: StealthBudget | float,
                                boundary: str = "transmit", tail_tol: float = 1e-9,
                                method: str = "auto") -> AttackResult:
    """Cheapest-for-the-eavesdropper occupation measure within the l1 stealth budget."""
    _check_boundary(boundary)
    if not isinstance(budget, StealthBudget):
        budget = StealthBudget(float(budget))
    mdp = build_truncated_mdp(chan, n_t)
    omega_s = reference_sensor_marginal(reference, chan, n_t)
    c_e = adversary_cost_vector(steady, model, chan, n_t, tail_tol, boundary)
    lp = assemble_attack_lp(omega_s, c_e, mdp, budget.eps_s, boundary)
    sol = solve_lp(lp, method=method)
    if sol.status is LpStatus.INFEASIBLE:
        raise InfeasibleStealth(f"no occupation measure within eps_s={budget.eps_s} "
                                f"(n_t={n_t}, boundary={boundary})")
    if sol.status is not LpStatus.OPTIMAL:
        raise InfeasibleStealth(f"attack LP returned {sol.status.value}")
    nr = mdp.n_pairs
    rho = np.clip(sol.x[:nr], 0.0, None)
    if boundary == "transmit":
        rho[boundary_zero_mask(n_t)] = 0.0
    occ = OccupationMeasure.from_flat(rho, n_t)
    slacks = sol.x[nr:].reshape(n_t + 1, 2)
    l1 = float(np.abs(occ.sensor_marginal() - omega_s).sum())
    J_u = _legit_cost(steady, model, chan, n_t, tail_tol, boundary, rho)
    return AttackResult(policy=policy_from_occupation(occ), J_e=float(sol.objective_value), occupation=occ,
                        slacks=slacks, l1=l1, J_u=J_u, boundary=boundary,
                        lp_iterations=sol.iterations,
                        duals={"y_eq": sol.y_eq, "y_ub": sol.y_ub, "dual_objective": sol.dual_objective})


def evaluate_malicious_policy(policy: MaliciousPolicy, chan: ChannelParams, steady: SteadyCovariance,
                              model: SystemModel, tail_tol: float = 1e-9) -> tuple[float, float, OccupationMeasure]:
    """(J_e, J_u under attack, occupation) for a fixed hijacked policy.

    Exact for the untruncated chain: past the cap the policy always
    transmits, so the capped chain is an exact lumping.
    """
    n_t = policy.n_t
    mdp = build_truncated_mdp(chan, n_t)
    occ = induced_occupation(mdp, policy.full())
    c_e = adversary_cost_vector(steady, model, chan, n_t, tail_tol)
    return float(c_e @ occ.flat), _legit_cost(steady, model, chan, n_t, tail_tol, "transmit", occ.flat), occ


def _legit_cost(steady, model, chan, n_t, tail_tol, boundary, rho) -> float:
    """c_u . rho, or inf when the sensor's all-transmit tail diverges and carries mass."""
    try:
        return float(legit_cost_vector(steady, model, chan, n_t, tail_tol, boundary) @ rho)
    except Unbounded:
        n1 = n_t + 1
        return math.inf if rho.reshape(n1, n1, 2)[n_t].sum() > 0 else float(
            legit_cost_vector(steady, model, chan, n_t, tail_tol, "lumped") @ rho)


def reference_costs(reference: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance,
                    model: SystemModel, n_t: int, tail_tol: float = 1e-9,
                    boundary: str = "transmit") -> tuple[float, float, OccupationMeasure]:
    """(Jhat_u, Jhat_e, omega_t): the linear costs evaluated on the reference occupation."""
    omega = reference_occupation(reference, chan, n_t)
    c_e = adversary_cost_vector(steady, model, chan, n_t, tail_tol, boundary)
    c_u = legit_cost_vector(steady, model, chan, n_t, tail_tol, boundary)
    return float(c_u @ omega.flat), float(c_e @ omega.flat), omega


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    n_t: int
    eps_s: float
    J_e: float
    J_u: float
    l1: float
    feasible: bool
    reference_fallback: bool = False


def truncation_sweep(reference: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance,
                     model: SystemModel, n_t_list, budget: StealthBudget | float,
                     boundary: str = "transmit") -> list[SweepRow]:
    """J_e and realised l1 slack for each truncation horizon (increasing list)."""
    n_t_list = list(n_t_list)
    if any(b <= a for a, b in zip(n_t_list, n_t_list[1:])):
        raise ValueError("n_t_list must be strictly increasing")
    eps = budget.eps_s if isinstance(budget, StealthBudget) else float(budget)
    rows = []
    for n_t in n_t_list:
        try:
            res = synthesize_malicious_policy(reference, chan, steady, model, n_t, eps, boundary=boundary)
        except InfeasibleStealth:
            rows.append(SweepRow(n_t, eps, math.inf, math.nan, math.nan, feasible=False))
            continue
        rows.append(SweepRow(n_t, eps, res.J_e, res.J_u, res.l1, feasible=True))
    return rows


def stealth_sweep(reference: ReferencePolicy, chan: ChannelParams, steady: SteadyCovariance,
                  model: SystemModel, n_t: int, eps_list) -> list[tuple[SweepRow, MaliciousPolicy | ReferencePolicy]]:
    """LP optimum for each budget.

    When a budget admits no truncated measure (the boundary convention
    forbids silence at the cap, which can clash with a zero budget), the
    adversary cannot deviate at all and keeps the reference policy; that row
    is flagged ``reference_fallback``, reports the reference costs and pairs
    with the reference policy itself.
    """
    out = []
    for eps in eps_list:
        try:
            res = synthesize_malicious_policy(reference, chan, steady, model, n_t, eps)
            out.append((SweepRow(n_t, float(eps), res.J_e, res.J_u, res.l1, True), res.policy))
        except InfeasibleStealth:
            ju, je, _ = reference_costs(reference, chan, steady, model, n_t)
            out.append((SweepRow(n_t, float(eps), je, ju, 0.0, False, reference_fallback=True), reference))
    return out
