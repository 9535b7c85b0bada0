"""Defender side: leader objective, optimistic lower bounds and the policy search.

The defender commits to a reference policy, the eavesdropper-driven attacker
answers with its cheapest stealthy hijack, and the defender scores the pair
with a weighted mix of pre- and post-attack costs.  Binary policies are
searched depth first with bounds from a relaxation that drops the
follower's optimality.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .attack import (
    StealthBudget,
    adversary_cost_vector,
    balance_system,
    boundary_zero_mask,
    build_truncated_mdp,
    legit_cost_vector,
    reference_occupation,
    stealth_rows,
    synthesize_malicious_policy,
)
from .chain import ChannelParams, ReferencePolicy
from .errors import (
    FollowerInfeasible,
    HorizonTooLarge,
    InfeasibleStealth,
    InvalidPolicy,
    NonConvergence,
    NumericalBreakdown,
)
from .linprog import LinearProgram, LpStatus, solve_lp
from .sysmodel import SteadyCovariance, SystemModel, solve_steady_covariance

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 20
PRUNE_SLACK = 1e-9


def _weight(x, name):
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return x


@dataclass(frozen=True, eq=False)
class StackelbergConfig:
    alpha: float
    beta1: float
    beta2: float
    eps_s: float
    n_r: int
    n_t: int
    chan: ChannelParams
    model: SystemModel
    steady: SteadyCovariance | None = None
    tail_tol: float = 1e-9

    def __post_init__(self):
        for name in ("alpha", "beta1", "beta2"):
            object.__setattr__(self, name, _weight(getattr(self, name), name))
        StealthBudget(self.eps_s)
        if self.n_r < 1:
            raise ValueError("n_r must be >= 1")
        if self.n_t < self.n_r:
            raise ValueError(f"n_t={self.n_t} must be >= n_r={self.n_r}")
        if self.steady is None:
            object.__setattr__(self, "steady", solve_steady_covariance(self.model))

    @cached_property
    def c_u(self) -> np.ndarray:
        return legit_cost_vector(self.steady, self.model, self.chan, self.n_t, self.tail_tol)

    @cached_property
    def c_e(self) -> np.ndarray:
        return adversary_cost_vector(self.steady, self.model, self.chan, self.n_t, self.tail_tol)

    @cached_property
    def mdp(self):
        return build_truncated_mdp(self.chan, self.n_t)

    def combine(self, Jhat_u, Jhat_e, J_u, J_e) -> float:
        a, b1, b2 = self.alpha, self.beta1, self.beta2
        return a * (b1 * Jhat_u - (1 - b1) * Jhat_e) + (1 - a) * (b2 * J_u - (1 - b2) * J_e)


class Components(NamedTuple):
    Jhat_u: float
    Jhat_e: float
    J_u: float
    J_e: float


def _binary_policy(bits: Sequence[int]) -> ReferencePolicy:
    return ReferencePolicy(tuple(float(b) for b in bits))


def leader_objective(reference: ReferencePolicy, config: StackelbergConfig) -> tuple[float, Components]:
    """J_c of ``reference`` against the follower's best stealthy response."""
    if reference.n_r > config.n_t:
        raise InvalidPolicy(f"policy horizon {reference.n_r} exceeds n_t={config.n_t}")
    omega = reference_occupation(reference, config.chan, config.n_t)
    Jhat_u = float(config.c_u @ omega.flat)
    Jhat_e = float(config.c_e @ omega.flat)
    try:
        res = synthesize_malicious_policy(reference, config.chan, config.steady, config.model, config.n_t,
                                          config.eps_s, tail_tol=config.tail_tol)
    except InfeasibleStealth as exc:
        raise FollowerInfeasible(str(exc)) from exc
    comps = Components(Jhat_u, Jhat_e, res.J_u, res.J_e)
    return config.combine(*comps), comps


def relaxation_lp(prefix: Sequence[int], config: StackelbergConfig) -> LinearProgram:
    """Joint (omega, rho, eps) LP behind :func:`lower_bound`."""
    n_t, n_r = config.n_t, config.n_r
    mdp = config.mdp
    P = mdp.n_pairs
    M, m = balance_system(mdp)
    G, E, ones = stealth_rows(n_t)
    ne = G.shape[0]
    Z = sp.csr_matrix(M.shape)
    A_eq = sp.vstack([
        sp.hstack([M, Z, sp.csr_matrix((M.shape[0], ne))]),
        sp.hstack([Z, M, sp.csr_matrix((M.shape[0], ne))]),
    ], format="csr")
    b_eq = np.concatenate([m, m])
    A_ub = sp.vstack([
        sp.hstack([-G, G, -E]),
        sp.hstack([G, -G, -E]),
        sp.hstack([sp.csr_matrix((1, 2 * P)), ones]),
    ], format="csr")
    b_ub = np.zeros(2 * ne + 1)
    b_ub[-1] = config.eps_s

    hi_w = np.ones((n_t + 1, n_t + 1, 2))
    for i, bit in enumerate(prefix):
        hi_w[i, :, 1 - int(bit)] = 0.0
    hi_w[n_r:, :, 0] = 0.0
    hi_r = np.ones(P)
    hi_r[boundary_zero_mask(n_t)] = 0.0
    hi = np.concatenate([hi_w.reshape(-1), hi_r, np.full(ne, np.inf)])

    a, b1, b2 = config.alpha, config.beta1, config.beta2
    c = np.concatenate([
        a * (b1 * config.c_u - (1 - b1) * config.c_e),
        (1 - a) * (b2 * config.c_u - (1 - b2) * config.c_e),
        np.zeros(ne),
    ])
    return LinearProgram(c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub, lo=np.zeros(c.size), hi=hi)


def lower_bound(prefix: Sequence[int], config: StackelbergConfig) -> float:
    """Optimistic bound on J_c over every binary completion of ``prefix``.

    Both occupation measures are free apart from balance, the fixed
    transmission decisions and the stealth coupling; the follower need not
    be optimal, so the minimum can only undershoot.
    """
    prefix = [int(b) for b in prefix]
    if len(prefix) > config.n_r or any(b not in (0, 1) for b in prefix):
        raise ValueError(f"prefix must be a 0/1 sequence of length <= {config.n_r}")
    try:
        sol = solve_lp(relaxation_lp(prefix, config), method="highs")
    except (NumericalBreakdown, NonConvergence) as exc:
        # -inf is always admissible; the subtree is simply not pruned
        log.warning("relaxation for prefix %s failed (%s); bound set to -inf", prefix, exc)
        return -math.inf
    if sol.status is LpStatus.INFEASIBLE:
        return math.inf
    if sol.status is not LpStatus.OPTIMAL:
        return -math.inf
    return float(sol.objective_value)


@dataclass
class SearchReport:
    best_policy: ReferencePolicy
    best_value: float
    leaves_evaluated: int
    bounds_computed: int = 0
    pruned_subtrees: int = 0
    components: Components | None = None
    trace: list = field(default_factory=list)

    def to_dict(self, verbose: bool = False) -> dict:
        doc = {
            "best_policy": self.best_policy.to_dict(),
            "threshold": self.best_policy.threshold_value,
            "best_value": self.best_value,
            "leaves_evaluated": self.leaves_evaluated,
            "bounds_computed": self.bounds_computed,
            "pruned_subtrees": self.pruned_subtrees,
        }
        if self.components is not None:
            doc["components"] = self.components._asdict()
        if verbose:
            doc["trace"] = self.trace
        return doc


class _Leaves:
    """Leaf evaluator with an optional memo shared between searches."""

    def __init__(self, config, cache):
        self.config = config
        self.cache = cache if cache is not None else {}
        self.count = 0

    def __call__(self, bits):
        self.count += 1
        key = tuple(int(b) for b in bits)
        if key not in self.cache:
            self.cache[key] = leader_objective(_binary_policy(key), self.config)
        return self.cache[key]


def exhaustive_search(config: StackelbergConfig, cache: dict | None = None) -> SearchReport:
    """Evaluate every binary policy; ties go to the lexicographically smallest."""
    if config.n_r > EXHAUSTIVE_LIMIT:
        raise HorizonTooLarge(f"n_r={config.n_r} exceeds the exhaustive limit {EXHAUSTIVE_LIMIT}")
    leaf = _Leaves(config, cache)
    best, best_val, best_comps = None, math.inf, None
    trace = []
    for bits in itertools.product((0, 1), repeat=config.n_r):
        val, comps = leaf(bits)
        trace.append({"prefix": list(bits), "value": val})
        if val < best_val:
            best, best_val, best_comps = bits, val, comps
    return SearchReport(_binary_policy(best), best_val, leaf.count, components=best_comps, trace=trace)


def branch_and_bound(config: StackelbergConfig, bound_fn: Callable | None = None,
                     cache: dict | None = None, initial_best: float = math.inf) -> SearchReport:
    """Depth-first branch-and-bound over binary policies, ``tau = 0`` branch first.

    A subtree is pruned when its bound reaches the incumbent.  ``bound_fn``
    replaces :func:`lower_bound` (signature ``(prefix, config)``).
    """
    if config.n_r < 1:
        raise ValueError("n_r must be >= 1")
    bound_fn = bound_fn or lower_bound
    leaf = _Leaves(config, cache)
    state = {"bits": None, "val": initial_best, "comps": None, "bounds": 0, "pruned": 0}
    trace = []

    def visit(prefix):
        if len(prefix) == config.n_r:
            val, comps = leaf(prefix)
            trace.append({"prefix": list(prefix), "value": val})
            if val < state["val"]:
                state.update(bits=tuple(prefix), val=val, comps=comps)
            return
        if prefix and math.isfinite(state["val"]):
            lb = bound_fn(prefix, config)
            state["bounds"] += 1
            slack = 0.0 if math.isinf(lb) else PRUNE_SLACK * max(1.0, abs(lb))
            pruned = lb - slack >= state["val"]
            trace.append({"prefix": list(prefix), "bound": lb, "pruned": bool(pruned)})
            if pruned:
                state["pruned"] += 1
                return
        for bit in (0, 1):
            visit(prefix + [bit])

    visit([])
    if state["bits"] is None:
        raise FollowerInfeasible("every subtree was pruned against the initial incumbent")
    return SearchReport(_binary_policy(state["bits"]), state["val"], leaf.count, state["bounds"],
                        state["pruned"], components=state["comps"], trace=trace)
