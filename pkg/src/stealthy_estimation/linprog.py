"""Linear programming: a dense bounded-variable revised simplex plus a HiGHS backend.

Problems have the form::

    min c.x   s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lo <= x <= hi

Every optimal result carries row duals (``y_eq``, ``y_ub``, read as
d objective / d rhs), reduced costs and the Lagrangian dual objective so that
strong duality can be checked.  Infeasible results carry a Farkas pair
``(u, v)`` with ``v >= 0`` and ``min_box (u A_eq + v A_ub) x > u b_eq + v b_ub``;
unbounded results carry an improving ray.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NonConvergence, NumericalBreakdown

FEAS_TOL = 1e-7
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
HARRIS_TOL = 1e-9
BOUND_TOL = 1e-9
REFACTOR_EVERY = 64
STALL_LIMIT = 50
SIMPLEX_SIZE_LIMIT = 400_000  # rows * cols above which "auto" hands off to HiGHS


class LpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


def _as_matrix(M, ncols):
    if M is None:
        return sp.csr_matrix((0, ncols))
    if sp.issparse(M):
        return sp.csr_matrix(M, dtype=float)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return sp.csr_matrix((0, ncols))
    return sp.csr_matrix(M)


def _as_vector(v, n, name):
    if v is None:
        return np.zeros(n)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (n,):
        raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass(eq=False)
class LinearProgram:
    c: np.ndarray
    A_eq: sp.csr_matrix = None
    b_eq: np.ndarray = None
    A_ub: sp.csr_matrix = None
    b_ub: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None
    names: list | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq = _as_matrix(self.A_eq, n)
        self.A_ub = _as_matrix(self.A_ub, n)
        for M, name in ((self.A_eq, "A_eq"), (self.A_ub, "A_ub")):
            if M.shape[1] != n:
                raise ValueError(f"{name} has {M.shape[1]} columns, expected {n}")
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.b_ub = _as_vector(self.b_ub, self.A_ub.shape[0], "b_ub")
        self.lo = np.zeros(n) if self.lo is None else _as_vector(self.lo, n, "lo")
        self.hi = np.full(n, np.inf) if self.hi is None else _as_vector(self.hi, n, "hi")
        for arr, name in ((self.c, "c"), (self.b_eq, "b_eq"), (self.b_ub, "b_ub")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        for M, name in ((self.A_eq, "A_eq"), (self.A_ub, "A_ub")):
            if M.nnz and not np.all(np.isfinite(M.data)):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)) or np.any(self.lo > self.hi):
            raise ValueError("variable bounds are inconsistent")
        if np.any(self.lo == np.inf) or np.any(self.hi == -np.inf):
            raise ValueError("variable bounds are inconsistent")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.A_eq.shape[0] + self.A_ub.shape[0], self.n

    def residuals(self, x) -> tuple[float, float, float]:
        """(max |A_eq x - b_eq|, max positive part of A_ub x - b_ub, max bound violation)."""
        x = np.asarray(x, dtype=float)
        r_eq = float(np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0))
        r_ub = float(np.clip(self.A_ub @ x - self.b_ub, 0.0, None).max(initial=0.0))
        r_bd = float(max(np.clip(self.lo - x, 0.0, None).max(initial=0.0),
                         np.clip(x - self.hi, 0.0, None).max(initial=0.0)))
        return r_eq, r_ub, r_bd

    def box_min(self, g) -> float:
        """min over lo <= x <= hi of g.x (may be -inf)."""
        g = np.asarray(g, dtype=float)
        total = 0.0
        for gj, l, h in zip(g, self.lo, self.hi):
            if abs(gj) <= 1e-12:
                continue
            bound = l if gj > 0 else h
            if not math.isfinite(bound):
                return -math.inf
            total += gj * bound
        return total


@dataclass(eq=False)
class LpSolution:
    status: LpStatus
    x: np.ndarray | None = None
    objective_value: float = math.nan
    y_eq: np.ndarray | None = None
    y_ub: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    dual_objective: float = math.nan
    farkas: tuple | None = None
    ray: np.ndarray | None = None
    iterations: int = 0
    method: str = ""
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def dual_objective(lp: LinearProgram, y_eq, y_ub) -> tuple[float, np.ndarray]:
    """Lagrangian dual value and reduced costs for row multipliers (y_ub <= 0)."""
    r = lp.c - lp.A_eq.T @ y_eq - lp.A_ub.T @ y_ub
    val = float(y_eq @ lp.b_eq + y_ub @ lp.b_ub)
    for rj, l, h in zip(r, lp.lo, lp.hi):
        if abs(rj) <= OPT_TOL:
            continue
        if rj > 0:
            val += rj * l if math.isfinite(l) else -math.inf
        elif rj < 0:
            val += rj * h if math.isfinite(h) else -math.inf
    return val, r


# ---------------------------------------------------------------------------
# internal standard form: A x = b, 0 <= x <= u


@dataclass
class _Standard:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    u: np.ndarray
    offset: float
    # original variable j -> list of (internal column, sign); x_j = base_j + sum sign*x'
    base: np.ndarray
    cols: list
    n_orig: int
    n_struct: int
    m_eq: int
    m_ub: int


def _standardize(lp: LinearProgram) -> _Standard:
    n = lp.n
    A_eq = lp.A_eq.toarray()
    A_ub = lp.A_ub.toarray()
    cols, base = [], np.zeros(n)
    blocks_eq, blocks_ub, cost, upper = [], [], [], []
    k = 0
    for j in range(n):
        l, h = lp.lo[j], lp.hi[j]
        if math.isfinite(l):
            base[j] = l
            entries = [(k, 1.0)]
            upper.append(h - l)
        elif math.isfinite(h):
            base[j] = h
            entries = [(k, -1.0)]
            upper.append(math.inf)
        else:
            entries = [(k, 1.0), (k + 1, -1.0)]
            upper.extend([math.inf, math.inf])
        for _, s in entries:
            blocks_eq.append(s * A_eq[:, j])
            blocks_ub.append(s * A_ub[:, j])
            cost.append(s * lp.c[j])
        cols.append(entries)
        k += len(entries)
    n_struct = k
    m_eq, m_ub = A_eq.shape[0], A_ub.shape[0]
    Aeq_s = np.column_stack(blocks_eq) if n_struct else np.zeros((m_eq, 0))
    Aub_s = np.column_stack(blocks_ub) if n_struct else np.zeros((m_ub, 0))
    b_eq = lp.b_eq - A_eq @ base
    b_ub = lp.b_ub - A_ub @ base
    A = np.zeros((m_eq + m_ub, n_struct + m_ub))
    A[:m_eq, :n_struct] = Aeq_s
    A[m_eq:, :n_struct] = Aub_s
    A[m_eq:, n_struct:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    c = np.concatenate([np.array(cost), np.zeros(m_ub)])
    u = np.concatenate([np.array(upper), np.full(m_ub, np.inf)])
    return _Standard(A=A, b=b, c=c, u=u, offset=float(lp.c @ base), base=base, cols=cols,
                     n_orig=n, n_struct=n_struct, m_eq=m_eq, m_ub=m_ub)


def _to_original(std: _Standard, xs: np.ndarray, shift: bool = True) -> np.ndarray:
    x = std.base.copy() if shift else np.zeros(std.n_orig)
    for j, entries in enumerate(std.cols):
        for k, s in entries:
            x[j] += s * xs[k]
    return x


class _Simplex:
    """Bounded-variable revised simplex on ``A x = b, 0 <= x <= u`` with an explicit inverse."""

    def __init__(self, A, b, c, u, basis, at_upper, pricing, max_iter):
        self.A, self.b, self.c, self.u = A, b, c, u
        self.m, self.n = A.shape
        self.basis = np.array(basis, dtype=int)
        self.at_upper = at_upper
        self.pricing = pricing
        self.max_iter = max_iter
        self.iterations = 0
        self._refactor()

    def _refactor(self):
        B = self.A[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("basis matrix became singular") from exc
        self._since = 0
        self._recompute_x()

    def _recompute_x(self):
        xn = np.where(self.at_upper, self.u, 0.0)
        xn[self.basis] = 0.0
        xn = np.where(np.isfinite(xn), xn, 0.0)
        self.xB = self.Binv @ (self.b - self.A @ xn)

    def x(self):
        x = np.where(self.at_upper, self.u, 0.0)
        x = np.where(np.isfinite(x), x, 0.0)
        x[self.basis] = self.xB
        return x

    def duals(self):
        return self.c[self.basis] @ self.Binv

    def objective(self):
        return float(self.c @ self.x())

    def run(self):
        """Returns ("optimal", None) or ("unbounded", (j, sigma, w))."""
        nonbasic = np.ones(self.n, dtype=bool)
        bland = self.pricing == "bland"
        best_obj, stall = math.inf, 0
        while True:
            if self.iterations >= self.max_iter:
                raise NonConvergence(f"simplex exceeded {self.max_iter} iterations")
            nonbasic[:] = True
            nonbasic[self.basis] = False
            y = self.duals()
            d = self.c - y @ self.A
            can_up = nonbasic & ~self.at_upper & (self.u > 0) & (d < -OPT_TOL)
            can_down = nonbasic & self.at_upper & (d > OPT_TOL)
            cand = np.flatnonzero(can_up | can_down)
            if cand.size == 0:
                return "optimal", None
            if bland:
                j = int(cand[0])
            else:
                score = np.abs(d[cand])
                j = int(cand[np.argmax(score)])  # argmax returns the first (smallest index) maximiser
            sigma = 1.0 if can_up[j] else -1.0
            w = self.Binv @ self.A[:, j]
            # x_B(t) = x_B - sigma t w
            dw = sigma * w
            t_best, r_best, leave_upper = self.u[j], -1, False
            # Harris two-pass ratio test: bound the step with slightly relaxed
            # bounds, then take the largest pivot among rows that fit
            with np.errstate(divide="ignore", invalid="ignore"):
                dec = dw > PIVOT_TOL
                inc = dw < -PIVOT_TOL
                ub = self.u[self.basis]
                room = np.where(np.isfinite(ub), ub - self.xB, np.inf)
                relaxed = np.full(self.m, np.inf)
                relaxed[dec] = (np.maximum(self.xB[dec], 0.0) + HARRIS_TOL) / dw[dec]
                relaxed[inc] = (np.maximum(room[inc], 0.0) + HARRIS_TOL) / -dw[inc]
                exact = np.full(self.m, np.inf)
                exact[dec] = np.maximum(self.xB[dec], 0.0) / dw[dec]
                exact[inc] = np.maximum(room[inc], 0.0) / -dw[inc]
            t_max = relaxed.min() if self.m else np.inf
            if np.isfinite(t_max) and exact.min() < t_best:
                fits = np.flatnonzero(exact <= t_max)
                if bland:
                    r_best = int(fits[np.argmin(self.basis[fits])])
                else:
                    r_best = int(fits[np.argmax(np.abs(dw[fits]))])
                t_best = exact[r_best]
                leave_upper = bool(inc[r_best])
            if not math.isfinite(t_best):
                return "unbounded", (j, sigma, w)
            self.iterations += 1
            self.xB = self.xB - sigma * t_best * w
            if r_best < 0:  # bound flip
                self.at_upper[j] = not self.at_upper[j]
            else:
                piv = w[r_best]
                if abs(piv) < PIVOT_TOL:
                    raise NumericalBreakdown(f"pivot magnitude {abs(piv):.2e} below {PIVOT_TOL}")
                leaving = self.basis[r_best]
                self.at_upper[leaving] = leave_upper
                entering_value = (self.u[j] - t_best) if self.at_upper[j] else t_best
                self.at_upper[j] = False
                self.basis[r_best] = j
                row = self.Binv[r_best] / piv
                self.Binv -= np.outer(w, row)
                self.Binv[r_best] = row
                self.xB[r_best] = entering_value
                self._since += 1
                if self._since >= REFACTOR_EVERY:
                    self._refactor()
            obj = self.objective()
            if obj < best_obj - 1e-12:
                best_obj, stall = obj, 0
                if self.pricing != "bland":
                    bland = False
            else:
                stall += 1
                if stall >= STALL_LIMIT:
                    bland = True


def _solve_simplex(lp: LinearProgram, pricing: str = "dantzig", max_iter: int = 200_000) -> LpSolution:
    std = _standardize(lp)
    A, b = std.A, std.b
    m, n = A.shape
    flip = np.where(b < 0, -1.0, 1.0)
    A1 = A * flip[:, None]
    b1 = b * flip
    # phase I with one artificial per row
    Aaug = np.hstack([A1, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    u1 = np.concatenate([std.u, np.full(m, np.inf)])
    at_upper = np.zeros(n + m, dtype=bool)
    sx = _Simplex(Aaug, b1, c1, u1, basis=np.arange(n, n + m), at_upper=at_upper,
                  pricing=pricing, max_iter=max_iter)
    sx.run()
    phase1 = sx.objective()
    iters = sx.iterations
    if phase1 > FEAS_TOL:
        y = sx.duals() * flip  # back to unflipped internal rows
        z = -y
        u_cert = z[: std.m_eq]
        v_cert = z[std.m_eq:]
        return LpSolution(LpStatus.INFEASIBLE, farkas=(u_cert, v_cert), iterations=iters,
                          method="simplex", info={"phase1_objective": phase1})
    # phase II: artificials pinned to zero
    sx.c = np.concatenate([std.c * 1.0, np.zeros(m)])
    sx.u = np.concatenate([std.u, np.zeros(m)])
    sx.max_iter = iters + max_iter
    sx._refactor()
    kind, payload = sx.run()
    iters = sx.iterations
    if kind == "unbounded":
        j, sigma, w = payload
        dx = np.zeros(n + m)
        dx[j] = sigma
        dx[sx.basis] -= sigma * w
        ray = _to_original(std, dx[:n], shift=False)
        return LpSolution(LpStatus.UNBOUNDED, ray=ray, iterations=iters, method="simplex")
    xs = sx.x()[:n]
    x = _to_original(std, xs)
    y = sx.duals() * flip
    y_eq, y_ub = y[: std.m_eq], y[std.m_eq:]
    dual_val, red = dual_objective(lp, y_eq, y_ub)
    return LpSolution(LpStatus.OPTIMAL, x=x, objective_value=float(lp.c @ x), y_eq=y_eq, y_ub=y_ub,
                      reduced_costs=red, dual_objective=dual_val, iterations=iters, method="simplex")


# ---------------------------------------------------------------------------
# HiGHS backend


def _highs_bounds(lp):
    lo = np.where(np.isfinite(lp.lo), lp.lo, -np.inf)
    hi = np.where(np.isfinite(lp.hi), lp.hi, np.inf)
    return list(zip(lo, hi))


_HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _highs_call(c, A_ub, b_ub, A_eq, b_eq, bounds, presolve=False, tight=True):
    from scipy.optimize import linprog as _sp_linprog

    options = {**_HIGHS_OPTIONS, "presolve": presolve} if tight else {"presolve": presolve}
    return _sp_linprog(c, A_ub=A_ub if A_ub.shape[0] else None, b_ub=b_ub if A_ub.shape[0] else None,
                       A_eq=A_eq if A_eq.shape[0] else None, b_eq=b_eq if A_eq.shape[0] else None,
                       bounds=bounds, method="highs-ds", options=options)


def _highs_farkas(lp: LinearProgram):
    """Certificate from an elastic phase-one LP solved with HiGHS."""
    m_eq, m_ub, n = lp.A_eq.shape[0], lp.A_ub.shape[0], lp.n
    I_eq = sp.identity(m_eq, format="csr")
    I_ub = sp.identity(m_ub, format="csr")
    A_eq = sp.hstack([lp.A_eq, I_eq, -I_eq, sp.csr_matrix((m_eq, m_ub))], format="csr")
    A_ub = sp.hstack([lp.A_ub, sp.csr_matrix((m_ub, 2 * m_eq)), -I_ub], format="csr")
    c = np.concatenate([np.zeros(n), np.ones(2 * m_eq + m_ub)])
    bounds = _highs_bounds(lp) + [(0, None)] * (2 * m_eq + m_ub)
    res = _highs_call(c, A_ub, lp.b_ub, A_eq, lp.b_eq, bounds)
    if res.status != 0:
        return None, math.nan
    y_eq = np.asarray(res.eqlin.marginals) if m_eq else np.zeros(0)
    y_ub = np.asarray(res.ineqlin.marginals) if m_ub else np.zeros(0)
    return (-y_eq, -y_ub), float(res.fun)


def _solve_highs(lp: LinearProgram) -> LpSolution:
    # presolve is off: it is slower on the occupation LPs and can label
    # unbounded models infeasible
    res = _highs_call(lp.c, lp.A_ub, lp.b_ub, lp.A_eq, lp.b_eq, _highs_bounds(lp))
    # numerical trouble: try the reduced model, then default tolerances
    for presolve, tight in ((True, True), (False, False), (True, False)):
        if res.status != 4:
            break
        res = _highs_call(lp.c, lp.A_ub, lp.b_ub, lp.A_eq, lp.b_eq, _highs_bounds(lp), presolve, tight)
        if res.status == 0 and not tight and max(lp.residuals(res.x)) > FEAS_TOL:
            raise NumericalBreakdown("HiGHS solution violates the feasibility tolerance")
    if res.status == 2:
        # tiny right-hand sides against huge costs can trip the tight tolerances;
        # accept a relaxed solve only if it meets the feasibility tolerance
        loose = _highs_call(lp.c, lp.A_ub, lp.b_ub, lp.A_eq, lp.b_eq, _highs_bounds(lp), tight=False)
        if loose.status == 0 and max(lp.residuals(loose.x)) <= FEAS_TOL:
            res = loose
    iters = int(getattr(res, "nit", 0) or 0)
    if res.status == 0:
        x = np.asarray(res.x, dtype=float)
        y_eq = np.asarray(res.eqlin.marginals) if lp.A_eq.shape[0] else np.zeros(0)
        y_ub = np.asarray(res.ineqlin.marginals) if lp.A_ub.shape[0] else np.zeros(0)
        dual_val, red = dual_objective(lp, y_eq, y_ub)
        return LpSolution(LpStatus.OPTIMAL, x=x, objective_value=float(lp.c @ x), y_eq=y_eq, y_ub=y_ub,
                          reduced_costs=red, dual_objective=dual_val, iterations=iters, method="highs")
    if res.status == 2:
        cert, phase1 = _highs_farkas(lp)
        return LpSolution(LpStatus.INFEASIBLE, farkas=cert, iterations=iters, method="highs",
                          info={"phase1_objective": phase1, "message": res.message})
    if res.status == 3:
        return LpSolution(LpStatus.UNBOUNDED, iterations=iters, method="highs", info={"message": res.message})
    if res.status == 1:
        raise NonConvergence(f"HiGHS iteration limit: {res.message}")
    raise NumericalBreakdown(f"HiGHS failed: {res.message}")


def solve_lp(lp: LinearProgram, method: str = "auto", pricing: str = "dantzig",
             max_iter: int = 200_000) -> LpSolution:
    """Solve ``lp``; ``method`` is "simplex", "highs" or "auto" (size-based choice).

    ``pricing`` applies to the in-house simplex: "dantzig" (largest reduced
    cost, smallest index on ties, Bland's rule while degenerate) or "bland".
    """
    if method == "auto":
        m, n = lp.shape
        method = "auto-simplex" if m * n <= SIMPLEX_SIZE_LIMIT else "highs"
    if method == "simplex":
        if pricing not in ("dantzig", "bland"):
            raise ValueError(f"unknown pricing {pricing!r}")
        return _solve_simplex(lp, pricing=pricing, max_iter=max_iter)
    if method == "auto-simplex":
        try:
            return _solve_simplex(lp, pricing=pricing, max_iter=max_iter)
        except NumericalBreakdown:
            # ill-conditioned basis: hand the problem to HiGHS
            method = "highs"
    if method == "highs":
        return _solve_highs(lp)
    raise ValueError(f"unknown method {method!r}")


def check_farkas(lp: LinearProgram, cert, tol: float = 1e-9) -> bool:
    """True when ``cert = (u, v)`` proves the constraint system empty."""
    if cert is None:
        return False
    u, v = cert
    if v.size and v.min() < -tol:
        return False
    g = lp.A_eq.T @ u + lp.A_ub.T @ np.clip(v, 0.0, None)
    return lp.box_min(g) > float(u @ lp.b_eq + np.clip(v, 0.0, None) @ lp.b_ub) + tol


def write_mps(lp: LinearProgram, path, name: str = "ARTIFACT") -> None:
    """Free-format MPS dump for cross-checking with external solvers."""
    n = lp.n
    names = lp.names or [f"x{j}" for j in range(n)]
    rows = [("E", f"e{i}") for i in range(lp.A_eq.shape[0])] + [("L", f"u{i}") for i in range(lp.A_ub.shape[0])]
    lines = [f"NAME {name}", "ROWS", " N obj"] + [f" {t} {r}" for t, r in rows]
    lines.append("COLUMNS")
    Aeq = lp.A_eq.tocsc()
    Aub = lp.A_ub.tocsc()
    for j in range(n):
        if lp.c[j] != 0:
            lines.append(f" {names[j]} obj {float(lp.c[j])!r}")
        for M, prefix in ((Aeq, "e"), (Aub, "u")):
            col = M.getcol(j)
            for i, v in zip(col.indices, col.data):
                lines.append(f" {names[j]} {prefix}{i} {float(v)!r}")
    lines.append("RHS")
    for i, v in enumerate(lp.b_eq):
        if v != 0:
            lines.append(f" rhs e{i} {float(v)!r}")
    for i, v in enumerate(lp.b_ub):
        if v != 0:
            lines.append(f" rhs u{i} {float(v)!r}")
    lines.append("BOUNDS")
    for j in range(n):
        l, h = lp.lo[j], lp.hi[j]
        if l == h:
            lines.append(f" FX bnd {names[j]} {float(l)!r}")
            continue
        if not math.isfinite(l) and not math.isfinite(h):
            lines.append(f" FR bnd {names[j]}")
            continue
        if l != 0:
            lines.append(f" LO bnd {names[j]} {float(l)!r}" if math.isfinite(l) else f" MI bnd {names[j]}")
        if math.isfinite(h):
            lines.append(f" UP bnd {names[j]} {float(h)!r}")
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
