"""Linear plant/sensor model, steady Kalman covariance and the open-loop map f."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidModel, NonConvergence

SYM_TOL = 1e-10
TRACE_HORIZON = 512


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise InvalidModel(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidModel(f"{name} has non-finite entries")
    return arr


def _rank(M: np.ndarray) -> int:
    return int(np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.abs(M).max())))


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return V @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ V.T


def symmetrize(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """LTI plant ``x+ = A x + w`` observed as ``y = C x + v``.

    Construction validates the noise covariances and the
    observability / controllability assumptions and raises
    :class:`InvalidModel` naming the failed check.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        C = _as_matrix(self.C, "C")
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        n = A.shape[0]
        if A.shape != (n, n):
            raise InvalidModel(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise InvalidModel(f"C must have {n} columns, got {C.shape}")
        ny = C.shape[0]
        if Q.shape != (n, n):
            raise InvalidModel(f"Q must be {n}x{n}, got {Q.shape}")
        if R.shape != (ny, ny):
            raise InvalidModel(f"R must be {ny}x{ny}, got {R.shape}")
        if np.abs(Q - Q.T).max() > SYM_TOL:
            raise InvalidModel("Q is not symmetric")
        if np.linalg.eigvalsh(symmetrize(Q)).min() < -SYM_TOL:
            raise InvalidModel("Q is not positive semidefinite")
        if np.abs(R - R.T).max() > SYM_TOL:
            raise InvalidModel("R is not symmetric")
        if np.linalg.eigvalsh(symmetrize(R)).min() <= SYM_TOL:
            raise InvalidModel("R is not positive definite")

        obs = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)])
        if _rank(obs) < n:
            raise InvalidModel("observability rank test failed: (C, A) is not observable")
        Qh = _psd_sqrt(Q)
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ Qh for k in range(n)])
        if _rank(ctrb) < n:
            raise InvalidModel("controllability rank test failed: (A, Q^1/2) is not controllable")

        for name, arr in zip("ACQR", (A, C, Q, R)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_s(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def spectral_radius(self) -> float:
        """|lambda_max(A)|."""
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    def key(self) -> bytes:
        return b"".join(np.ascontiguousarray(m).tobytes() for m in (self.A, self.C, self.Q, self.R))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "ACQR"}

    @classmethod
    def from_dict(cls, doc: dict) -> "SystemModel":
        missing = [k for k in "ACQR" if k not in doc]
        if missing:
            raise InvalidModel(f"model document is missing keys {missing}")
        return cls(doc["A"], doc["C"], doc["Q"], doc["R"])


def load_model(path) -> SystemModel:
    """Read a model from JSON with row-major keys ``A``, ``C``, ``Q``, ``R``."""
    with open(Path(path)) as fh:
        return SystemModel.from_dict(json.load(fh))


def paper_model() -> SystemModel:
    """The 2-state unstable example used throughout the experiments."""
    return SystemModel(
        A=[[1.3, 1.0], [0.0, 1.0]],
        C=[[1.0, 0.0]],
        Q=0.01 * np.eye(2),
        R=[[0.01]],
    )


@dataclass(frozen=True, eq=False)
class SteadyCovariance:
    PBar: np.ndarray
    iterations: int
    residual: float
    _traces: dict = field(default_factory=dict, repr=False, compare=False)

    def traces(self, model: SystemModel, n_max: int) -> np.ndarray:
        """``tr f^n(PBar)`` for ``n = 0..n_max`` (cached, extended on demand).

        Entries overflow to ``inf`` for very unstable models at large ``n``.
        """
        key = model.key()
        cached = self._traces.get(key)
        want = max(n_max + 1, TRACE_HORIZON)
        if cached is None or cached[0].shape[0] < n_max + 1:
            tr = np.empty(want)
            X = np.array(self.PBar, dtype=float)
            A, Q = model.A, model.Q
            with np.errstate(over="ignore", invalid="ignore"):
                for n in range(want):
                    tr[n] = np.trace(X)
                    if not np.isfinite(tr[n]):
                        tr[n:] = np.inf
                        break
                    X = symmetrize(A @ X @ A.T + Q)
            tr.setflags(write=False)
            cached = (tr,)
            self._traces[key] = cached
        return cached[0][: n_max + 1]


def _posterior_update(P: np.ndarray, model: SystemModel) -> np.ndarray:
    A, C, Q, R = model.A, model.C, model.Q, model.R
    M = A @ P @ A.T + Q
    S = C @ M @ C.T + R
    K = np.linalg.solve(S.T, (M @ C.T).T).T
    return symmetrize(M - K @ C @ M)


def solve_steady_covariance(model: SystemModel, tol: float = 1e-12, max_iter: int = 10**6) -> SteadyCovariance:
    """Posterior steady-state error covariance of the sensor's Kalman filter.

    Iterates the measurement-updated Riccati recursion starting from ``Q``
    until consecutive iterates differ by less than ``tol`` (max-abs entry).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    P = np.array(model.Q, dtype=float)
    for it in range(1, max_iter + 1):
        P_next = _posterior_update(P, model)
        if not np.all(np.isfinite(P_next)):
            raise NonConvergence("Riccati recursion produced non-finite values")
        residual = float(np.abs(P_next - P).max())
        P = P_next
        if residual < tol:
            P.setflags(write=False)
            return SteadyCovariance(PBar=P, iterations=it, residual=residual)
    raise NonConvergence(f"Riccati recursion did not reach tol={tol} in {max_iter} iterations (residual {residual:.3e})")


def _check_square(X: np.ndarray, model: SystemModel) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != (model.n_s, model.n_s):
        raise DimensionMismatch(f"expected {model.n_s}x{model.n_s} matrix, got {X.shape}")
    return X


def riccati_map(X, model: SystemModel) -> np.ndarray:
    """f(X) = A X A^T + Q."""
    X = _check_square(X, model)
    return symmetrize(model.A @ X @ model.A.T + model.Q)


def iterate_riccati(PBar, n: int, model: SystemModel, closed_form: bool = False) -> np.ndarray:
    """n-fold composition f^n(PBar), f^0 being the identity.

    ``closed_form`` evaluates ``A^n PBar (A^T)^n + sum_{i<n} A^i Q (A^T)^i``
    instead of composing the map.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    X = _check_square(PBar, model)
    if closed_form:
        A, Q = model.A, model.Q
        An = np.linalg.matrix_power(A, n)
        out = An @ X @ An.T
        Ai = np.eye(model.n_s)
        for _ in range(n):
            out = out + Ai @ Q @ Ai.T
            Ai = A @ Ai
        return symmetrize(out)
    for _ in range(n):
        X = riccati_map(X, model)
    return X


def trace_bounds(PBar, n: int, model: SystemModel) -> tuple[float, float]:
    """Lower/upper bounds on tr f^n(PBar) from singular values of powers of A."""
    if n < 1:
        raise ValueError("n must be >= 1")
    PBar = _check_square(PBar, model)
    A, Q, ns = model.A, model.Q, model.n_s
    sig2 = []
    Ai = np.eye(ns)
    for _ in range(n + 1):
        sig2.append(np.linalg.norm(Ai, 2) ** 2)
        Ai = A @ Ai
    sig2 = np.array(sig2)
    p_max = np.linalg.norm(PBar, 2)
    q_max = np.linalg.norm(Q, 2)
    p_min = np.linalg.eigvalsh(PBar).min()
    q_min = np.linalg.eigvalsh(Q).min()
    upper = ns * p_max * sig2[n] + ns * q_max * sig2[:n].sum()
    lower = p_min * sig2[n] + q_min * sig2[:n].sum()
    return float(lower), float(upper)


def geometric_trace_series(steady: SteadyCovariance, model: SystemModel, start: int, ratio: float,
                           tol: float = 1e-9, max_terms: int = 10**6) -> float:
    """``sum_{m>=0} ratio^m tr f^{start+m}(PBar)`` with a certified remainder below ``tol``.

    Terms are generated from the scaled iterate ``ratio^m f^{start+m}`` so large
    horizons never overflow.  The remainder after a computed block of ``K``
    terms uses ``tr f^{n+K} <= ||A^K||^2 tr f^n + tr f^K(0)``, which turns the
    tail into a geometric series once ``ratio^K ||A^K||^2 < 1``.
    Raises :class:`DivergentTail` when ``ratio * rho(A)^2 >= 1``.
    """
    from .errors import DivergentTail

    if not 0.0 <= ratio < 1.0:
        raise DivergentTail(f"geometric ratio {ratio} must lie in [0, 1)")
    rho = model.spectral_radius
    if ratio * rho * rho >= 1.0:
        raise DivergentTail(f"ratio {ratio:.6g} times |lambda_max(A)|^2 = {rho * rho:.6g} is not below 1")
    A, Q = model.A, model.Q
    X = np.array(steady.PBar, dtype=float)
    with np.errstate(over="raise"):
        for _ in range(start):
            X = symmetrize(A @ X @ A.T + Q)
    if ratio == 0.0:
        return float(np.trace(X))

    # smallest K with ratio^K ||A^K||^2 <= 1/2 (exists since ratio*rho^2 < 1)
    K, AK = 0, np.eye(model.n_s)
    x = 1.0
    while x > 0.5:
        K += 1
        AK = A @ AK
        x = ratio**K * np.linalg.norm(AK, 2) ** 2
        if K > max_terms:
            raise DivergentTail("no contraction block found for the trace series")
    cK = float(np.trace(iterate_riccati(np.zeros_like(X), K, model)))

    # Y_m = ratio^m f^{start+m}, weight_m = ratio^m
    Y, w = X, 1.0
    total, m = 0.0, 0
    while True:
        block, wsum = 0.0, 0.0
        for _ in range(K):
            block += float(np.trace(Y))
            wsum += w
            Y = symmetrize(ratio * (A @ Y @ A.T) + ratio * w * Q)
            w *= ratio
            m += 1
        total += block
        rK = ratio**K
        remainder = (x * block + cK * rK * wsum / (1.0 - rK)) / (1.0 - x)
        if remainder < tol:
            return total
        if m > max_terms:
            raise NonConvergence(f"trace series remainder {remainder:.3e} above tol after {m} terms")
