"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np
from scipy.optimize import minimize

from stealthy_estimation.attack import reference_sensor_marginal


def capped_chain(tau, n_t, chan):
    """Dense stationary law of the capped (eta_s, eta_e) chain, built without the package kernel."""
    n1 = n_t + 1
    T = np.ones((n1, n1))
    T[:n_t, :n_t] = tau
    p, le = chan.p_ack, chan.lam_e
    P = np.zeros((n1 * n1, n1 * n1))
    for i in range(n1):
        for j in range(n1):
            s, t = i * n1 + j, T[i, j]
            i1, j1 = min(i + 1, n_t), min(j + 1, n_t)
            P[s, i1 * n1 + j1] += 1 - t + t * (1 - p) * (1 - le)
            P[s, j1] += t * p * (1 - le)
            P[s, i1 * n1] += t * (1 - p) * le
            P[s, 0] += t * p * le
    A = np.vstack([P.T - np.eye(n1 * n1), np.ones(n1 * n1)])
    b = np.zeros(n1 * n1 + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0].reshape(n1, n1), T


class GridOracle:
    """Brute-force hijack search on a tiny horizon: grid over tau_tilde, then local refinement."""

    def __init__(self, reference, chan, steady, model, n_t, levels=(0.0, 0.5, 1.0)):
        self.n_t, self.chan = n_t, chan
        tr = steady.traces(model, 800)  # terms beyond 800 are below 1e-130
        le = chan.lam_e
        self.cost = np.append(tr[:n_t], le * sum((1 - le) ** (j - n_t) * tr[j] for j in range(n_t, 801)))
        self.omega_s = reference_sensor_marginal(reference, chan, n_t)
        self.grid = [(self.evaluate(np.array(g)), g) for g in itertools.product(levels, repeat=n_t * n_t)]

    def evaluate(self, x):
        """(J_e, l1 distance to the reference marginal) of the policy ``x``."""
        n_t = self.n_t
        pi, T = capped_chain(np.clip(x, 0, 1).reshape(n_t, n_t), n_t, self.chan)
        rho_s = np.stack([(pi * (1 - T)).sum(axis=1), (pi * T).sum(axis=1)], axis=-1)
        return float(pi.sum(axis=0) @ self.cost), float(np.abs(rho_s - self.omega_s).sum())

    def min_l1(self, starts=5):
        k = self.n_t ** 2
        closest = sorted(self.grid, key=lambda r: r[0][1])[:starts]
        return min(self.evaluate(minimize(lambda x: self.evaluate(x)[1], np.array(g), method="Powell",
                                          bounds=[(0, 1)] * k).x)[1] for _, g in closest)

    def best_cost(self, eps, starts=10):
        k = self.n_t ** 2
        feasible = sorted((r[0][0], r[1]) for r in self.grid if r[0][1] <= eps)
        best = np.inf
        for _, g in feasible[:starts]:
            sol = minimize(lambda x: self.evaluate(x)[0], np.array(g), method="SLSQP", bounds=[(0, 1)] * k,
                           constraints=[{"type": "ineq", "fun": lambda x: eps - self.evaluate(x)[1]}],
                           options={"ftol": 1e-12, "maxiter": 500})
            J, l1 = self.evaluate(sol.x)
            if l1 <= eps + 1e-9:
                best = min(best, J)
        return best
