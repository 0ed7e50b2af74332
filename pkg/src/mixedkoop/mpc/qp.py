"""Dense convex QP ``min 1/2 x'Hx + F'x  s.t.  G x <= g`` by a primal active-set method.

Equality-constrained subproblems are solved in range-space form around one Cholesky
factor of ``H``. A feasible start comes from the warm start, the origin, or a max-margin
LP (HiGHS) in that order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import linprog


class QpError(RuntimeError):
    pass


class NotPositiveDefiniteError(QpError):
    pass


class QpInfeasibleError(QpError):
    pass


class IterationLimitError(QpError):
    def __init__(self, message: str, best: "QpSolution"):
        super().__init__(message)
        self.best = best


@dataclass
class QpProblem:
    H: np.ndarray
    F: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    n_u: int | None = None  # leading variables that are inputs; the rest are slacks
    soft: bool = False
    row_labels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.F = np.asarray(self.F, dtype=float).reshape(-1)
        n = len(self.F)
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}")
        self.G = np.zeros((0, n)) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float))
        self.g = np.zeros(0) if self.g is None else np.asarray(self.g, dtype=float).reshape(-1)
        if self.G.shape != (len(self.g), n):
            raise ValueError("inequality matrix and vector disagree")
        if self.n_u is None:
            self.n_u = n
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.F))
                and np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.g))):
            raise ValueError("QP data must be finite")

    @property
    def n(self) -> int:
        return len(self.F)

    def all_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Inequalities with box bounds appended as rows."""
        G, g = [self.G], [self.g]
        eye = np.eye(self.n)
        if self.ub is not None:
            ub = np.asarray(self.ub, dtype=float)
            keep = np.isfinite(ub)
            G.append(eye[keep]); g.append(ub[keep])
        if self.lb is not None:
            lb = np.asarray(self.lb, dtype=float)
            keep = np.isfinite(lb)
            G.append(-eye[keep]); g.append(-lb[keep])
        return np.vstack(G), np.concatenate(g)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.F @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of ``all_rows()``
    objective: float
    iterations: int
    kkt_residual: float
    active: list[int]
    slack_norm: float = 0.0
    soft: bool = False
    status: str = "optimal"
    n_u: int | None = None

    @property
    def u(self) -> np.ndarray:
        return self.x if self.n_u is None else self.x[: self.n_u]


def _factor(H: np.ndarray) -> np.ndarray:
    if not np.allclose(H, H.T, rtol=0, atol=1e-10 * max(1.0, np.abs(H).max())):
        raise NotPositiveDefiniteError("H is not symmetric")
    try:
        return cholesky(0.5 * (H + H.T), lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("H is not positive definite (Cholesky failed)") from None


def _eqp(L, grad, Gw):
    """Step ``p`` and multipliers for ``min 1/2 p'Hp + grad'p  s.t. Gw p = 0``."""
    Hinv_g = cho_solve((L, True), grad)
    if Gw.shape[0] == 0:
        return -Hinv_g, np.zeros(0)
    M = solve_triangular(L, Gw.T, lower=True)
    S = M.T @ M
    lam = np.linalg.solve(S, -Gw @ Hinv_g)
    p = -cho_solve((L, True), grad + Gw.T @ lam)
    return p, lam


def kkt_residual(H, F, G, g, x, lam) -> float:
    """Scaled max of stationarity, primal, dual and complementarity violations."""
    scale = 1.0 + max(np.abs(H).max(initial=0), np.abs(F).max(initial=0))
    stat = np.abs(H @ x + F + G.T @ lam).max(initial=0) / scale
    viol = G @ x - g
    gscale = 1.0 + np.abs(g).max(initial=0)
    prim = max(viol.max(initial=0), 0.0) / gscale
    dual = max((-lam).max(initial=0), 0.0) / scale
    comp = np.abs(lam * viol).max(initial=0) / (scale * gscale)
    return float(max(stat, prim, dual, comp))


def _feasible_start(G, g, x0, tol):
    if G.shape[0] == 0:
        return np.zeros(G.shape[1]) if x0 is None else np.asarray(x0, dtype=float)
    for cand in ([] if x0 is None else [np.asarray(x0, dtype=float)]) + [np.zeros(G.shape[1])]:
        if np.all(G @ cand - g <= tol * (1.0 + np.abs(g))):
            return cand
    # max t  s.t.  G x + t <= g,  t <= 1
    n = G.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([G, np.ones((G.shape[0], 1))])
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = linprog(c, A_ub=A, b_ub=g, bounds=bounds, method="highs")
    if res.status != 0 or res.x[-1] < -tol:
        raise QpInfeasibleError("inequality constraints are infeasible")
    return res.x[:n]


def solve_qp(qp: QpProblem, tol: float = 1e-6, max_iter: int = 200,
             warm_start: np.ndarray | None = None) -> QpSolution:
    L = _factor(qp.H)
    G, g = qp.all_rows()
    H, F = qp.H, qp.F
    m = G.shape[0]
    x = _feasible_start(G, g, warm_start, tol)
    feas_tol = tol * (1.0 + np.abs(g))

    # initial working set: active rows, kept linearly independent
    W: list[int] = []
    for i in np.nonzero(np.abs(G @ x - g) <= feas_tol)[0] if m else []:
        cand = G[W + [i]]
        if np.linalg.matrix_rank(cand, tol=1e-10) == len(W) + 1 and len(W) < qp.n:
            W.append(int(i))

    lam_full = np.zeros(m)
    for it in range(1, max_iter + 1):
        grad = H @ x + F
        p, lam = _eqp(L, grad, G[W])
        step_scale = 1.0 + np.abs(x).max(initial=0)
        if np.abs(p).max(initial=0) <= 1e-12 * step_scale:
            x = x + p
            if lam.size == 0 or lam.min() >= -tol * 1e-3:
                lam_full = np.zeros(m)
                lam_full[W] = np.maximum(lam, 0.0)
                return _finish(qp, G, g, x, lam_full, it, W)
            W.pop(int(np.argmin(lam)))
            continue
        Gp = G @ p if m else np.zeros(0)
        alpha, block = 1.0, None
        for i in np.nonzero(Gp > 1e-14 * (1.0 + np.abs(G).max(axis=1)))[0] if m else []:
            if i in W:
                continue
            a = (g[i] - G[i] @ x) / Gp[i]
            if a < alpha:
                alpha, block = max(a, 0.0), int(i)
        x = x + alpha * p
        if block is not None:
            W.append(block)
    lam_full = np.zeros(m)
    best = _finish(qp, G, g, x, lam_full, max_iter, W, status="iteration_limit")
    raise IterationLimitError(f"active-set iteration cap {max_iter} reached", best)


def _finish(qp, G, g, x, lam, iterations, W, status="optimal") -> QpSolution:
    n_u = qp.n_u
    slack = float(np.linalg.norm(x[n_u:])) if qp.n > n_u else 0.0
    return QpSolution(x, lam, qp.objective(x), iterations, kkt_residual(qp.H, qp.F, G, g, x, lam),
                      sorted(W), slack, qp.soft, status, n_u)


def enumerate_active_sets(qp: QpProblem, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Brute-force reference: try every active set, keep the best KKT point."""
    G, g = qp.all_rows()
    _factor(qp.H)
    best_x, best_f = None, np.inf
    m = G.shape[0]
    for k in range(min(m, qp.n) + 1):
        for act in itertools.combinations(range(m), k):
            Ga = G[list(act)]
            if k and np.linalg.matrix_rank(Ga) < k:
                continue
            # solve H x + F + Ga' lam = 0, Ga x = ga
            K = np.block([[qp.H, Ga.T], [Ga, np.zeros((k, k))]])
            rhs = np.concatenate([-qp.F, g[list(act)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:qp.n], sol[qp.n:]
            if np.any(G @ x - g > tol * (1 + np.abs(g))) or np.any(lam < -tol):
                continue
            f = qp.objective(x)
            if f < best_f:
                best_x, best_f = x, f
    if best_x is None:
        raise QpInfeasibleError("no feasible KKT point")
    return best_x, best_f
