"""Convex QP solver for  minimize 1/2 z'Pz + q'z  s.t.  l <= Az <= u.

Operator-splitting (ADMM) with over-relaxation. The per-iteration linear
system

    [[P + sigma I, A'], [A, -diag(1/rho)]]

is factorized once (dense LU) and reused across iterations, and across
solves when only q, l, u change, which is exactly the receding-horizon
pattern. Rows with l == u are treated as equalities and get a stiffer
penalty internally, which speeds up convergence on the MPC's dynamics
constraints without changing the solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

__all__ = ["QpProblem", "QpSettings", "QpSolution", "QpSolver", "solve"]

_EQ_RHO_SCALE = 1e3


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=float)
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError("P must be n x n")
        if np.max(np.abs(self.P - self.P.T)) > 1e-12 * max(1.0, np.max(np.abs(self.P))):
            raise ValueError("P must be symmetric")
        m = self.A.shape[0]
        if self.A.shape != (m, n) or self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("A, l, u dimensions inconsistent")
        if np.any(self.l > self.u):
            raise ValueError("need l <= u elementwise")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha_relax: float = 1.6
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    eps_prim_inf: float = 1e-6
    max_iter: int = 4000
    polish: bool = True
    # badly scaled problems stall at a fixed penalty; rescaling rho by the
    # primal/dual residual ratio (with a refactorization) restores progress
    rho_adaptive: bool = True
    adapt_interval: int = 50

    def __post_init__(self):
        if self.rho <= 0 or self.sigma <= 0:
            raise ValueError("rho and sigma must be positive")
        if not 0.0 < self.alpha_relax < 2.0:
            raise ValueError("alpha_relax must lie in (0, 2)")


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: str                  # "solved" | "max-iter" | "primal-infeasible"
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = field(default=float("nan"))


class QpSolver:
    """Workspace owning the KKT factorization for one problem structure.

    The factorization is reused across iterations, and across solves when
    only q, l, u change. An adapted rho (and the refactorization it implies)
    also carries over to later solves, which suits receding-horizon use:
    the penalty settles once and subsequent solves run warm.
    """

    def __init__(self, problem: QpProblem, settings: QpSettings = None):
        self.prob = problem
        self.settings = settings or QpSettings()
        self._eq = np.isfinite(problem.l) & np.isfinite(problem.u) \
            & (problem.u - problem.l <= 1e-12)
        self.n_refactor = 0
        self.last_iterates = None  # raw (x, y) before polish, for warm starts
        self._factor(self.settings.rho)

    def _factor(self, rho):
        p, s = self.prob, self.settings
        n, m = p.n, p.m
        self.rho = rho
        self.rho_vec = np.where(self._eq, rho * _EQ_RHO_SCALE, rho)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = p.P + s.sigma * np.eye(n)
        kkt[:n, n:] = p.A.T
        kkt[n:, :n] = p.A
        kkt[n:, n:] = -np.diag(1.0 / self.rho_vec) if m else np.zeros((0, 0))
        self._lu = lu_factor(kkt)
        self.n_refactor += 1

    def update_vectors(self, q=None, l=None, u=None):
        """Swap the linear term and bounds; the factorization is reused.

        The equality-row pattern must not change, since rho was frozen at
        setup time.
        """
        p = self.prob
        if q is not None:
            p.q = np.asarray(q, dtype=float).ravel()
        if l is not None:
            p.l = np.asarray(l, dtype=float).ravel()
        if u is not None:
            p.u = np.asarray(u, dtype=float).ravel()
        if np.any(p.l > p.u):
            raise ValueError("need l <= u elementwise")

    def solve(self, warm_start=None) -> QpSolution:
        p, s = self.prob, self.settings
        n, m = p.n, p.m
        alpha = s.alpha_relax
        if warm_start is not None:
            x = np.asarray(warm_start[0], dtype=float).copy()
            y = np.asarray(warm_start[1], dtype=float).copy()
            z = np.clip(p.A @ x, p.l, p.u) if m else np.zeros(0)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
            z = np.zeros(m)
        rhs = np.empty(n + m)
        status = "max-iter"
        iters = s.max_iter
        r_prim = r_dual = float("inf")
        for it in range(1, s.max_iter + 1):
            rho = self.rho_vec
            rhs[:n] = s.sigma * x - p.q
            rhs[n:] = z - y / rho if m else np.zeros(0)
            sol = lu_solve(self._lu, rhs)
            x_tilde = sol[:n]
            nu = sol[n:]
            z_tilde = z + (nu - y) / rho if m else z
            x = alpha * x_tilde + (1.0 - alpha) * x
            y_prev = y
            if m:
                z_relax = alpha * z_tilde + (1.0 - alpha) * z
                z = np.clip(z_relax + y / rho, p.l, p.u)
                y = y + rho * (z_relax - z)

            # residuals are three extra mat-vecs; sampling them every few
            # iterations keeps the loop lean without delaying termination
            # noticeably (warm restarts still exit on the first check)
            if not (it <= 5 or it % 10 == 0):
                continue
            Ax = p.A @ x if m else np.zeros(0)
            r_prim = float(np.max(np.abs(Ax - z))) if m else 0.0
            Px = p.P @ x
            Aty = p.A.T @ y if m else np.zeros(n)
            r_dual = float(np.max(np.abs(Px + p.q + Aty)))
            scale_prim = max(np.max(np.abs(Ax)), np.max(np.abs(z))) if m else 0.0
            scale_dual = max(np.max(np.abs(Px)), np.max(np.abs(p.q)),
                             np.max(np.abs(Aty)) if m else 0.0)
            if r_prim <= s.eps_abs + s.eps_rel * scale_prim \
                    and r_dual <= s.eps_abs + s.eps_rel * scale_dual:
                status = "solved"
                iters = it
                break
            if m and self._primal_infeasible(y - y_prev):
                status = "primal-infeasible"
                iters = it
                break
            if s.rho_adaptive and it % s.adapt_interval == 0:
                rp_rel = r_prim / max(scale_prim, 1e-10)
                rd_rel = r_dual / max(scale_dual, 1e-10)
                ratio = math.sqrt(rp_rel / max(rd_rel, 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    self._factor(min(max(self.rho * ratio, 1e-6), 1e6))
        self.last_iterates = (x.copy(), y.copy())
        if status == "solved" and s.polish:
            polished = self._polish(x, y, r_prim, r_dual)
            if polished is not None:
                x, y, r_prim, r_dual = polished
        return QpSolution(
            z=x, y=y, status=status, iterations=iters,
            primal_residual=r_prim, dual_residual=r_dual,
            objective=p.objective(x),
        )

    def _polish(self, x, y, r_prim_old, r_dual_old):
        """Active-set refinement of an ADMM solution.

        The converged duals identify which bounds are active; solving the
        corresponding equality-constrained QP (with a whisper of
        regularization plus one round of iterative refinement) sharpens the
        solution to near machine precision. The refined point only replaces
        the ADMM iterate when both residuals improve, so a wrong active-set
        guess degrades nothing.
        """
        p = self.prob
        n, m = p.n, p.m
        eq = self._eq
        act_low = (~eq) & (y < -1e-10) & np.isfinite(p.l)
        act_up = (~eq) & (y > 1e-10) & np.isfinite(p.u)
        rows = np.flatnonzero(eq | act_low | act_up)
        if rows.size == 0:
            try:
                x_new = np.linalg.solve(p.P + 1e-12 * np.eye(n), -p.q)
            except np.linalg.LinAlgError:
                return None
            y_new = np.zeros(m)
        else:
            A_act = p.A[rows]
            b_act = np.where(act_up[rows], p.u[rows], p.l[rows])
            b_act = np.where(eq[rows], p.l[rows], b_act)
            k = rows.size
            delta = 1e-9
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = p.P + delta * np.eye(n)
            kkt[:n, n:] = A_act.T
            kkt[n:, :n] = A_act
            kkt[n:, n:] = -delta * np.eye(k)
            rhs = np.concatenate([-p.q, b_act])
            try:
                lu = lu_factor(kkt)
                sol = lu_solve(lu, rhs)
                # one round of iterative refinement against the unregularized system
                kkt0 = kkt.copy()
                kkt0[:n, :n] -= delta * np.eye(n)
                kkt0[n:, n:] += delta * np.eye(k)
                sol = sol + lu_solve(lu, rhs - kkt0 @ sol)
            except (np.linalg.LinAlgError, ValueError):
                return None
            x_new = sol[:n]
            y_new = np.zeros(m)
            y_new[rows] = sol[n:]
        if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(y_new)):
            return None
        Ax = p.A @ x_new
        viol = np.maximum(p.l - Ax, 0.0) + np.maximum(Ax - p.u, 0.0)
        r_prim_new = float(np.max(viol)) if m else 0.0
        r_dual_new = float(np.max(np.abs(p.P @ x_new + p.q + p.A.T @ y_new)))
        if r_prim_new <= r_prim_old and r_dual_new <= r_dual_old:
            return x_new, y_new, r_prim_new, r_dual_new
        return None

    def _primal_infeasible(self, dy) -> bool:
        p, s = self.prob, self.settings
        scale = np.max(np.abs(dy))
        if scale <= 1e-14:
            return False
        dyn = dy / scale
        if np.max(np.abs(p.A.T @ dyn)) > s.eps_prim_inf:
            return False
        pos = dyn > s.eps_prim_inf
        neg = dyn < -s.eps_prim_inf
        if np.any(pos & ~np.isfinite(p.u)) or np.any(neg & ~np.isfinite(p.l)):
            return False
        support = float(np.sum(p.u[pos] * dyn[pos]) + np.sum(p.l[neg] * dyn[neg]))
        return support < -s.eps_prim_inf


def solve(problem: QpProblem, settings: QpSettings = None, warm_start=None) -> QpSolution:
    """One-shot convenience wrapper around QpSolver."""
    return QpSolver(problem, settings).solve(warm_start=warm_start)
