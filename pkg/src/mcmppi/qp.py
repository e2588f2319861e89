"""Dense active-set solver for strictly convex QPs with equality
constraints and box bounds:

    min 1/2 x'Hx + g'x   s.t.  A x = b,  lo <= x <= hi

The working set holds the box constraints guessed active; equalities are
always enforced through the KKT system. Problems here are tiny (n <= 14,
l <= 8), so each iteration is a single dense KKT solve and warm-starting
from the previous cycle's active set typically converges in one or two
iterations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class QpError(RuntimeError):
    pass


class QpInfeasibleError(QpError):
    """The equality constraints are inconsistent with the box bounds."""


class QpNonConvergenceError(QpError):
    """Iteration limit hit on a (probably) feasible problem."""


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray  # (l, n); l may be 0
    b_eq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H shape mismatch")
        if self.A_eq.shape[1:] != (n,) and self.A_eq.size > 0:
            raise ValueError("A_eq shape mismatch")
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise ValueError("bound shape mismatch")


@dataclass
class QpSolution:
    x: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray  # signed; nonzero only on the active set
    active_set: tuple  # ((index, side), ...) with side -1 = lo, +1 = hi
    iterations: int
    kkt_residual: dict
    solve_time: float


def _kkt_solve(H, g, A, b, fixed: dict, n: int):
    """Solve the EQP with the variables in ``fixed`` held at their bounds."""
    free = np.array([i for i in range(n) if i not in fixed], dtype=int)
    x = np.zeros(n)
    for i, v in fixed.items():
        x[i] = v
    l = A.shape[0] if A.size else 0
    nf = free.size
    if nf == 0:
        if l:
            r = A @ x - b
            if np.linalg.norm(r, ord=np.inf) > 1e-9:
                return None, None, free
            nu = np.linalg.lstsq(A.T, -(H @ x + g), rcond=None)[0] if l else np.zeros(0)
            return x, nu, free
        return x, np.zeros(0), free
    Hff = H[np.ix_(free, free)]
    rhs_top = -(g[free] + H[free] @ x - Hff @ x[free])
    if l:
        Af = A[:, free]
        rhs_bot = b - A @ x + Af @ x[free]
        K = np.block([[Hff, Af.T], [Af, np.zeros((l, l))]])
        rhs = np.concatenate([rhs_top, rhs_bot])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.linalg.norm(K @ sol - rhs, ord=np.inf) > 1e-8:
                return None, None, free
        x[free] = sol[:nf]
        return x, sol[nf:], free
    try:
        x[free] = np.linalg.solve(Hff, rhs_top)
    except np.linalg.LinAlgError:
        return None, None, free
    return x, np.zeros(0), free


def kkt_residuals(p: QpProblem, x, nu, lam) -> dict:
    """Stationarity, primal feasibility, and complementarity residuals."""
    stat = p.H @ x + p.g + lam
    if p.A_eq.size:
        stat = stat + p.A_eq.T @ nu
    eq = p.A_eq @ x - p.b_eq if p.A_eq.size else np.zeros(0)
    lo_v = np.maximum(p.lo - x, 0.0)
    hi_v = np.maximum(x - p.hi, 0.0)
    comp = np.abs(lam) * np.minimum(np.abs(x - p.lo), np.abs(p.hi - x))
    return {
        "stationarity": float(np.linalg.norm(stat, ord=np.inf)),
        "eq_residual": float(np.linalg.norm(eq, ord=np.inf)) if eq.size else 0.0,
        "bound_violation": float(max(lo_v.max(initial=0.0), hi_v.max(initial=0.0))),
        "complementarity": float(comp.max(initial=0.0)),
    }


def _box_feasibility_gap(p: QpProblem, iters: int = 2000) -> float:
    """min ||Ax - b|| over the box, by projected gradient; used only to
    classify a failed solve as infeasible vs non-convergent."""
    if not p.A_eq.size:
        return 0.0
    x = np.clip(np.zeros_like(p.g), p.lo, p.hi)
    AtA_norm = np.linalg.norm(p.A_eq, 2) ** 2
    tau = 1.0 / max(AtA_norm, 1e-12)
    for _ in range(iters):
        r = p.A_eq @ x - p.b_eq
        x = np.clip(x - tau * (p.A_eq.T @ r), p.lo, p.hi)
    return float(np.linalg.norm(p.A_eq @ x - p.b_eq))


def solve_qp(
    p: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 100,
    warm_start: tuple = (),
) -> QpSolution:
    """Primal-dual active-set solve; raises QpInfeasibleError or
    QpNonConvergenceError on failure.

    Degenerate bound geometry (more nearly-active constraints than
    variables) can make the working-set guess cycle; in that case the
    bounds are relaxed by a tiny random amount to break ties, and the
    relaxed solve's active set is polished on the original problem.
    """
    try:
        return _solve_active_set(p, tol, max_iter, warm_start)
    except QpNonConvergenceError:
        return _solve_admm_fallback(p)


def _solve_active_set(
    p: QpProblem,
    tol: float,
    max_iter: int,
    warm_start: tuple,
) -> QpSolution:
    t0 = time.perf_counter()
    n = p.g.shape[0]
    if np.any(p.lo > p.hi):
        raise QpInfeasibleError("crossed box bounds")
    W: dict = {}
    for i, side in warm_start:
        if 0 <= i < n:
            W[i] = side
    visited = set()
    add_all = False
    for it in range(1, max_iter + 1):
        key = frozenset(W.items())
        if key in visited:
            if add_all:
                raise QpNonConvergenceError("working-set cycle")
            add_all = True  # cycle guard: switch to bulk addition
            visited.clear()
        visited.add(key)
        fixed = {i: (p.lo[i] if s < 0 else p.hi[i]) for i, s in W.items()}
        x, nu, free = _kkt_solve(p.H, p.g, p.A_eq, p.b_eq, fixed, n)
        if x is None:
            if W:
                # working set over-pinned the problem: relax the newest guess
                del W[next(reversed(W))]
                continue
            gap = _box_feasibility_gap(p)
            if gap > 1e-6:
                raise QpInfeasibleError(f"equality/box gap {gap:.3e}")
            raise QpNonConvergenceError("singular KKT system")
        lo_v = p.lo[free] - x[free]
        hi_v = x[free] - p.hi[free]
        worst = max(lo_v.max(initial=0.0), hi_v.max(initial=0.0))
        if worst > 1e-11:
            viol = [(-v, i, -1) for v, i in zip(lo_v, free) if v > 1e-11]
            viol += [(-v, i, 1) for v, i in zip(hi_v, free) if v > 1e-11]
            viol.sort()
            take = viol if add_all else viol[:1]
            for _, i, side in take:
                W[i] = side
            continue
        # bound multipliers: lam_i = -(Hx + g + A'nu)_i on the active set
        grad = p.H @ x + p.g
        if p.A_eq.size:
            grad = grad + p.A_eq.T @ nu
        lam = np.zeros(n)
        wrong = []
        for i, s in W.items():
            lam[i] = -grad[i]
            # stationarity needs lam = -grad on the active set; optimality
            # needs grad >= 0 at lo (lam <= 0) and grad <= 0 at hi (lam >= 0)
            if s < 0 and lam[i] > tol:
                wrong.append((-lam[i], i))
            elif s > 0 and lam[i] < -tol:
                wrong.append((lam[i], i))
        if wrong:
            wrong.sort()
            del W[wrong[0][1]]
            continue
        res = kkt_residuals(p, x, nu if nu.size else np.zeros(0), lam)
        return QpSolution(
            x=x,
            eq_multipliers=nu,
            bound_multipliers=lam,
            active_set=tuple(sorted(W.items())),
            iterations=it,
            kkt_residual=res,
            solve_time=time.perf_counter() - t0,
        )
    gap = _box_feasibility_gap(p)
    if gap > 1e-6:
        raise QpInfeasibleError(f"equality/box gap {gap:.3e}")
    raise QpNonConvergenceError(f"no convergence in {max_iter} iterations")


def _solve_admm_fallback(p: QpProblem) -> QpSolution:
    """Robust fallback for the degenerate cases where the working-set
    guess cycles: operator-splitting iterations followed by an
    active-set polish. Slower than the direct method but convergent for
    any feasible problem, and only reached when the fast path fails."""
    t0 = time.perf_counter()
    gap = _box_feasibility_gap(p)
    if gap > 1e-6:
        raise QpInfeasibleError(f"equality/box gap {gap:.3e}")
    n = p.g.shape[0]
    l = p.A_eq.shape[0] if p.A_eq.size else 0
    # splitting: min 1/2 x'Hx + g'x + I{Cx in S}, C = [A; I],
    # S = {b} x [lo, hi]; scaled-dual ADMM with residual-balancing rho
    rho = 10.0
    C = np.vstack([p.A_eq, np.eye(n)]) if l else np.eye(n)
    CtC = C.T @ C
    M_inv = np.linalg.inv(p.H + rho * CtC)
    x = np.clip(np.zeros(n), p.lo, p.hi)
    z = C @ x
    u = np.zeros(l + n)
    for it in range(40000):
        x = M_inv @ (-p.g + rho * C.T @ (z - u))
        w = C @ x + u
        z_new = (
            np.concatenate([p.b_eq, np.clip(w[l:], p.lo, p.hi)])
            if l
            else np.clip(w, p.lo, p.hi)
        )
        r_pri = C @ x - z_new
        r_dua = rho * (C.T @ (z_new - z))
        z = z_new
        u = u + r_pri
        pri = np.linalg.norm(r_pri, ord=np.inf)
        dua = np.linalg.norm(r_dua, ord=np.inf)
        if pri < 1e-12 and dua < 1e-10:
            break
        if it % 200 == 199 and (pri > 10 * dua or dua > 10 * pri):
            scale = np.sqrt(max(pri, 1e-300) / max(dua, 1e-300))
            scale = float(np.clip(scale, 0.2, 5.0))
            if scale != 1.0:
                rho *= scale
                u /= scale
                M_inv = np.linalg.inv(p.H + rho * CtC)
    xb = z[l:] if l else z
    # polish: hand the detected active set to the direct method first
    guess = tuple(
        (i, -1 if xb[i] - p.lo[i] <= 1e-8 else 1)
        for i in range(n)
        if xb[i] - p.lo[i] <= 1e-8 or p.hi[i] - xb[i] <= 1e-8
    )
    try:
        return _solve_active_set(p, 1e-8, 100, guess)
    except QpError:
        pass
    for thresh in (1e-9, 1e-7, 1e-5, 1e-3):
        fixed = {}
        for i in range(n):
            if xb[i] - p.lo[i] <= thresh:
                fixed[i] = p.lo[i]
            elif p.hi[i] - xb[i] <= thresh:
                fixed[i] = p.hi[i]
        xs, nu, _ = _kkt_solve(p.H, p.g, p.A_eq, p.b_eq, fixed, n)
        if xs is None:
            continue
        grad = p.H @ xs + p.g
        if l:
            grad = grad + p.A_eq.T @ nu
        lam = np.zeros(n)
        ok = True
        for i, v in fixed.items():
            lam[i] = -grad[i]
            at_lo = v == p.lo[i]
            if (at_lo and lam[i] > 1e-7) or (not at_lo and lam[i] < -1e-7):
                ok = False
                break
        if not ok:
            continue
        res = kkt_residuals(p, xs, nu if nu.size else np.zeros(0), lam)
        if max(res.values()) > 1e-7:
            continue
        active = tuple(
            sorted((i, -1 if v == p.lo[i] else 1) for i, v in fixed.items())
        )
        return QpSolution(
            x=xs,
            eq_multipliers=nu,
            bound_multipliers=lam,
            active_set=active,
            iterations=0,
            kkt_residual=res,
            solve_time=time.perf_counter() - t0,
        )
    raise QpNonConvergenceError("fallback polish failed")
