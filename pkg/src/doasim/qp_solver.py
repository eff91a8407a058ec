"""Small dense convex QP solver for the MPC step.

Minimizes 0.5 uT H u + fT u subject to elementwise bounds lb <= u <= ub and
general inequalities A u <= b, using Hildreth's dual coordinate-ascent
procedure with an active-set polish step. Sized for horizon-scale problems
(a handful of variables, tens of constraints) where determinism and a
guaranteed feasible answer matter more than large-scale performance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
_POLISH_EVERY = 25  # sweeps between certification attempts


@dataclass
class QpProblem:
    """min 0.5 uT h u + fT u  s.t.  a_ineq u <= b_ineq, lb <= u <= ub.

    Any of the constraint blocks may be omitted (None). h must be symmetric
    positive definite; a nearly-semidefinite h is rescued by a small ridge.
    """

    h: np.ndarray
    f: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    a_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None


@dataclass
class QpSolution:
    """Result of qp_solve.

    status is "optimal" when the answer carries a KKT / duality-gap
    certificate and "iteration_limit" when the sweep budget ran out first
    (u is then the best feasible iterate seen). active and lam are aligned
    with the stacked constraint order: general rows, then ub, then lb rows.
    """

    u: np.ndarray
    status: str
    iterations: int
    lam: np.ndarray = field(repr=False, default=None)
    active: np.ndarray = field(repr=False, default=None)
    max_violation: float = 0.0


def _stack_constraints(prob: QpProblem, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Fold box bounds into a single A u <= b block; rows: general, ub, lb."""
    blocks_a, blocks_b = [], []
    if prob.a_ineq is not None:
        a = np.atleast_2d(np.asarray(prob.a_ineq, dtype=float))
        blocks_a.append(a)
        blocks_b.append(np.atleast_1d(np.asarray(prob.b_ineq, dtype=float)))
    eye = np.eye(n)
    if prob.ub is not None:
        blocks_a.append(eye)
        blocks_b.append(np.broadcast_to(np.asarray(prob.ub, dtype=float), (n,)))
    if prob.lb is not None:
        blocks_a.append(-eye)
        blocks_b.append(-np.broadcast_to(np.asarray(prob.lb, dtype=float), (n,)))
    if not blocks_a:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(blocks_a), np.concatenate(blocks_b)


def _snap_feasible(u: np.ndarray, a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    """Minimal-norm correction driving residual violations to round-off.

    Candidates from the dual sweep or a KKT solve can sit on the wrong side
    of a near-active row by O(tol * scale); the returned-point contract is
    absolute feasibility, so the last step projects onto the offended rows
    (accumulating them, since fixing one row can nudge a neighbour over).
    The objective moves by O(violation), inside the optimality tolerance.
    """
    eps = 16.0 * np.finfo(float).eps * scale
    rows = np.zeros(b.size, dtype=bool)
    for _ in range(b.size + 1):
        viol = (a @ u - b) > eps
        if not np.any(viol):
            break
        rows |= viol
        sub = a[rows]
        du, *_ = np.linalg.lstsq(sub, b[rows] - sub @ u, rcond=None)
        u = u + du
    return u


def qp_solve(
    prob: QpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    lam0: np.ndarray | None = None,
) -> QpSolution:
    """Solve the QP; the returned point satisfies the constraints to
    round-off (a final projection removes tolerance-level violations).

    lam0 warm-starts the dual variables (same stacked constraint order as
    QpSolution.lam); useful when solving a sequence of similar problems.
    Raises ValueError on inconsistent bounds, a Hessian that stays
    indefinite after regularization, or when no feasible point is found.
    """
    h = np.asarray(prob.h, dtype=float)
    f = np.asarray(prob.f, dtype=float).ravel()
    n = f.size
    if h.shape != (n, n):
        raise ValueError(f"qp: h must be {n}x{n}, got {h.shape}")
    if prob.lb is not None and prob.ub is not None:
        lb = np.broadcast_to(np.asarray(prob.lb, dtype=float), (n,))
        ub = np.broadcast_to(np.asarray(prob.ub, dtype=float), (n,))
        if np.any(lb > ub):
            raise ValueError("qp: infeasible bounds, lb > ub")

    h = 0.5 * (h + h.T)
    try:
        chol = cho_factor(h)
    except np.linalg.LinAlgError:
        h = h + (1e-9 * np.trace(h) / n) * np.eye(n)
        try:
            chol = cho_factor(h)
        except np.linalg.LinAlgError as exc:
            raise ValueError("qp: Hessian not positive definite after regularization") from exc

    a, b = _stack_constraints(prob, n)
    m = a.shape[0]
    hinv_f = cho_solve(chol, f)
    u_free = -hinv_f

    if m == 0:
        return QpSolution(u=u_free, status="optimal", iterations=0,
                          lam=np.zeros(0), active=np.zeros(0, dtype=bool))

    scale = 1.0 + float(np.max(np.abs(b)))
    violation = float(np.max(a @ u_free - b))
    if violation <= tol * scale:
        u0 = _snap_feasible(u_free, a, b, scale) if violation > 0.0 else u_free
        return QpSolution(u=u0, status="optimal", iterations=0,
                          lam=np.zeros(m), active=np.zeros(m, dtype=bool),
                          max_violation=max(float(np.max(a @ u0 - b)), 0.0))

    # dual: min 0.5 lamT P lam + dT lam over lam >= 0, u = -Hinv (f + AT lam)
    hinv_at = cho_solve(chol, a.T)
    p = a @ hinv_at
    d = a @ hinv_f + b
    diag = np.diag(p).copy()
    skip = diag <= 1e-14 * max(1.0, float(diag.max()))

    lam = np.zeros(m)
    if lam0 is not None and np.asarray(lam0).shape == (m,):
        lam = np.maximum(np.asarray(lam0, dtype=float).copy(), 0.0)
        lam[skip] = 0.0

    def primal(lam_vec: np.ndarray) -> np.ndarray:
        return u_free - hinv_at @ lam_vec

    def objective(u: np.ndarray) -> float:
        return float(0.5 * u @ h @ u + f @ u)

    def eq_kkt(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """Minimize treating rows idx as equalities; None if singular."""
        r = idx.size
        if r == 0:
            return u_free, np.zeros(0)
        kkt = np.zeros((n + r, n + r))
        kkt[:n, :n] = h
        kkt[:n, n:] = a[idx].T
        kkt[n:, :n] = a[idx]
        try:
            sol = np.linalg.solve(kkt, np.concatenate([-f, b[idx]]))
        except np.linalg.LinAlgError:
            return None
        return sol[:n], sol[n:]

    def polish(lam_vec: np.ndarray) -> np.ndarray | None:
        """Exact solve on a lam-identified active set, if one is consistent.

        Multipliers that have not fully decayed yet can drag inactive rows
        into the guess, so several cut levels are tried, each also truncated
        to the n largest multipliers (an optimal active set of a strictly
        convex QP never needs more rows than variables).
        """
        lam_max = float(lam_vec.max(initial=0.0))
        cuts = [tol * (1.0 + lam_max)]
        if lam_max > 0.0:
            cuts += [1e-3 * lam_max, 1e-1 * lam_max]
        tried = set()
        for cut in cuts:
            idx = np.flatnonzero(lam_vec > cut)
            for cand in (idx, idx[np.argsort(-lam_vec[idx], kind="stable")][:n]):
                cand = np.sort(cand)
                key = cand.tobytes()
                if key in tried:
                    continue
                tried.add(key)
                out = eq_kkt(cand)
                if out is None:
                    continue
                u, nu = out
                if np.any(nu < -tol * scale):
                    continue
                if float(np.max(a @ u - b)) <= tol * scale:
                    return u
        return None

    def refine() -> np.ndarray | None:
        """Primal active-set iteration from scratch; exact but last-resort."""
        idx: list[int] = []
        for _ in range(3 * (m + 1)):
            out = eq_kkt(np.array(idx, dtype=int))
            if out is None:
                return None
            u, nu = out
            if nu.size and float(nu.min()) < -tol * scale:
                del idx[int(np.argmin(nu))]
                continue
            resid = a @ u - b
            resid[idx] = -np.inf
            worst = int(np.argmax(resid))
            if resid[worst] <= tol * scale:
                return u
            idx.append(worst)
        return None

    # Sweep until the multipliers go stationary or the polish validates.
    # A successful polish is a complete KKT certificate (stationary,
    # feasible, nonnegative multipliers, complementary by construction), so
    # it ends the solve as "optimal" outright. If max_iter passes without
    # any feasible iterate, keep sweeping up to 10x max_iter, then fall
    # back to the refinement; only a genuinely infeasible problem raises.
    best_u, best_obj = None, np.inf
    status, sweeps = "iteration_limit", max_iter
    it, limit, overtime = 0, max_iter, False
    while it < limit:
        it += 1
        delta = 0.0
        for i in range(m):
            if skip[i]:
                continue
            w = d[i] + p[i] @ lam - diag[i] * lam[i]
            new = max(0.0, -w / diag[i])
            delta = max(delta, abs(new - lam[i]))
            lam[i] = new
        u = primal(lam)
        if float(np.max(a @ u - b)) <= tol * scale:
            obj = objective(u)
            if obj < best_obj:
                best_obj, best_u = obj, u
        if delta <= tol * (1.0 + float(lam.max(initial=0.0))):
            status, sweeps = "optimal", it
            break
        if overtime or it % _POLISH_EVERY == 0 or it == max_iter:
            u = polish(lam)
            if u is not None:
                best_u, best_obj = u, objective(u)
                status, sweeps = "optimal", it
                break
            if overtime and best_u is not None:
                sweeps = it
                break
        if it >= max_iter and not overtime:
            if best_u is not None:
                sweeps = it
                break
            overtime, limit = True, 10 * max_iter

    if best_u is None:
        best_u = refine()
        if best_u is not None:
            best_obj, status = objective(best_u), "optimal"  # KKT-exact
    if best_u is None:
        raise ValueError("qp: no feasible point found (constraints inconsistent?)")

    if status == "optimal":
        polished = polish(lam)
        if polished is not None:
            obj = objective(polished)
            if obj <= best_obj + tol * (1.0 + abs(obj)):
                best_u, best_obj = polished, obj
    best_u = _snap_feasible(best_u, a, b, scale)
    active = lam > tol * (1.0 + float(lam.max(initial=0.0)))
    return QpSolution(
        u=best_u,
        status=status,
        iterations=sweeps,
        lam=lam,
        active=active,
        max_violation=max(float(np.max(a @ best_u - b)), 0.0),
    )
