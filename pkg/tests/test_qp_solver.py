"""QP solver tests.

The main oracle solves each random problem by exhaustive active-set
enumeration: every subset of constraints is treated as equalities, the KKT
system is solved directly, and the best primal-and-dual-feasible candidate
wins. For strictly convex QPs this provably contains the optimum.
"""

import itertools

import numpy as np
import pytest

from doasim.qp_solver import QpProblem, QpSolution, qp_solve


def stacked(prob: QpProblem):
    """Constraints as one A u <= b block, same row order the solver uses."""
    n = np.asarray(prob.f).size
    rows_a, rows_b = [], []
    if prob.a_ineq is not None:
        rows_a.append(np.atleast_2d(prob.a_ineq))
        rows_b.append(np.atleast_1d(prob.b_ineq))
    if prob.ub is not None:
        rows_a.append(np.eye(n))
        rows_b.append(np.broadcast_to(prob.ub, (n,)))
    if prob.lb is not None:
        rows_a.append(-np.eye(n))
        rows_b.append(-np.broadcast_to(prob.lb, (n,)))
    if not rows_a:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows_a), np.concatenate(rows_b)


def enumeration_oracle(prob: QpProblem):
    """Brute-force optimum over all active-set hypotheses."""
    h = np.asarray(prob.h, dtype=float)
    f = np.asarray(prob.f, dtype=float).ravel()
    n = f.size
    a, b = stacked(prob)
    m = a.shape[0]
    best_u, best_obj = None, np.inf
    for r in range(m + 1):
        for subset in itertools.combinations(range(m), r):
            idx = list(subset)
            kkt = np.zeros((n + r, n + r))
            kkt[:n, :n] = h
            if r:
                kkt[:n, n:] = a[idx].T
                kkt[n:, :n] = a[idx]
            rhs = np.concatenate([-f, b[idx]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            u, nu = sol[:n], sol[n:]
            if np.any(nu < -1e-9):  # multipliers must be nonneg
                continue
            if m and np.max(a @ u - b) > 1e-9:
                continue
            obj = 0.5 * u @ h @ u + f @ u
            if obj < best_obj - 1e-15:
                best_obj, best_u = obj, u
    return best_u, best_obj


def objective(prob: QpProblem, u: np.ndarray) -> float:
    h = np.asarray(prob.h, dtype=float)
    f = np.asarray(prob.f, dtype=float).ravel()
    return 0.5 * u @ h @ u + f @ u


def random_problem(rng: np.random.Generator, n: int, with_general: bool = True) -> QpProblem:
    m_root = rng.normal(size=(n, n))
    h = m_root.T @ m_root + 0.1 * np.eye(n)
    f = rng.normal(scale=2.0, size=n)
    lo = rng.uniform(-2.0, 0.0, size=n)
    hi = lo + rng.uniform(0.1, 2.5, size=n)
    a_ineq = b_ineq = None
    if with_general:
        k = int(rng.integers(1, 3))
        a_ineq = rng.normal(size=(k, n))
        anchor = (lo + hi) / 2.0  # keep the problem feasible by construction
        b_ineq = a_ineq @ anchor + rng.uniform(0.01, 1.0, size=k)
    return QpProblem(h=h, f=f, lb=lo, ub=hi, a_ineq=a_ineq, b_ineq=b_ineq)


class TestKnownSolutions:
    def test_unconstrained_interior_minimum(self):
        prob = QpProblem(
            h=np.diag([2.0, 3.0]),
            f=np.array([-2.0, -3.0]),
            lb=np.full(2, -10.0),
            ub=np.full(2, 10.0),
        )
        sol = qp_solve(prob)
        np.testing.assert_allclose(sol.u, [1.0, 1.0], atol=1e-8)
        assert sol.status == "optimal"
        assert not sol.active.any()

    def test_no_constraints_at_all(self):
        sol = qp_solve(QpProblem(h=np.array([[4.0]]), f=np.array([-2.0])))
        np.testing.assert_allclose(sol.u, [0.5], atol=1e-12)
        assert sol.status == "optimal"

    def test_scalar_projects_to_upper_bound(self):
        # min 0.5 u^2 - u on [0, 0.5]: free minimum at 1 clips to 0.5
        prob = QpProblem(
            h=np.array([[1.0]]), f=np.array([-1.0]),
            lb=np.array([0.0]), ub=np.array([0.5]),
        )
        sol = qp_solve(prob)
        assert sol.u[0] == pytest.approx(0.5, abs=1e-8)
        assert sol.active[0]  # row order: ub then lb here (no general rows)
        assert not sol.active[1]

    def test_general_row_binds(self):
        # min over square [-1,1]^2 of distance to (2, 0) s.t. u1 + u2 <= 0.5
        prob = QpProblem(
            h=np.eye(2) * 2.0, f=np.array([-4.0, 0.0]),
            lb=np.full(2, -1.0), ub=np.full(2, 1.0),
            a_ineq=np.array([[1.0, 1.0]]), b_ineq=np.array([0.5]),
        )
        sol = qp_solve(prob)
        expected, _ = enumeration_oracle(prob)
        np.testing.assert_allclose(sol.u, expected, atol=1e-7)
        assert sol.active[0]  # the general row


class TestEnumerationOracle:
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(100 + n)
        for trial in range(70):
            prob = random_problem(rng, n, with_general=bool(trial % 2))
            sol = qp_solve(prob)
            expected_u, expected_obj = enumeration_oracle(prob)
            assert expected_u is not None, "oracle says infeasible?"
            assert sol.status == "optimal"
            assert objective(prob, sol.u) == pytest.approx(expected_obj, abs=1e-6)
            np.testing.assert_allclose(sol.u, expected_u, atol=1e-5)


class TestProperties:
    def test_beats_random_feasible_points(self):
        rng = np.random.default_rng(5)
        prob = random_problem(rng, 3)
        sol = qp_solve(prob)
        a, b = stacked(prob)
        count = 0
        while count < 1000:
            u = rng.uniform(prob.lb, prob.ub)
            if np.max(a @ u - b) > 0.0:
                continue
            count += 1
            assert objective(prob, sol.u) <= objective(prob, u) + 1e-9

    def test_feasible_even_at_tiny_iteration_cap(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            prob = random_problem(rng, 3)
            sol = qp_solve(prob, max_iter=2)
            a, b = stacked(prob)
            scale = 1.0 + float(np.max(np.abs(b)))
            assert np.max(a @ sol.u - b) <= 1e-8 * scale
            assert sol.status in ("optimal", "iteration_limit")

    def test_removing_constraints_never_hurts(self):
        rng = np.random.default_rng(23)
        for _ in range(30):
            prob = random_problem(rng, 2)
            with_obj = objective(prob, qp_solve(prob).u)
            relaxed = QpProblem(h=prob.h, f=prob.f, lb=prob.lb, ub=prob.ub)
            relaxed_obj = objective(relaxed, qp_solve(relaxed).u)
            assert relaxed_obj <= with_obj + 1e-9

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(9)
        prob = random_problem(rng, 3)
        a = qp_solve(prob)
        b = qp_solve(prob)
        assert a.u.tobytes() == b.u.tobytes()
        assert a.iterations == b.iterations

    def test_warm_start_same_answer(self):
        rng = np.random.default_rng(31)
        prob = random_problem(rng, 3)
        cold = qp_solve(prob)
        warm = qp_solve(prob, lam0=cold.lam)
        np.testing.assert_allclose(warm.u, cold.u, atol=1e-7)
        assert warm.iterations <= cold.iterations

    def test_kkt_stationarity_at_solution(self):
        rng = np.random.default_rng(41)
        prob = random_problem(rng, 3)
        sol = qp_solve(prob)
        a, _ = stacked(prob)
        residual = prob.h @ sol.u + prob.f + a.T @ sol.lam
        np.testing.assert_allclose(residual, np.zeros(3), atol=1e-6)


class TestErrors:
    def test_crossed_bounds_raise(self):
        prob = QpProblem(
            h=np.eye(2), f=np.zeros(2),
            lb=np.array([1.0, 0.0]), ub=np.array([0.0, 1.0]),
        )
        with pytest.raises(ValueError, match="lb > ub"):
            qp_solve(prob)

    def test_indefinite_hessian_raises(self):
        prob = QpProblem(h=np.array([[1.0, 0.0], [0.0, -5.0]]), f=np.zeros(2))
        with pytest.raises(ValueError, match="positive definite"):
            qp_solve(prob)

    def test_semidefinite_hessian_is_regularized(self):
        # rank-1 Hessian: plain Cholesky fails, the ridge rescues it
        h = np.outer([1.0, 1.0], [1.0, 1.0])
        prob = QpProblem(
            h=h, f=np.array([-1.0, -1.0]),
            lb=np.zeros(2), ub=np.ones(2),
        )
        sol = qp_solve(prob)
        assert sol.status == "optimal"
        assert np.all(sol.u <= 1.0 + 1e-8) and np.all(sol.u >= -1e-8)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="h must be"):
            qp_solve(QpProblem(h=np.eye(3), f=np.zeros(2)))
