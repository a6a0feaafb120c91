import itertools
import math

import numpy as np
import pytest

from hysopt.expr import ExprFunction, const, sum_exprs, var
from hysopt.nlp import Nlp, SolverOptions, solve

INF = float("inf")


def quadratic_objective(Q, c):
    """1/2 v'Qv + c'v as an expression function."""
    n = len(c)
    vs = [var(i, f"v{i}") for i in range(n)]
    terms = []
    for i in range(n):
        if c[i] != 0.0:
            terms.append(const(c[i]) * vs[i])
        for j in range(n):
            if Q[i, j] != 0.0:
                terms.append(const(0.5 * Q[i, j]) * vs[i] * vs[j])
    return ExprFunction([f"v{i}" for i in range(n)], [sum_exprs(terms)])


def linear_constraints(A):
    m, n = A.shape
    vs = [var(i, f"v{i}") for i in range(n)]
    rows = [
        sum_exprs([const(A[k, i]) * vs[i] for i in range(n) if A[k, i] != 0.0])
        for k in range(m)
    ]
    return ExprFunction([f"v{i}" for i in range(n)], rows)


def active_set_qp_oracle(Q, c, A_eq, b_eq, A_in, b_in, tol=1e-9):
    """Reference QP solver: enumerate all active sets of the inequalities,
    solve the corresponding equality-constrained KKT system, and keep the
    best primal-dual feasible candidate.  Exponential and dense: only for
    small test problems.
    """
    n = len(c)
    m_in = A_in.shape[0]
    best = None
    for active in itertools.chain.from_iterable(
        itertools.combinations(range(m_in), r) for r in range(m_in + 1)
    ):
        A_act = np.vstack([A_eq, A_in[list(active)]]) if len(active) else A_eq
        b_act = np.concatenate([b_eq, b_in[list(active)]]) if len(active) else b_eq
        ma = A_act.shape[0]
        K = np.zeros((n + ma, n + ma))
        K[:n, :n] = Q
        K[:n, n:] = A_act.T
        K[n:, :n] = A_act
        rhs = np.concatenate([-c, b_act])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        v = sol[:n]
        lam_act = sol[n + len(b_eq):]
        if np.any(A_in @ v > b_in + tol):
            continue
        if np.any(lam_act < -tol):
            continue
        obj = 0.5 * v @ Q @ v + c @ v
        if best is None or obj < best[1] - 1e-12:
            best = (v, obj)
    assert best is not None, "oracle found no optimum (problem infeasible?)"
    return best


def random_convex_qp(rng, n):
    """Random strictly convex QP with a handful of linear constraints."""
    M = rng.normal(size=(n, n))
    Q = M.T @ M + n * np.eye(n)
    c = rng.normal(size=n) * 2.0
    m_eq = rng.integers(0, min(3, n))
    m_in = rng.integers(2, 9)
    A_eq = rng.normal(size=(m_eq, n))
    v_feas = rng.normal(size=n) * 0.5
    b_eq = A_eq @ v_feas
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ v_feas + rng.uniform(0.1, 2.0, size=m_in)
    return Q, c, A_eq, b_eq, A_in, b_in


class TestSimpleProblems:
    def test_interior_optimum_with_box(self):
        # min (v-3)^2 on [0, 10]: unconstrained optimum is interior.
        f = ExprFunction.parse(["v"], ["(v-3)^2"])
        nlp = Nlp(f, ExprFunction(["v"], []), [0.0], [10.0], [], [])
        sol = solve(nlp, [5.0])
        assert sol.solved
        assert sol.v[0] == pytest.approx(3.0, abs=1e-7)

    def test_sphere_equality(self):
        # min v1+v2 on the unit circle: optimum at (-sqrt(.5), -sqrt(.5)).
        f = ExprFunction.parse(["v1", "v2"], ["v1 + v2"])
        g = ExprFunction.parse(["v1", "v2"], ["v1^2 + v2^2"])
        nlp = Nlp(f, g, [-INF, -INF], [INF, INF], [1.0], [1.0])
        sol = solve(nlp, [-1.0, -0.5])
        assert sol.solved
        r = -math.sqrt(0.5)
        assert sol.v == pytest.approx([r, r], abs=1e-7)

    def test_active_bound_with_multiplier(self):
        # min -v s.t. 0 <= v <= 2: active upper bound, multiplier 1.
        f = ExprFunction.parse(["v"], ["-v"])
        nlp = Nlp(f, ExprFunction(["v"], []), [0.0], [2.0], [], [])
        sol = solve(nlp, [1.0])
        assert sol.solved
        assert sol.v[0] == pytest.approx(2.0, abs=1e-7)
        assert sol.z_u[0] == pytest.approx(1.0, abs=1e-6)

    def test_inequality_row(self):
        # min (v1-2)^2 + (v2-2)^2 s.t. v1 + v2 <= 2: optimum (1, 1).
        f = ExprFunction.parse(["v1", "v2"], ["(v1-2)^2 + (v2-2)^2"])
        g = ExprFunction.parse(["v1", "v2"], ["v1 + v2"])
        nlp = Nlp(f, g, [-INF] * 2, [INF] * 2, [-INF], [2.0])
        sol = solve(nlp, [0.0, 0.0])
        assert sol.solved
        assert sol.v == pytest.approx([1.0, 1.0], abs=1e-7)
        assert sol.y[0] == pytest.approx(2.0, abs=1e-6)  # gradient balance

    def test_rosenbrock_unconstrained(self):
        f = ExprFunction.parse(["v1", "v2"], ["100*(v2 - v1^2)^2 + (1 - v1)^2"])
        nlp = Nlp(f, ExprFunction(["v1", "v2"], []), [-INF] * 2, [INF] * 2, [], [])
        sol = solve(nlp, [-1.2, 1.0])
        assert sol.solved
        assert sol.v == pytest.approx([1.0, 1.0], abs=1e-6)

    def test_infeasible_detected(self):
        # v >= 1 and v <= -1 cannot hold.
        f = ExprFunction.parse(["v"], ["v^2"])
        g = ExprFunction.parse(["v"], ["v", "v"])
        nlp = Nlp(f, g, [-INF], [INF], [1.0, -INF], [INF, -1.0])
        sol = solve(nlp, [0.0], SolverOptions(max_iter=150))
        assert sol.status in ("infeasible-detected", "max-iter")
        assert not sol.solved

    def test_max_iter_reported(self):
        f = ExprFunction.parse(["v"], ["(v-3)^2"])
        nlp = Nlp(f, ExprFunction(["v"], []), [-INF], [INF], [], [])
        sol = solve(nlp, [1e6], SolverOptions(max_iter=1))
        assert sol.status == "max-iter"


class TestStationarityReport:
    def test_residual_matches_recomputation(self):
        f = ExprFunction.parse(["v1", "v2"], ["(v1-1)^2 + v2^2 + v1*v2"])
        g = ExprFunction.parse(["v1", "v2"], ["v1 + 2*v2", "v1^2"])
        nlp = Nlp(f, g, [-5.0, -5.0], [5.0, 5.0], [1.0, -INF], [1.0, 4.0])
        sol = solve(nlp, [0.5, 0.5])
        assert sol.solved
        d = nlp.derivatives()
        grad = d.gradient(list(sol.v))
        J = d.jacobian(list(sol.v)).toarray()
        stat = grad + J.T @ sol.y - sol.z_l + sol.z_u
        assert abs(np.max(np.abs(stat)) - sol.residuals["stationarity"]) <= 1e-10


class TestQpBattery:
    def test_twenty_random_qps_match_active_set_oracle(self):
        rng = np.random.default_rng(12345)
        for trial in range(20):
            n = int(rng.integers(2, 31))
            Q, c, A_eq, b_eq, A_in, b_in = random_convex_qp(rng, n)
            v_oracle, obj_oracle = active_set_qp_oracle(Q, c, A_eq, b_eq, A_in, b_in)

            objective = quadratic_objective(Q, c)
            A = np.vstack([A_eq, A_in])
            cons = linear_constraints(A)
            c_lb = np.concatenate([b_eq, np.full(len(b_in), -INF)])
            c_ub = np.concatenate([b_eq, b_in])
            nlp = Nlp(objective, cons, [-INF] * n, [INF] * n, c_lb, c_ub)
            sol = solve(nlp, np.zeros(n))
            assert sol.solved, f"trial {trial}: {sol.status}"
            assert np.max(np.abs(sol.v - v_oracle)) <= 1e-6, f"trial {trial}"
            assert sol.residuals["stationarity"] <= 1e-8
            assert sol.residuals["feasibility"] <= 1e-8

    def test_iteration_log(self, tmp_path):
        f = ExprFunction.parse(["v"], ["(v-3)^2"])
        nlp = Nlp(f, ExprFunction(["v"], []), [0.0], [10.0], [], [])
        log = tmp_path / "iters.csv"
        sol = solve(nlp, [5.0], SolverOptions(log_path=str(log)))
        assert sol.solved
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "iterate,mu,stationarity,feasibility,alpha,delta"
        assert len(lines) == sol.iterations + 1
