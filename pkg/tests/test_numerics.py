import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fringe_epec.numerics import (
    NlpOptions,
    NlpProblem,
    NonConvex,
    QpProblem,
    SingularMatrix,
    SolveStatus,
    finite_diff_check,
    qp_kkt_residual,
    solve_linear,
    solve_nlp_local,
    solve_qp,
)


def test_solve_linear_identity_and_diagonal():
    b = np.array([3.0, -1.0, 2.5])
    assert np.allclose(solve_linear(np.eye(3), b), b)
    assert np.allclose(solve_linear(np.diag([2.0, 4.0]), np.array([2.0, 8.0])), [1.0, 2.0])


def test_solve_linear_random_recovery():
    rng = np.random.default_rng(3)
    for _ in range(20):
        A = rng.normal(size=(20, 20)) + 20 * np.eye(20)
        x = rng.normal(size=20)
        b = A @ x
        got = solve_linear(A, b)
        assert np.abs(A @ got - b).max() <= 1e-8 * (1 + np.abs(b).max())


def test_solve_linear_singular():
    with pytest.raises(SingularMatrix):
        solve_linear(np.array([[1.0, 2.0], [2.0, 4.0]]), np.array([1.0, 2.0]))


def test_qp_single_active_row():
    p = QpProblem(np.array([[2.0]]), np.zeros(1), ineq_matrix=np.array([[1.0]]), ineq_rhs=np.array([3.0]))
    x, duals, rep = solve_qp(p)
    assert rep.status is SolveStatus.OPTIMAL
    assert x[0] == pytest.approx(3.0, abs=1e-8)
    assert duals.ineq[0] == pytest.approx(6.0, abs=1e-6)


def test_qp_single_active_bound():
    p = QpProblem(np.array([[2.0]]), np.zeros(1), lower=np.array([3.0]))
    x, duals, rep = solve_qp(p)
    assert x[0] == pytest.approx(3.0, abs=1e-8)
    assert duals.lower[0] == pytest.approx(6.0, abs=1e-6)


def test_qp_symmetric_equality():
    p = QpProblem(2 * np.eye(2), np.array([-2.0, -2.0]), eq_matrix=np.ones((1, 2)), eq_rhs=np.array([1.0]))
    x, _, rep = solve_qp(p)
    assert np.allclose(x, [0.5, 0.5], atol=1e-8)
    assert rep.kkt_residual <= 1e-7


def test_qp_infeasible():
    p = QpProblem(np.eye(1), np.zeros(1), lower=np.array([1.0]), upper=np.array([2.0]),
                  ineq_matrix=np.array([[-1.0]]), ineq_rhs=np.array([-0.5]))
    _, _, rep = solve_qp(p)
    assert rep.status is SolveStatus.INFEASIBLE


def test_qp_nonconvex_rejected():
    with pytest.raises(NonConvex):
        solve_qp(QpProblem(np.diag([1.0, -1.0]), np.zeros(2), lower=np.zeros(2), upper=np.ones(2)))


def _enumerate_active_sets(H, c, G, h):
    """Best KKT point over all active subsets of ``G x >= h`` (oracle)."""
    n, m = len(c), len(h)
    best, best_x = np.inf, None
    for k in range(m + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            K = np.block([[H, -G[S].T], [G[S], np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-c, h[S]]) if k else -c
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, mu = sol[:n], sol[n:]
            if np.all(G @ x >= h - 1e-9) and np.all(mu >= -1e-9):
                f = 0.5 * x @ H @ x + c @ x
                if f < best:
                    best, best_x = f, x
    return best, best_x


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_qp_matches_active_set_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = 5, 4
    R = rng.normal(size=(n, n))
    H = R @ R.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    h = G @ x0 - rng.uniform(0, 1, size=m)  # x0 is strictly feasible
    best, bx = _enumerate_active_sets(H, c, G, h)
    x, duals, rep = solve_qp(QpProblem(H, c, ineq_matrix=G, ineq_rhs=h))
    assert rep.status is SolveStatus.OPTIMAL
    assert 0.5 * x @ H @ x + c @ x == pytest.approx(best, rel=1e-7, abs=1e-7)
    assert np.allclose(x, bx, atol=1e-6)
    res = qp_kkt_residual(QpProblem(H, c, ineq_matrix=G, ineq_rhs=h), x, duals)
    assert max(res.values()) <= 1e-7


def test_nlp_unconstrained_quadratic():
    p = NlpProblem(1, lambda x: (float((x[0] - 2) ** 2), np.array([2 * (x[0] - 2)])))
    x, rep = solve_nlp_local(p, np.zeros(1))
    assert rep.ok and x[0] == pytest.approx(2.0, abs=1e-6)


def test_nlp_bilinear_symmetric_stationary_point():
    p = NlpProblem(
        2,
        lambda x: (float(x[0] * x[1]), np.array([x[1], x[0]])),
        lambda x: (np.array([x[0] + x[1] - 2.0]), np.ones((1, 2))),
        lower=np.zeros(2),
    )
    x, rep = solve_nlp_local(p, np.array([1.0, 1.0]))
    assert rep.ok
    assert rep.kkt_residual <= 1e-6
    assert np.allclose(x, [1.0, 1.0], atol=1e-6) or min(x) <= 1e-6


def test_nlp_stays_in_bounds():
    p = NlpProblem(
        3,
        lambda x: (float(np.sum((x + 1) ** 2)), 2 * (x + 1)),
        lower=np.zeros(3),
        upper=np.full(3, 5.0),
    )
    x, rep = solve_nlp_local(p, np.array([4.0, 0.5, 2.0]))
    assert rep.ok
    assert np.all(x >= -1e-9) and np.all(x <= 5 + 1e-9)
    assert np.allclose(x, 0.0, atol=1e-8)


def test_nlp_iteration_limit_reported():
    p = NlpProblem(
        2,
        lambda x: (float(x[0] * x[1]), np.array([x[1], x[0]])),
        lambda x: (np.array([x[0] ** 2 + x[1] ** 2 - 1.0]), np.array([[2 * x[0], 2 * x[1]]])),
    )
    _, rep = solve_nlp_local(p, np.array([3.0, -0.2]), NlpOptions(max_outer=1, max_inner=1))
    assert rep.status is SolveStatus.ITERATION_LIMIT


def test_finite_diff_on_exact_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    assert finite_diff_check(lambda v: (float(v @ v), 2 * v), x) <= 1e-6


def test_finite_diff_detects_wrong_gradient():
    x = np.ones(3)
    assert finite_diff_check(lambda v: (float(v @ v), v), x) > 0.1
