import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fringe_epec.lcp import LcpProblem, RayTermination, SingularBasis, lemke_solve, residuals


def test_trivial_nonnegative_q():
    s = lemke_solve(LcpProblem(np.eye(3), np.array([1.0, 2.0, 0.0])))
    assert np.allclose(s.z, 0.0)
    assert s.pivots == 0


def test_two_by_two_known_solution():
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    q = np.array([-5.0, -6.0])
    s = lemke_solve(LcpProblem(M, q))
    assert np.allclose(s.z, [4 / 3, 7 / 3], atol=1e-10)
    assert np.allclose(s.w, 0.0, atol=1e-10)


def test_mixed_free_variable():
    # z0 free with 0 = z0 - 1 ; 0 <= z1 _|_ z1 - z0 + 3 >= 0
    M = np.array([[1.0, 0.0], [-1.0, 1.0]])
    q = np.array([-1.0, 3.0])
    s = lemke_solve(LcpProblem(M, q, free_set=(0,)))
    assert np.allclose(s.z, [1.0, 0.0], atol=1e-12)
    assert s.eq_residual <= 1e-12


def test_ray_termination():
    with pytest.raises(RayTermination):
        lemke_solve(LcpProblem(np.array([[-1.0]]), np.array([-1.0])))


def test_singular_free_block():
    M = np.array([[0.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularBasis):
        lemke_solve(LcpProblem(M, np.array([1.0, -1.0]), free_set=(0,)))


def test_bad_shapes():
    with pytest.raises(ValueError):
        LcpProblem(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        LcpProblem(np.eye(2), np.zeros(2), free_set=(5,))


def test_residuals_definition():
    p = LcpProblem(np.eye(2), np.array([-1.0, 1.0]))
    comp, eq, bound = residuals(p, np.array([1.0, 0.5]))
    # w = (0, 1.5): min(z, w) = (0, 0.5)
    assert (comp, eq, bound) == (0.5, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 12))
def test_random_positive_semidefinite(seed, n):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(n, n))
    S = rng.normal(size=(n, n))
    M = R @ R.T + 0.01 * np.eye(n) + (S - S.T)  # PSD plus skew: solvable for any q
    q = rng.normal(size=n) * 5
    s = lemke_solve(LcpProblem(M, q))
    scale = 1 + np.abs(q).max()
    assert s.comp_residual <= 1e-6 * scale
    assert s.bound_violation <= 1e-6 * scale
    assert np.max(np.abs(s.z * s.w)) <= 1e-6 * scale * (1 + np.abs(s.z).max())


def test_regularisation_selects_symmetric_split():
    # two identical firms sharing one unit of demand: any split solves it
    M = np.ones((2, 2))
    q = np.array([-1.0, -1.0])
    s = lemke_solve(LcpProblem(M, q), regularization=1e-6)
    assert np.allclose(s.z, [0.5, 0.5], atol=1e-6)
    assert s.comp_residual <= 1e-9
