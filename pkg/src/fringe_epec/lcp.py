"""Mixed linear complementarity problems and Lemke's method.

Problem: find ``z`` with ``w = q + M z`` such that for every complementarity
index ``0 <= z_i  _|_  w_i >= 0`` and for every free index ``w_i = 0`` with
``z_i`` unrestricted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fringe_epec.numerics import SingularMatrix, solve_linear

log = logging.getLogger(__name__)


class RayTermination(RuntimeError):
    """Lemke's method ended on a secondary ray; no solution was found."""


class SingularBasis(RuntimeError):
    pass


@dataclass
class LcpProblem:
    M: np.ndarray
    q: np.ndarray
    free_set: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.M = np.asarray(self.M, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = len(self.q)
        if self.M.shape != (n, n):
            raise ValueError(f"M must be {n}x{n}, got {self.M.shape}")
        self.free_set = tuple(sorted(set(int(i) for i in self.free_set)))
        if any(i < 0 or i >= n for i in self.free_set):
            raise ValueError("free_set index out of range")

    @property
    def n(self) -> int:
        return len(self.q)

    @property
    def comp_set(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[list(self.free_set)] = False
        return np.flatnonzero(mask)


@dataclass
class LcpSolution:
    z: np.ndarray
    w: np.ndarray
    comp_residual: float
    eq_residual: float
    bound_violation: float = 0.0
    pivots: int = 0
    perturbed: bool = False
    basis: tuple[int, ...] = field(default=(), repr=False)


def residuals(p: LcpProblem, z: np.ndarray) -> tuple[float, float, float]:
    """``(comp_residual, eq_residual, bound_violation)`` of a candidate ``z``.

    comp_residual = max_i max(0, min(z_i, w_i)) over complementarity indices;
    eq_residual = max |w_i| over free indices; bound_violation = largest
    negative part of any ``z_i`` or ``w_i`` over complementarity indices.
    """
    z = np.asarray(z, dtype=float)
    w = p.q + p.M @ z
    c = p.comp_set
    comp = float(np.max(np.maximum(0.0, np.minimum(z[c], w[c])), initial=0.0))
    eq = float(np.max(np.abs(w[list(p.free_set)]), initial=0.0))
    bound = float(max(0.0, -np.min(z[c], initial=0.0), -np.min(w[c], initial=0.0)))
    return comp, eq, bound


def _equilibrate(M: np.ndarray, passes: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Ruiz row/column scaling so that the largest entry per row and column is ~1."""
    n = M.shape[0]
    r = np.ones(n)
    c = np.ones(n)
    A = np.abs(M)
    for _ in range(passes):
        S = A * r[:, None] * c[None, :]
        rm = S.max(axis=1)
        cm = S.max(axis=0)
        r /= np.sqrt(np.where(rm > 0, rm, 1.0))
        c /= np.sqrt(np.where(cm > 0, cm, 1.0))
    return r, c


def _lemke_core(M: np.ndarray, q: np.ndarray, max_pivots: int, debug: bool):
    """Lemke's method with covering vector of ones and lexicographic ratio test.

    Returns ``(z, basis, pivots)``; raises RayTermination.
    """
    n = len(q)
    if np.all(q >= 0):
        return np.zeros(n), tuple(range(n)), 0
    # columns: w (0..n-1), z (n..2n-1), z0 (2n), rhs (2n+1)
    T = np.zeros((n, 2 * n + 2))
    T[:, :n] = np.eye(n)
    T[:, n : 2 * n] = -M
    T[:, 2 * n] = -1.0
    T[:, 2 * n + 1] = q
    basis = list(range(n))
    z0 = 2 * n
    rhs = 2 * n + 1
    eps = 1e-11 * max(1.0, np.abs(M).max())
    seen: set[tuple[int, ...]] = set()

    def pivot(r: int, col: int) -> None:
        T[r] /= T[r, col]
        colv = T[:, col].copy()
        colv[r] = 0.0
        T[:] -= np.outer(colv, T[r])
        basis[r] = col

    def lexmin(rows: np.ndarray, col: np.ndarray) -> int:
        cand = rows
        for k in [rhs] + list(range(n)):
            ratios = T[cand, k] / col[cand]
            lo = ratios.min()
            tol = 1e-12 * max(1.0, abs(lo))
            cand = cand[ratios <= lo + tol]
            if len(cand) == 1:
                break
        return int(cand[0])

    # z0 enters; leaving row is the lexicographic minimum of q/1 with sign flipped
    col = -T[:, z0]
    r = lexmin(np.arange(n), col)
    leaving = basis[r]
    pivot(r, z0)
    entering = leaving + n if leaving < n else leaving - n
    for it in range(1, max_pivots + 1):
        col = T[:, entering]
        # relative pivot tolerance: a tiny element next to large ones in the
        # same column is rounding noise and would wreck the tableau
        rows = np.flatnonzero(col > max(eps, 1e-9 * np.abs(col).max()))
        if len(rows) == 0:
            raise RayTermination(f"secondary ray after {it} pivots")
        r = lexmin(rows, col)
        leaving = basis[r]
        pivot(r, entering)
        if debug:
            sig = tuple(sorted(basis))
            assert sig not in seen, "Lemke revisited a basis"
            seen.add(sig)
        if leaving == z0:
            z = np.zeros(n)
            for i, b in enumerate(basis):
                if n <= b < 2 * n:
                    z[b - n] = T[i, rhs]
            return z, tuple(basis), it + 1
        entering = leaving + n if leaving < n else leaving - n
    raise RayTermination(f"pivot limit {max_pivots} reached")


def _refine(M: np.ndarray, q: np.ndarray, z: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Correct ``z`` so the rows of the basic set ``S`` hold exactly.

    The correction is the minimum-norm solution of the basis system, so a
    singular basis (possible after dropping a regularization) keeps the
    selection made by pivoting.
    """
    if len(S) == 0:
        return z
    MS = M[np.ix_(S, S)]
    out = z.copy()
    for _ in range(3):
        resid = -q[S] - MS @ out[S]
        try:
            dz = solve_linear(MS, resid)
        except (SingularMatrix, np.linalg.LinAlgError):
            cs = np.abs(MS).max(axis=0)
            cs = np.where(cs > 0, cs, 1.0)
            dz = np.linalg.lstsq(MS / cs, resid, rcond=1e-13)[0] / cs
        zs = out[S] + dz
        if not np.all(np.isfinite(zs)) or np.any(zs < -1e-9 * (1 + np.abs(zs).max())):
            break
        cand = out.copy()
        cand[S] = np.maximum(zs, 0.0)
        if _violation(M, q, cand) > _violation(M, q, out):
            break
        out = cand
    return out


def _crossover(M: np.ndarray, q: np.ndarray, z: np.ndarray, S: np.ndarray, rounds: int = 5) -> np.ndarray:
    """Move indices with ``z = 0`` and ``w < 0`` into the support and re-solve.

    At a degenerate end point the pivoted basis can be right only up to
    rounding; a unit that should carry a tiny positive value is left at zero
    with a slightly negative ``w``.  Kept only while the violation drops.
    """
    S = set(int(i) for i in S)
    for _ in range(rounds):
        w = q + M @ z
        neg = [i for i in np.flatnonzero(w < 0) if i not in S]
        if not neg:
            break
        S2 = np.array(sorted(S | set(neg)), dtype=int)
        cand = _refine(M, q, z, S2)
        if _violation(M, q, cand) >= _violation(M, q, z):
            break
        z, S = cand, set(S2.tolist())
    return z


def _violation(M: np.ndarray, q: np.ndarray, z: np.ndarray) -> float:
    w = q + M @ z
    return float(max(np.abs(np.minimum(z, w)).max(initial=0.0), -w.min(initial=0.0), -z.min(initial=0.0)))


def lemke_solve(
    p: LcpProblem,
    max_pivots: int | None = None,
    debug: bool = False,
    regularization: float | np.ndarray = 0.0,
    retry_perturbed: bool = True,
) -> LcpSolution:
    """Solve a (mixed) LCP by Lemke's complementary pivoting.

    Free variables are eliminated first with their equality rows (a Schur
    complement); the remaining standard LCP is equilibrated and pivoted with
    lexicographic tie-breaking.  On a secondary ray the problem is retried
    once with ``q`` shifted by ``1e-7`` (in scaled units) unless
    ``retry_perturbed`` is false.

    ``regularization`` (scalar or per-index, in scaled units, indices
    counted over complementarity variables) pivots on ``M + diag(eps)``.  For a monotone ``M`` this selects, as
    ``eps -> 0``, the least-norm solution among many; the final support
    system is then re-solved with the exact ``M``.
    """
    n = p.n
    F = list(p.free_set)
    Cidx = p.comp_set
    if F:
        MFF = p.M[np.ix_(F, F)]
        try:
            inv_q = solve_linear(MFF, p.q[F])
            inv_M = np.column_stack([solve_linear(MFF, p.M[F, j]) for j in Cidx]) if len(Cidx) else np.zeros((len(F), 0))
        except SingularMatrix as exc:
            raise SingularBasis("free-variable block is singular") from exc
        Mc = p.M[np.ix_(Cidx, Cidx)] - p.M[np.ix_(Cidx, F)] @ inv_M
        qc = p.q[Cidx] - p.M[np.ix_(Cidx, F)] @ inv_q
    else:
        Mc, qc = p.M, p.q
        inv_q = inv_M = None

    m = len(Cidx)
    limit = max_pivots or max(100, 50 * m)
    r, c = _equilibrate(Mc) if m else (np.ones(0), np.ones(0))
    Ms = Mc * r[:, None] * c[None, :]
    reg = np.broadcast_to(np.asarray(regularization, dtype=float), (m,))
    if np.any(reg > 0):
        Ms = Ms + np.diag(reg)
    qs = qc * r
    qscale = max(1.0, np.abs(qs).max(initial=0.0))
    perturbed = False
    try:
        zs, basis, piv = _lemke_core(Ms, qs / qscale, limit, debug)
    except RayTermination:
        if not retry_perturbed:
            raise
        log.debug("ray termination, retrying with perturbed q")
        perturbed = True
        zs, basis, piv = _lemke_core(Ms, qs / qscale + 1e-7, limit, debug)
    S = np.array(sorted(b - m for b in basis if m <= b < 2 * m), dtype=int)
    zc = _crossover(Mc, qc, _refine(Mc, qc, zs * qscale * c, S), S)

    z = np.zeros(n)
    z[Cidx] = zc
    if F:
        z[F] = -(inv_q + inv_M @ zc)
    w = p.q + p.M @ z
    comp, eq, bound = residuals(p, z)
    return LcpSolution(z, w, comp, eq, bound, piv, perturbed, basis)
