"""Dense numerical kernels shared by the market models.

* :func:`solve_linear` - LU solve with an explicit singularity test.
* :func:`solve_qp` - convex QP (interior point via Clarabel, followed by an
  active-set polish that re-solves the KKT system of the detected active set).
* :func:`solve_nlp_local` - augmented Lagrangian with bound-constrained
  quasi-Newton inner solves (L-BFGS-B).
* :func:`finite_diff_check` - central-difference gradient check.

QP sign convention: minimise ``0.5 x'Hx + c'x`` subject to ``A x = b`` (duals
``eq``, free), ``G x >= h`` (duals ``ineq`` >= 0) and ``lower <= x <= upper``
(duals ``lower``/``upper`` >= 0), so that at a solution

    H x + c - A'eq - G'ineq - lower + upper = 0.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import clarabel
import numpy as np
import scipy.linalg as sla
from scipy.optimize import lsq_linear
import scipy.optimize as sopt
import scipy.sparse as sp


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-7
    stationarity: float = 1e-6
    complementarity: float = 1e-7
    qp_kkt: float = 1e-7


TOL = Tolerances()


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_FAILURE = "numerical_failure"


class SingularMatrix(np.linalg.LinAlgError):
    pass


class NonConvex(ValueError):
    pass


@dataclass
class SolveReport:
    status: SolveStatus
    objective: float = math.nan
    kkt_residual: float = math.inf
    iterations: int = 0
    tolerances: Tolerances = TOL
    flags: set[str] = field(default_factory=set)
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


# --------------------------------------------------------------------------
# linear algebra


def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` by partial-pivot LU with one refinement step."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    norm = np.abs(A).sum(axis=1).max() if A.size else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=True)
    if norm == 0 or np.min(np.abs(np.diag(lu))) < 1e-12 * norm:
        raise SingularMatrix("pivot below 1e-12 * ||A||_inf")
    x = sla.lu_solve((lu, piv), b)
    r = b - A @ x
    x = x + sla.lu_solve((lu, piv), r)
    return x


# --------------------------------------------------------------------------
# quadratic programming


@dataclass
class QpProblem:
    hessian: np.ndarray
    linear: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    ineq_matrix: np.ndarray | None = None  # rows g with g x >= h
    ineq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    constant: float = 0.0

    def __post_init__(self) -> None:
        n = len(self.linear)
        self.hessian = np.asarray(self.hessian, dtype=float).reshape(n, n)
        self.linear = np.asarray(self.linear, dtype=float)
        self.eq_matrix = _mat(self.eq_matrix, n)
        self.eq_rhs = _vec(self.eq_rhs, self.eq_matrix.shape[0])
        self.ineq_matrix = _mat(self.ineq_matrix, n)
        self.ineq_rhs = _vec(self.ineq_rhs, self.ineq_matrix.shape[0])
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        asym = np.abs(self.hessian - self.hessian.T).max(initial=0.0)
        if asym > 1e-10 * max(1.0, np.abs(self.hessian).max(initial=0.0)):
            raise ValueError("hessian must be symmetric")

    @property
    def n(self) -> int:
        return len(self.linear)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear @ x + self.constant)


def _mat(m, n) -> np.ndarray:
    if m is None:
        return np.zeros((0, n))
    m = np.asarray(m, dtype=float)
    return m.reshape(-1, n)


def _vec(v, m) -> np.ndarray:
    if v is None:
        return np.zeros(m)
    v = np.asarray(v, dtype=float).reshape(-1)
    if len(v) != m:
        raise ValueError("right-hand side length does not match its matrix")
    return v


@dataclass
class QpDuals:
    eq: np.ndarray
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def check_convexity(H: np.ndarray) -> float:
    """Smallest eigenvalue of ``H``; raises :class:`NonConvex` if clearly negative."""
    if H.size == 0:
        return 0.0
    lam = float(np.linalg.eigvalsh(H)[0])
    if lam < -1e-6 * max(1.0, np.abs(H).max()):
        raise NonConvex(f"hessian has eigenvalue {lam:.3g}")
    return lam


def _row_violation(p: QpProblem, x: np.ndarray) -> float:
    """Largest constraint-row violation, each row relative to its own magnitude."""
    viol = 0.0
    ax = np.abs(x)
    if p.eq_matrix.shape[0]:
        r = np.abs(p.eq_matrix @ x - p.eq_rhs) / (1.0 + np.abs(p.eq_rhs) + np.abs(p.eq_matrix) @ ax)
        viol = max(viol, float(r.max()))
    if p.ineq_matrix.shape[0]:
        r = np.maximum(p.ineq_rhs - p.ineq_matrix @ x, 0.0) / (1.0 + np.abs(p.ineq_rhs) + np.abs(p.ineq_matrix) @ ax)
        viol = max(viol, float(r.max()))
    return viol


def qp_kkt_residual(p: QpProblem, x: np.ndarray, d: QpDuals) -> dict[str, float]:
    """Scaled primal, dual and complementarity residuals of a QP point."""
    Hx = p.hessian @ x
    grad = Hx + p.linear
    r = grad - p.eq_matrix.T @ d.eq - p.ineq_matrix.T @ d.ineq - d.lower + d.upper
    scale = 1.0 + max(np.abs(Hx).max(initial=0), np.abs(p.linear).max(initial=0))
    stat = np.abs(r).max(initial=0.0) / scale

    xs = 1.0 + np.abs(x).max(initial=0.0)
    viol = _row_violation(p, x)
    slack = p.ineq_matrix @ x - p.ineq_rhs
    lo = np.isfinite(p.lower)
    up = np.isfinite(p.upper)
    if lo.any():
        viol = max(viol, max(0.0, (p.lower[lo] - x[lo]).max()) / xs)
    if up.any():
        viol = max(viol, max(0.0, (x[up] - p.upper[up]).max()) / xs)

    dual_neg = 0.0
    for v in (d.ineq, d.lower, d.upper):
        if len(v):
            dual_neg = max(dual_neg, max(0.0, -v.min()))
    dual_neg /= scale

    comp = 0.0
    fscale = 1.0 + abs(float(0.5 * x @ Hx + p.linear @ x))
    if len(slack):
        comp = max(comp, np.abs(d.ineq * slack).max())
    if lo.any():
        comp = max(comp, np.abs(d.lower[lo] * (x[lo] - p.lower[lo])).max())
    if up.any():
        comp = max(comp, np.abs(d.upper[up] * (p.upper[up] - x[up])).max())
    comp /= fscale
    return {"stationarity": stat, "feasibility": viol, "dual": dual_neg, "complementarity": comp}


def _clarabel_settings(max_iter: int) -> clarabel.DefaultSettings:
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = 1e-10
    s.tol_gap_rel = 1e-10
    s.tol_feas = 1e-10
    s.tol_ktratio = 1e-8
    s.presolve_enable = False
    return s


def solve_qp(
    p: QpProblem,
    polish: bool = True,
    check_convex: bool = True,
    max_iter: int = 200,
    tol: Tolerances = TOL,
    var_scale: np.ndarray | None = None,
) -> tuple[np.ndarray, QpDuals, SolveReport]:
    """Minimise a convex QP.

    Fixed variables and linearly dependent equality rows are removed before
    the interior-point solve; the active set of the result is then polished.
    ``var_scale`` (positive, one per variable) gives the interior-point solve
    the natural units ``x = var_scale * x~``; constraint rows are then
    normalised to unit max-norm.  Returns ``(x, duals, report)``.  For non-optimal statuses ``x`` is the
    solver's last iterate (or NaNs) and should not be trusted.
    """
    if check_convex:
        check_convexity(p.hessian)
    x, duals, rep = _solve_qp(p, polish, max_iter, tol, var_scale)
    if var_scale is not None and rep.status in (SolveStatus.ITERATION_LIMIT, SolveStatus.NUMERICAL_FAILURE):
        # column scaling occasionally stalls the interior point; retry plain
        x2, d2, rep2 = _solve_qp(p, polish, max_iter, tol, None)
        if rep2.status in (SolveStatus.OPTIMAL, SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED):
            rep2.flags.add("unscaled_retry")
            return x2, d2, rep2
    return x, duals, rep


def _solve_qp(p: QpProblem, polish: bool, max_iter: int, tol: Tolerances, var_scale):
    red = _reduce(p)
    if red is None:
        return np.full(p.n, np.nan), _zero_duals(p), SolveReport(SolveStatus.INFEASIBLE, detail="presolve")
    rp, keep, xfix, eq_keep, g_keep = red
    sp_, D, Ee, Eg, sigma = _rescale(rp, None if var_scale is None else np.asarray(var_scale, dtype=float)[keep])
    xs, ds, rep = _solve_core(sp_, polish=False, max_iter=max_iter, tol=tol)
    xr = D * xs
    dr = QpDuals(Ee * ds.eq / sigma, Eg * ds.ineq / sigma, ds.lower / (D * sigma), ds.upper / (D * sigma))
    x, duals = _expand(p, xr, dr, keep, xfix, eq_keep, g_keep)
    if rep.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED) or not np.all(np.isfinite(x)):
        return x, duals, rep
    flags = set(rep.flags)
    if polish:
        polished = _polish(p, x, duals)
        if polished is not None:
            x, duals = polished
            flags.add("polished")
    res = qp_kkt_residual(p, x, duals)
    kkt = max(res.values())
    solved = rep.detail in ("Solved", "AlmostSolved")
    if solved and kkt <= tol.qp_kkt:
        st = SolveStatus.OPTIMAL
    elif rep.status is SolveStatus.ITERATION_LIMIT:
        st = SolveStatus.ITERATION_LIMIT
    elif solved and kkt <= 100 * tol.qp_kkt:
        st = SolveStatus.OPTIMAL
        flags.add("loose_kkt")
    else:
        st = SolveStatus.NUMERICAL_FAILURE
    return x, duals, SolveReport(st, p.objective(x), kkt, rep.iterations, tol, flags, rep.detail)


def _rescale(p: QpProblem, D: np.ndarray | None):
    """Column scaling ``x = D x~``, unit row norms and an objective factor.

    Returns the scaled problem and ``(D, E_eq, E_ineq, sigma)``.
    """
    if D is None:
        D = np.ones(p.n)
    Ae = p.eq_matrix * D[None, :]
    G = p.ineq_matrix * D[None, :]
    Ee = 1.0 / np.maximum(np.abs(Ae).max(axis=1, initial=0.0), 1e-300) if len(Ae) else np.ones(0)
    Eg = 1.0 / np.maximum(np.abs(G).max(axis=1, initial=0.0), 1e-300) if len(G) else np.ones(0)
    Ee = np.where(np.isfinite(Ee) & (Ee < 1e300), Ee, 1.0)
    Eg = np.where(np.isfinite(Eg) & (Eg < 1e300), Eg, 1.0)
    if np.all(D == 1.0):
        Ee = np.ones_like(Ee)
        Eg = np.ones_like(Eg)
    Hs = p.hessian * D[:, None] * D[None, :]
    sigma = 1.0 / max(1.0, np.abs(Hs).max(initial=0.0))
    sq = QpProblem(
        sigma * Hs, sigma * p.linear * D,
        Ae * Ee[:, None], p.eq_rhs * Ee,
        G * Eg[:, None], p.ineq_rhs * Eg,
        p.lower / D, p.upper / D, sigma * p.constant,
    )
    return sq, D, Ee, Eg, sigma


def _reduce(p: QpProblem):
    """Drop fixed variables, empty inequality rows and dependent equalities.

    Returns ``None`` when the removed rows prove infeasibility.
    """
    fixed = np.isfinite(p.lower) & (p.lower == p.upper)
    keep = np.flatnonzero(~fixed)
    fx = np.flatnonzero(fixed)
    xf = p.lower[fx]
    H = p.hessian[np.ix_(keep, keep)]
    c = p.linear[keep] + p.hessian[np.ix_(keep, fx)] @ xf
    const = p.constant + float(p.linear[fx] @ xf + 0.5 * xf @ p.hessian[np.ix_(fx, fx)] @ xf)
    Ae = p.eq_matrix[:, keep]
    be = p.eq_rhs - p.eq_matrix[:, fx] @ xf
    G = p.ineq_matrix[:, keep]
    h = p.ineq_rhs - p.ineq_matrix[:, fx] @ xf
    scale_h = 1e-9 * (1.0 + np.abs(p.ineq_rhs).max(initial=0.0) + np.abs(xf).max(initial=0.0))
    empty = ~np.any(G != 0, axis=1)
    if np.any(h[empty] > scale_h):
        return None
    g_keep = np.flatnonzero(~empty)
    e_empty = ~np.any(Ae != 0, axis=1)
    scale_e = 1e-9 * (1.0 + np.abs(p.eq_rhs).max(initial=0.0) + np.abs(xf).max(initial=0.0))
    if np.any(np.abs(be[e_empty]) > scale_e):
        return None
    eq_keep = np.flatnonzero(~e_empty)
    if len(eq_keep) > 1:
        Q, R, piv = sla.qr(Ae[eq_keep].T, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        rank = int(np.sum(d > 1e-10 * max(d.max(initial=0.0), 1e-300)))
        if rank < len(eq_keep):
            indep = np.sort(eq_keep[piv[:rank]])
            dep = np.setdiff1d(eq_keep, indep)
            coef = np.linalg.lstsq(Ae[indep].T, Ae[dep].T, rcond=None)[0]
            if np.any(np.abs(coef.T @ be[indep] - be[dep]) > scale_e * (1 + np.abs(coef).sum(axis=0))):
                return None
            eq_keep = indep
    lo = p.lower[keep]
    up = p.upper[keep]
    rp = QpProblem(H, c, Ae[eq_keep], be[eq_keep], G[g_keep], h[g_keep], lo, up, const)
    return rp, keep, xf, eq_keep, g_keep


def _expand(p: QpProblem, xr, dr: "QpDuals", keep, xf, eq_keep, g_keep):
    n = p.n
    x = np.empty(n)
    fx = np.setdiff1d(np.arange(n), keep)
    x[keep] = xr
    x[fx] = xf
    d = _zero_duals(p)
    d.eq[eq_keep] = dr.eq
    d.ineq[g_keep] = dr.ineq
    d.lower[keep] = dr.lower
    d.upper[keep] = dr.upper
    if len(fx) and np.all(np.isfinite(x)):
        r = (p.hessian @ x + p.linear - p.eq_matrix.T @ d.eq - p.ineq_matrix.T @ d.ineq)[fx]
        d.lower[fx] = np.maximum(r, 0.0)
        d.upper[fx] = np.maximum(-r, 0.0)
    return x, d


def _solve_core(
    p: QpProblem,
    polish: bool = True,
    check_convex: bool = True,
    max_iter: int = 200,
    tol: Tolerances = TOL,
) -> tuple[np.ndarray, QpDuals, SolveReport]:
    n = p.n

    lo_idx = np.flatnonzero(np.isfinite(p.lower))
    up_idx = np.flatnonzero(np.isfinite(p.upper))
    fixed = np.intersect1d(lo_idx, up_idx[p.upper[up_idx] == p.lower[up_idx]])
    lo_idx = np.setdiff1d(lo_idx, fixed)
    up_idx = np.setdiff1d(up_idx, fixed)

    I = sp.identity(n, format="csr")
    eq_blocks = [sp.csr_matrix(p.eq_matrix), I[fixed]]
    eq_rhs = np.concatenate([p.eq_rhs, p.lower[fixed]])
    ineq_blocks = [-sp.csr_matrix(p.ineq_matrix), -I[lo_idx], I[up_idx]]
    ineq_rhs = np.concatenate([-p.ineq_rhs, -p.lower[lo_idx], p.upper[up_idx]])
    A = sp.vstack(eq_blocks + ineq_blocks, format="csc")
    b = np.concatenate([eq_rhs, ineq_rhs])
    n_eq = len(eq_rhs)
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if len(ineq_rhs):
        cones.append(clarabel.NonnegativeConeT(len(ineq_rhs)))
    # objective scaling: interior-point tolerances are relative to O(1) data
    sigma = 1.0 / max(1.0, np.abs(p.hessian).max(initial=0.0))
    P = sp.triu(sp.csc_matrix(p.hessian * sigma), format="csc")

    try:
        sol = clarabel.DefaultSolver(P, p.linear * sigma, A, b, cones, _clarabel_settings(max_iter)).solve()
    except BaseException as exc:  # clarabel raises PanicException on malformed input
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        return np.full(n, np.nan), _zero_duals(p), SolveReport(SolveStatus.NUMERICAL_FAILURE, detail=str(exc))

    status = str(sol.status)
    iters = int(sol.iterations)
    if status == "PrimalInfeasible" or status == "AlmostPrimalInfeasible":
        return np.full(n, np.nan), _zero_duals(p), SolveReport(SolveStatus.INFEASIBLE, iterations=iters)
    if status == "DualInfeasible" or status == "AlmostDualInfeasible":
        return np.full(n, np.nan), _zero_duals(p), SolveReport(SolveStatus.UNBOUNDED, iterations=iters)

    x = np.array(sol.x)
    z = np.array(sol.z) / sigma
    k = len(p.eq_rhs)
    duals = QpDuals(
        eq=-z[:k],
        ineq=z[n_eq : n_eq + len(p.ineq_rhs)],
        lower=np.zeros(n),
        upper=np.zeros(n),
    )
    # fixed variables: a single equality row carries both bound duals
    zf = -z[k:n_eq]
    duals.lower[fixed] = np.maximum(zf, 0.0)
    duals.upper[fixed] = np.maximum(-zf, 0.0)
    off = n_eq + len(p.ineq_rhs)
    duals.lower[lo_idx] = z[off : off + len(lo_idx)]
    off += len(lo_idx)
    duals.upper[up_idx] = z[off : off + len(up_idx)]

    if not np.all(np.isfinite(x)):
        return x, duals, SolveReport(SolveStatus.NUMERICAL_FAILURE, iterations=iters, detail=status)

    flags: set[str] = set()
    if polish:
        polished = _polish(p, x, duals)
        if polished is not None:
            x, duals = polished
            flags.add("polished")
    res = qp_kkt_residual(p, x, duals)
    kkt = max(res.values())
    if status in ("Solved", "AlmostSolved") and kkt <= tol.qp_kkt:
        st = SolveStatus.OPTIMAL
    elif status == "MaxIterations":
        st = SolveStatus.ITERATION_LIMIT
    elif kkt <= 100 * tol.qp_kkt and status in ("Solved", "AlmostSolved"):
        st = SolveStatus.OPTIMAL
        flags.add("loose_kkt")
    else:
        st = SolveStatus.NUMERICAL_FAILURE
    rep = SolveReport(st, p.objective(x), kkt, iters, tol, flags, status)
    return x, duals, rep


def _zero_duals(p: QpProblem) -> QpDuals:
    return QpDuals(np.zeros(len(p.eq_rhs)), np.zeros(len(p.ineq_rhs)), np.zeros(p.n), np.zeros(p.n))


def _polish(p: QpProblem, x: np.ndarray, d: QpDuals):
    """Re-solve the equality-constrained QP on the detected active set.

    The correction is the minimum-norm solution of the active-set KKT
    system, so it stays on the optimal face found by the interior point.
    Returns ``None`` when the polished point is not better.
    """
    n = p.n
    slack = p.ineq_matrix @ x - p.ineq_rhs
    gnorm = np.linalg.norm(p.ineq_matrix, axis=1) if len(slack) else np.zeros(0)
    act_g = np.flatnonzero(slack <= 1e-7 * (1.0 + np.abs(p.ineq_rhs)) + 1e-9 * gnorm * (1 + np.abs(x).max()))
    act_g = act_g[(slack[act_g] <= 1e-5 * (1 + np.abs(p.ineq_rhs[act_g]))) | (d.ineq[act_g] > slack[act_g])]
    xs = 1.0 + np.abs(x).max(initial=0.0)
    lo_gap = x - p.lower
    up_gap = p.upper - x
    act_lo = np.flatnonzero(np.isfinite(p.lower) & ((lo_gap <= 1e-7 * xs) | (d.lower > lo_gap)))
    act_up = np.flatnonzero(np.isfinite(p.upper) & ((up_gap <= 1e-7 * xs) | (d.upper > up_gap)))
    act_up = np.setdiff1d(act_up, act_lo)

    old = max(qp_kkt_residual(p, x, d).values())
    out = _polish_step(p, x, act_g, act_lo, act_up)
    if out is None:
        return None
    x_new, nd = out
    # degenerate faces give redundant active rows whose least-squares
    # multipliers can come out negative; refit them with sign bounds
    scale = 1.0 + np.abs(p.linear).max(initial=0.0)
    if min(nd.ineq.min(initial=0.0), nd.lower.min(initial=0.0), nd.upper.min(initial=0.0)) < -1e-9 * scale:
        nd = _fit_duals(p, x_new, act_g, act_lo, act_up)
    new = max(qp_kkt_residual(p, x_new, nd).values())
    # a wrong active set can leave a row violated by far more than the
    # interior-point iterate; never trade feasibility for stationarity
    if _row_violation(p, x_new) > max(10.0 * _row_violation(p, x), 1e-12):
        return None
    if new <= old:
        return x_new, nd
    return None


def _fit_duals(p: QpProblem, x: np.ndarray, act_g, act_lo, act_up) -> QpDuals:
    """Sign-constrained least-squares multipliers for a fixed primal point."""
    n = p.n
    I = np.eye(n)
    k = len(p.eq_rhs)
    C = np.vstack([p.eq_matrix, p.ineq_matrix[act_g], I[act_lo], -I[act_up]])
    lb = np.concatenate([np.full(k, -np.inf), np.zeros(C.shape[0] - k)])
    fixed_lo = p.lower[act_lo] == p.upper[act_lo]
    lb[k + len(act_g) : k + len(act_g) + len(act_lo)][fixed_lo] = -np.inf
    g = p.hessian @ x + p.linear
    cs = np.abs(C).max(axis=1)
    cs = np.where(cs > 0, cs, 1.0)
    res = lsq_linear(C.T / cs, g, bounds=(lb, np.inf), method="bvls", tol=1e-14)
    mult = res.x / cs
    ng = len(act_g)
    nd = QpDuals(mult[:k].copy(), np.zeros(len(p.ineq_rhs)), np.zeros(n), np.zeros(n))
    nd.ineq[act_g] = mult[k : k + ng]
    nd.lower[act_lo] = mult[k + ng : k + ng + len(act_lo)]
    nd.upper[act_up] = mult[k + ng + len(act_lo) :]
    _split_fixed(p, nd)
    return nd


def _split_fixed(p: QpProblem, nd: QpDuals) -> None:
    """A fixed variable carries one signed multiplier; split it into lower/upper."""
    fx = np.flatnonzero(p.lower == p.upper)
    m = nd.lower[fx] - nd.upper[fx]
    nd.lower[fx] = np.maximum(m, 0.0)
    nd.upper[fx] = np.maximum(-m, 0.0)


def _polish_step(p: QpProblem, x: np.ndarray, act_g, act_lo, act_up):
    n = p.n
    I = np.eye(n)
    C = np.vstack([p.eq_matrix, p.ineq_matrix[act_g], I[act_lo], I[act_up]])
    rhs = np.concatenate([p.eq_rhs, p.ineq_rhs[act_g], p.lower[act_lo], p.upper[act_up]])
    m = C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = p.hessian
    K[:n, n:] = -C.T
    K[n:, :n] = C
    r = np.concatenate([-(p.hessian @ x + p.linear), rhs - C @ x])
    # two-sided equilibration, then a rank-revealing least-squares solve
    rs = np.ones(n + m)
    cs = np.ones(n + m)
    absK = np.abs(K)
    for _ in range(8):
        S = absK * rs[:, None] * cs[None, :]
        rm = S.max(axis=1)
        cm = S.max(axis=0)
        rs /= np.sqrt(np.where(rm > 0, rm, 1.0))
        cs /= np.sqrt(np.where(cm > 0, cm, 1.0))
    try:
        sol = sla.lstsq(K * rs[:, None] * cs[None, :], r * rs, cond=1e-11, lapack_driver="gelsd")[0] * cs
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    x_new = x + sol[:n]
    mult = sol[n:]
    k = len(p.eq_rhs)
    ng = len(act_g)
    nd = QpDuals(mult[:k].copy(), np.zeros(len(p.ineq_rhs)), np.zeros(n), np.zeros(n))
    nd.ineq[act_g] = mult[k : k + ng]
    nd.lower[act_lo] = mult[k + ng : k + ng + len(act_lo)]
    nd.upper[act_up] = -mult[k + ng + len(act_lo) :]
    _split_fixed(p, nd)
    # snap bound-active variables exactly
    x_new[act_lo] = p.lower[act_lo]
    x_new[act_up] = p.upper[act_up]
    return x_new, nd


# --------------------------------------------------------------------------
# nonlinear programming


@dataclass
class NlpProblem:
    """Smooth NLP: minimise ``objective`` s.t. ``constraints(x) = 0``, bounds.

    ``objective(x) -> (f, grad)``; ``constraints(x) -> (c, jac)`` where ``jac``
    may be a dense array or a scipy sparse matrix.
    """

    n: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    constraints: Callable[[np.ndarray], tuple[np.ndarray, object]] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.lower is None:
            self.lower = np.full(self.n, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.n, np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bounds must have one entry per variable")

    def eval_constraints(self, x):
        if self.constraints is None:
            return np.zeros(0), np.zeros((0, self.n))
        return self.constraints(x)


def projected_gradient(x: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.clip(x - g, lower, upper) - x


@dataclass
class NlpOptions:
    max_outer: int = 200
    max_inner: int = 5000
    rho0: float = 10.0
    rho_factor: float = 10.0
    rho_max: float = 1e10
    tol: Tolerances = TOL


def solve_nlp_local(
    p: NlpProblem,
    start: np.ndarray,
    options: NlpOptions | None = None,
    multipliers: np.ndarray | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Augmented Lagrangian method with L-BFGS-B inner iterations.

    Optimal means equality residual <= ``tol.feasibility`` and the projected
    gradient of the Lagrangian <= ``tol.stationarity`` (both in max-norm).
    """
    opt = options or NlpOptions()
    x = np.clip(np.asarray(start, dtype=float), p.lower, p.upper)
    c, J = p.eval_constraints(x)
    y = np.zeros(len(c)) if multipliers is None else np.asarray(multipliers, dtype=float).copy()
    rho = opt.rho0
    bounds = list(zip(np.where(np.isfinite(p.lower), p.lower, None), np.where(np.isfinite(p.upper), p.upper, None)))
    feas_prev = np.inf
    inner_total = 0

    def measures(x, y):
        f, g = p.objective(x)
        c, J = p.eval_constraints(x)
        gl = g + (J.T @ y if len(c) else 0.0)
        stat = np.abs(projected_gradient(x, gl, p.lower, p.upper)).max(initial=0.0)
        feas = np.abs(c).max(initial=0.0)
        return f, stat, feas

    f, stat, feas = measures(x, y)
    if not (math.isfinite(f) and math.isfinite(stat) and math.isfinite(feas)):
        return x, SolveReport(SolveStatus.NUMERICAL_FAILURE, detail="non-finite start")
    if feas <= opt.tol.feasibility and stat <= opt.tol.stationarity:
        return x, SolveReport(SolveStatus.OPTIMAL, f, max(stat, feas), 0, opt.tol)

    for outer in range(1, opt.max_outer + 1):
        y_cur, rho_cur = y, rho

        def aug(z):
            f, g = p.objective(z)
            c, J = p.eval_constraints(z)
            if len(c):
                w = y_cur + rho_cur * c
                f = f + y_cur @ c + 0.5 * rho_cur * c @ c
                g = g + J.T @ w
            return f, np.asarray(g, dtype=float)

        try:
            with np.errstate(all="raise"):
                res = sopt.minimize(
                    aug,
                    x,
                    jac=True,
                    method="L-BFGS-B",
                    bounds=bounds,
                    options={"maxiter": opt.max_inner, "ftol": 1e-15, "gtol": 0.1 * opt.tol.stationarity, "maxcor": 20},
                )
        except (FloatingPointError, ValueError) as exc:
            return x, SolveReport(SolveStatus.NUMERICAL_FAILURE, iterations=inner_total, detail=str(exc))
        inner_total += int(res.nit)
        x_new = np.clip(res.x, p.lower, p.upper)
        if not np.all(np.isfinite(x_new)):
            return x, SolveReport(SolveStatus.NUMERICAL_FAILURE, iterations=inner_total, detail="NaN iterate")
        x = x_new
        c, _ = p.eval_constraints(x)
        if len(c):
            y = y + rho * c
        f, stat, feas = measures(x, y)
        if not (math.isfinite(f) and math.isfinite(stat)):
            return x, SolveReport(SolveStatus.NUMERICAL_FAILURE, iterations=inner_total, detail="non-finite")
        if feas <= opt.tol.feasibility and stat <= opt.tol.stationarity:
            return x, SolveReport(SolveStatus.OPTIMAL, f, max(stat, feas), inner_total, opt.tol, detail=f"outer={outer}")
        if feas > 0.25 * feas_prev:
            rho = min(rho * opt.rho_factor, opt.rho_max)
        feas_prev = feas
    return x, SolveReport(
        SolveStatus.ITERATION_LIMIT, f, max(stat, feas), inner_total, opt.tol, detail=f"stat={stat:.2e} feas={feas:.2e}"
    )


# --------------------------------------------------------------------------
# derivative checking


def finite_diff_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray) -> float:
    """Max over coordinates of ``|g_i - fd_i| / (1 + |g_i|)`` with central differences."""
    x = np.asarray(x, dtype=float)
    _, g = f(x)
    g = np.asarray(g, dtype=float)
    err = 0.0
    for i in range(len(x)):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (f(xp)[0] - f(xm)[0]) / (2 * h)
        err = max(err, abs(g[i] - fd) / (1.0 + abs(g[i])))
    return err
