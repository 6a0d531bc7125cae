"""Full-market complementarity model with conjectural variations.

Every firm's KKT system is stacked into one LCP.  Prices are substituted out
through inverse demand, so the unknowns are generation, investment and
capacity duals only.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fringe_epec.lcp import LcpProblem, RayTermination, lemke_solve
from fringe_epec.market_data import MarketData, check
from fringe_epec.numerics import QpProblem, SolveStatus, solve_qp
from fringe_epec.outcome import MarketOutcome

log = logging.getLogger(__name__)

DEFAULT_CV_GRID = tuple(round(0.1 * k, 1) for k in range(11))
# Tikhonov weight used to pick the symmetric (least-norm) split when several
# firms share a cost and the market solution is not unique.
SELECTION_EPS = 1e-6
# accepted LCP residual relative to max |q|
MCP_ACCEPT = 1e-9
# worse than this the pivoting result is rejected outright
MCP_REJECT = 1e-6


class InaccurateSolution(RuntimeError):
    """Pivoting finished, but the point violates the LCP beyond ``MCP_REJECT``."""


@dataclass(frozen=True)
class CvConfig:
    """Conjectural variation per price-making firm id; missing ids default to ``default``."""

    values: Mapping[str, float] = field(default_factory=dict)
    default: float = 0.0

    def __post_init__(self) -> None:
        for v in list(self.values.values()) + [self.default]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"conjectural variation {v} outside [0, 1]")

    @classmethod
    def uniform(cls, cv: float) -> "CvConfig":
        return cls({}, float(cv))

    def vector(self, data: MarketData) -> np.ndarray:
        out = np.zeros(data.n_firms)
        for i in data.leaders:
            out[i] = self.values.get(data.firms[i].id, self.default)
        return out


@dataclass(frozen=True)
class MarketLayout:
    """Variable layout of the market LCP: gen (F*T*P), inv (F*I), lam (F*T*P)."""

    F: int
    T: int
    P: int
    inv_techs: tuple[int, ...]

    @property
    def n_gen(self) -> int:
        return self.F * self.T * self.P

    @property
    def n_inv(self) -> int:
        return self.F * len(self.inv_techs)

    @property
    def n(self) -> int:
        return 2 * self.n_gen + self.n_inv

    def gen(self, f: int, t: int, p: int) -> int:
        return (f * self.T + t) * self.P + p

    def inv(self, f: int, k: int) -> int:
        return self.n_gen + f * len(self.inv_techs) + k

    def lam(self, f: int, t: int, p: int) -> int:
        return self.n_gen + self.n_inv + self.gen(f, t, p)

    def unpack(self, z: np.ndarray):
        gen = z[: self.n_gen].reshape(self.F, self.T, self.P)
        inv = np.zeros((self.F, self.T))
        inv[:, list(self.inv_techs)] = z[self.n_gen : self.n_gen + self.n_inv].reshape(self.F, -1)
        lam = z[self.n_gen + self.n_inv :].reshape(self.F, self.T, self.P)
        return gen, inv, lam


def market_layout(data: MarketData) -> MarketLayout:
    return MarketLayout(data.n_firms, data.n_tech, data.periods, data.investable_idx)


def build_market_lcp(data: MarketData, cv: CvConfig | None = None, validate: bool = True) -> LcpProblem:
    """Stack all firms' KKT conditions into ``0 <= z _|_ q + M z >= 0``.

    Rows per (f, t, p): ``W(C - A) + W B D_p + W cv_f B gen_ftp + lam_ftp >= 0``;
    per investable (f, t): ``IC - sum_p lam_ftp >= 0``; and per capacity
    pair ``CAP + inv - gen >= 0``.
    """
    if validate:
        check(data)
    cv = cv or CvConfig()
    lay = market_layout(data)
    cvv = cv.vector(data)
    W, A, B, C = data.weights, data.intercepts, data.slope, data.marginal_cost
    M = np.zeros((lay.n, lay.n))
    q = np.zeros(lay.n)
    gen_of_period = [[lay.gen(f, t, p) for f in range(lay.F) for t in range(lay.T)] for p in range(lay.P)]
    inv_pos = {t: k for k, t in enumerate(lay.inv_techs)}
    for f in range(lay.F):
        for t in range(lay.T):
            for p in range(lay.P):
                r = lay.gen(f, t, p)
                q[r] = W[p] * (C[t] - A[p])
                M[r, gen_of_period[p]] += W[p] * B
                M[r, r] += W[p] * cvv[f] * B
                M[r, lay.lam(f, t, p)] = 1.0
                rc = lay.lam(f, t, p)
                q[rc] = data.capacity[f, t]
                M[rc, r] = -1.0
                if t in inv_pos:
                    M[rc, lay.inv(f, inv_pos[t])] = 1.0
            if t in inv_pos:
                ri = lay.inv(f, inv_pos[t])
                q[ri] = data.invest_cost[t]
                for p in range(lay.P):
                    M[ri, lay.lam(f, t, p)] = -1.0
    return LcpProblem(M, q)


def solve_market_mcp(
    data: MarketData,
    cv: CvConfig | float | None = None,
    validate: bool = True,
    select: bool = True,
) -> MarketOutcome:
    """Solve the stacked KKT system by pivoting.

    With ``select`` the least-norm solution is sought first (symmetric splits
    between firms that tie); without it, or if that pivot path fails, plain
    pivoting returns some solution with the same (unique) prices.
    """
    if isinstance(cv, (int, float)):
        cv = CvConfig.uniform(cv)
    p = build_market_lcp(data, cv, validate)
    lay = market_layout(data)
    scale = 1.0 + float(np.abs(p.q).max())
    reg = np.zeros(p.n)
    reg[: lay.n_gen + lay.n_inv] = SELECTION_EPS
    sol = None
    # the regularised pivot picks the least-norm split; if its path needed
    # the perturbed retry and lost accuracy, plain pivoting still gives the
    # (unique) prices exactly
    for r in (reg, 0.0) if select else (0.0,):
        try:
            cand = lemke_solve(p, regularization=r)
        except RayTermination as exc:
            if r is reg:
                continue
            raise RayTermination(f"market MCP on {data.name!r}: {exc}") from exc
        if sol is None or _lcp_error(cand) < _lcp_error(sol):
            sol = cand
        if _lcp_error(cand) <= MCP_ACCEPT * scale:
            break
    if sol is None or _lcp_error(sol) > MCP_REJECT * scale:
        err = math.inf if sol is None else _lcp_error(sol)
        raise InaccurateSolution(f"market MCP on {data.name!r}: LCP error {err:.3g} (scale {scale:.3g})")
    gen, inv, lam = lay.unpack(sol.z)
    comp = float(np.max(np.abs(sol.z * sol.w), initial=0.0))
    return MarketOutcome.build(
        data, gen, inv, lam,
        solver="lemke", pivots=sol.pivots, comp_residual=sol.comp_residual,
        bound_violation=sol.bound_violation, max_product=comp, scale=scale,
    )


def _lcp_error(sol) -> float:
    return max(sol.comp_residual, sol.bound_violation, sol.eq_residual)


def welfare_lp_oracle(data: MarketData) -> MarketOutcome:
    """Perfect competition as welfare maximisation, solved as a convex QP.

    Minimises ``sum_p W_p (B D_p^2 / 2 - A_p D_p + sum C gen) + sum IC inv``
    subject to ``gen <= CAP + inv`` and nonnegativity.
    """
    lay = market_layout(data)
    W, A, B, C = data.weights, data.intercepts, data.slope, data.marginal_cost
    n = lay.n_gen + lay.n_inv
    H = np.zeros((n, n))
    c = np.zeros(n)
    for p in range(lay.P):
        idx = [lay.gen(f, t, p) for f in range(lay.F) for t in range(lay.T)]
        H[np.ix_(idx, idx)] += W[p] * B
        for f in range(lay.F):
            for t in range(lay.T):
                c[lay.gen(f, t, p)] = W[p] * (C[t] - A[p])
    for f in range(lay.F):
        for k, t in enumerate(lay.inv_techs):
            c[lay.inv(f, k)] = data.invest_cost[t]
    # pairs that can never produce are fixed at zero instead of carrying a
    # redundant 0 <= gen <= 0 row (its dual would be arbitrary)
    rows = []
    upper = np.full(n, np.inf)
    inv_pos = {t: k for k, t in enumerate(lay.inv_techs)}
    for f in range(lay.F):
        for t in range(lay.T):
            for p in range(lay.P):
                g = lay.gen(f, t, p)
                if data.active[f, t]:
                    rows.append((f, t, p))
                else:
                    upper[g] = 0.0
    G = np.zeros((len(rows), n))
    h = np.zeros(len(rows))
    for r, (f, t, p) in enumerate(rows):
        G[r, lay.gen(f, t, p)] = -1.0
        if t in inv_pos:
            G[r, lay.inv(f, inv_pos[t])] = 1.0
        h[r] = -data.capacity[f, t]
    qp = QpProblem(H, c, ineq_matrix=G, ineq_rhs=h, lower=np.zeros(n), upper=upper)
    x, duals, rep = solve_qp(qp)
    assert rep.status is not SolveStatus.INFEASIBLE, "welfare problem is always feasible"
    lam = duals.upper[: lay.n_gen].copy()
    for r, (f, t, p) in enumerate(rows):
        lam[lay.gen(f, t, p)] = duals.ineq[r]
    gen, inv, lam = lay.unpack(np.concatenate([x, lam]))
    return MarketOutcome.build(data, gen, inv, lam, solver="qp", kkt_residual=rep.kkt_residual, status=rep.status.value)


def cv_sweep(
    data: MarketData,
    values: Sequence[float] = DEFAULT_CV_GRID,
    workers: int = 1,
) -> list[MarketOutcome | Exception]:
    """Solve the MCP once per CV level (same level for every price-maker).

    Failures are returned in place of the outcome so the sweep always
    yields one entry per level, in input order.
    """
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"cv level {v} outside [0, 1]")

    def one(v: float):
        try:
            out = solve_market_mcp(data, CvConfig.uniform(v))
            out.meta["cv"] = v
            return out
        except Exception as exc:  # collected, sweep continues
            log.warning("cv=%s failed: %s", v, exc)
            return exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, values))
    return [one(v) for v in values]
