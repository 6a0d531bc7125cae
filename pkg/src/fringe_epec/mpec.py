"""One price-maker's bilevel problem with the fringe's KKT system embedded.

The complementarity pairs of the fringe (generation vs. stationarity,
investment vs. investment row, capacity dual vs. capacity slack) are handled
by branch-and-bound over which side of each pair is zero.  Node relaxations
keep both inequality sides of every unfixed pair.

The objective used inside the search is the leader's profit plus the
fringe's duality gap

    Phi = sum W gamma gF - sum W C gF - IC iF - sum lam CAP,

which is zero at every point satisfying the fringe KKT conditions and
nonpositive on the relaxed set.  The sum is concave in all variables, so
every node and every pattern subproblem is a convex QP, the relaxation value
is a valid upper bound, and on complementarity-feasible points it equals the
leader's profit.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from fringe_epec.market_data import DemandCurve, MarketData, check
from fringe_epec.lcp import RayTermination
from fringe_epec.mcp_model import InaccurateSolution, solve_market_mcp, welfare_lp_oracle
from fringe_epec.numerics import TOL, QpProblem, SolveReport, SolveStatus, solve_qp
from fringe_epec.outcome import StrategyProfile, clearing_prices

log = logging.getLogger(__name__)

NODE_BUDGET = 20000
GAP_TOL = 1e-4
M_FALLBACK = 1e6
# a pair counts as complementary when the smaller normalised side is below this
COMP_TOL = 1e-9
# EUR/MWh; a unit priced this close to its cost is indifferent to running
PRICE_TIE = 1e-6


class UnknownLeader(KeyError):
    pass


class RivalInfeasible(ValueError):
    """Fixed rival decisions violate the rivals' own capacity limits."""


class NodeBudgetExhausted(RuntimeError):
    def __init__(self, incumbent: "MpecSolution | None", gap: float, nodes: int):
        super().__init__(f"node budget exhausted after {nodes} nodes (gap {gap:.3g})")
        self.incumbent = incumbent
        self.gap = gap
        self.nodes = nodes


@dataclass(frozen=True)
class ComplementarityPattern:
    """Which side of each fringe pair is forced to zero.

    ``r1[f, t, p] = 1``: stationarity row holds with equality (else gen = 0).
    ``r2[f, k] = 1``: investment row holds with equality (else inv = 0).
    ``r3[f, t, p] = 1``: capacity slack is zero (else the dual is zero).
    ``f`` runs over price-taking firms, ``k`` over investable technologies.
    """

    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray

    def key(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([self.r1.ravel(), self.r2.ravel(), self.r3.ravel()]))

    @property
    def size(self) -> int:
        return self.r1.size + self.r2.size + self.r3.size

    def to_dict(self) -> dict:
        return {"r1": self.r1.tolist(), "r2": self.r2.tolist(), "r3": self.r3.tolist()}

    @classmethod
    def zeros(cls, n_fringe: int, n_tech: int, n_inv: int, periods: int) -> "ComplementarityPattern":
        z = np.zeros((n_fringe, n_tech, periods), dtype=np.int8)
        return cls(z, np.zeros((n_fringe, n_inv), dtype=np.int8), z.copy())


@dataclass
class _Layout:
    """Variable and pair indexing of one leader's problem."""

    n: int
    gL: dict  # (t, p) -> index
    iL: dict  # t -> index
    gF: dict  # (j, t, p) -> index   (j = position among fringe firms)
    iF: dict  # (j, t) -> index
    lam: dict  # (j, t, p) -> index
    pairs: list  # (kind, key, var index)
    y_rows: np.ndarray  # (P, n) indicator of all modelled generation per period


@dataclass
class MpecProblem:
    data: MarketData
    leader: int
    rival_gen: np.ndarray  # (F, T, P), nonzero only for other price-makers
    rival_inv: np.ndarray  # (F, T)
    big_m: float = 1.0  # multiplier on the structural bounds
    layout: _Layout = field(init=False, repr=False)
    var_upper: np.ndarray = field(init=False, repr=False)
    row_upper: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.layout = _build_layout(self.data, self.leader)
        self.var_upper, self.row_upper = _bounds(self)

    @property
    def fringe(self) -> tuple[int, ...]:
        return self.data.fringe

    @property
    def leader_id(self) -> str:
        return self.data.firms[self.leader].id

    @property
    def rival_total(self) -> np.ndarray:
        return self.rival_gen.sum(axis=(0, 1))

    def pattern_space(self) -> tuple[int, int, int]:
        d = self.data
        nf = len(d.fringe)
        return nf * d.n_tech * d.periods, nf * len(d.investable_idx), nf * d.n_tech * d.periods


@dataclass
class MpecSolution:
    leader_gen: np.ndarray  # (T, P)
    leader_inv: np.ndarray  # (T,)
    fringe_gen: np.ndarray  # (Ffringe, T, P)
    fringe_inv: np.ndarray  # (Ffringe, T)
    fringe_duals: np.ndarray  # (Ffringe, T, P)
    prices: np.ndarray
    pattern: ComplementarityPattern
    leader_profit: float
    report: SolveReport
    bound: float = math.nan
    nodes: int = 0

    def profile(self, p: MpecProblem) -> StrategyProfile:
        """Full market profile: this leader, fixed rivals and the fringe response."""
        d = p.data
        gen = p.rival_gen.copy()
        inv = p.rival_inv.copy()
        gen[p.leader] = self.leader_gen
        inv[p.leader] = self.leader_inv
        duals = np.zeros_like(gen)
        for j, f in enumerate(d.fringe):
            gen[f] = self.fringe_gen[j]
            inv[f] = self.fringe_inv[j]
            duals[f] = self.fringe_duals[j]
        return StrategyProfile(gen, inv, clearing_prices(d, gen), duals, True)


# --------------------------------------------------------------------------
# construction


def _resolve_leader(data: MarketData, leader: str | int) -> int:
    if isinstance(leader, (int, np.integer)):
        idx = int(leader)
        if not 0 <= idx < data.n_firms:
            raise UnknownLeader(f"firm index {idx} out of range")
    else:
        try:
            idx = data.firm_index(leader)
        except KeyError:
            raise UnknownLeader(f"unknown firm {leader!r}") from None
    if idx not in data.leaders:
        raise UnknownLeader(f"firm {data.firms[idx].id!r} is not price-making")
    return idx


def build_mpec(
    data: MarketData,
    leader: str | int,
    rival_fixed: StrategyProfile | Mapping[str, Mapping[str, object]] | None = None,
    big_m: float = 1.0,
) -> MpecProblem:
    """Leader problem with the other price-makers' decisions held fixed.

    ``rival_fixed`` is a full profile (only other price-makers are read) or a
    mapping ``firm id -> {"gen": (T, P), "inv": (T,)}``; missing rivals are
    fixed at zero.
    """
    check(data, require_players=True)
    l = _resolve_leader(data, leader)
    F, T, P = data.n_firms, data.n_tech, data.periods
    gen = np.zeros((F, T, P))
    inv = np.zeros((F, T))
    if isinstance(rival_fixed, StrategyProfile):
        for r in data.leaders:
            if r != l:
                gen[r] = rival_fixed.gen[r]
                inv[r] = rival_fixed.inv[r]
    elif rival_fixed:
        for fid, rec in rival_fixed.items():
            r = data.firm_index(fid)
            if r not in data.leaders or r == l:
                raise ValueError(f"{fid!r} is not a rival price-maker")
            gen[r] = np.asarray(rec["gen"], dtype=float).reshape(T, P)
            if "inv" in rec:
                inv[r] = np.asarray(rec["inv"], dtype=float).reshape(T)
    for r in data.leaders:
        if r == l:
            continue
        if gen[r].min() < -1e-9 or inv[r].min() < -1e-9:
            raise RivalInfeasible(f"rival {data.firms[r].id!r} has negative decisions")
        if np.any(inv[r][~data.investable] > 1e-9):
            raise RivalInfeasible(f"rival {data.firms[r].id!r} invests in a non-investable technology")
        over = gen[r] - (data.capacity[r] + inv[r])[:, None]
        if over.max() > 1e-6:
            raise RivalInfeasible(f"rival {data.firms[r].id!r} exceeds its capacity by {over.max():.3g} MW")
    return MpecProblem(data, l, np.maximum(gen, 0.0), np.maximum(inv, 0.0), float(big_m))


def _build_layout(d: MarketData, l: int) -> _Layout:
    n = 0
    gL, iL, gF, iF, lam = {}, {}, {}, {}, {}
    for t in range(d.n_tech):
        if d.active[l, t]:
            for p in range(d.periods):
                gL[t, p] = n
                n += 1
    for t in d.investable_idx:
        iL[t] = n
        n += 1
    for j, f in enumerate(d.fringe):
        for t in range(d.n_tech):
            if d.active[f, t]:
                for p in range(d.periods):
                    gF[j, t, p] = n
                    n += 1
        for t in d.investable_idx:
            iF[j, t] = n
            n += 1
        for t in range(d.n_tech):
            if d.active[f, t]:
                for p in range(d.periods):
                    lam[j, t, p] = n
                    n += 1
    pairs = [("gen", k, v) for k, v in gF.items()]
    pairs += [("inv", k, v) for k, v in iF.items()]
    pairs += [("cap", k, v) for k, v in lam.items()]
    Y = np.zeros((d.periods, n))
    for (t, p), v in gL.items():
        Y[p, v] = 1.0
    for (j, t, p), v in gF.items():
        Y[p, v] = 1.0
    return _Layout(n, gL, iL, gF, iF, lam, pairs, Y)


def _bounds(p: MpecProblem) -> tuple[np.ndarray, dict]:
    """Structural big-M bounds for variables and pair rows."""
    d = p.data
    lay = p.layout
    qmax = d.max_quantity * p.big_m
    amax = float(d.intercepts.max())
    ub = np.full(lay.n, M_FALLBACK * p.big_m)
    for (t, _), v in lay.gL.items():
        ub[v] = d.capacity[p.leader, t] + qmax
    for v in lay.iL.values():
        ub[v] = qmax
    for (j, t, _), v in lay.gF.items():
        ub[v] = d.capacity[d.fringe[j], t] + qmax
    for v in lay.iF.values():
        ub[v] = qmax
    for (_, _, pp), v in lay.lam.items():
        ub[v] = d.weights[pp] * amax * p.big_m
    rows = {}
    cmax = float(d.marginal_cost.max())
    for kind, key, _ in lay.pairs:
        if kind == "gen":
            pp = key[2]
            rows[kind, key] = d.weights[pp] * (amax + cmax + d.slope * p.rival_total[pp]) * p.big_m
        elif kind == "inv":
            rows[kind, key] = (d.invest_cost[key[1]] + float(d.weights.sum()) * amax) * p.big_m
        else:
            j, t, _ = key
            rows[kind, key] = d.capacity[d.fringe[j], t] + qmax
    return ub, rows


def _pair_rows(p: MpecProblem) -> tuple[np.ndarray, np.ndarray]:
    """Affine pair rows ``a x + b`` (one per pair, in layout order)."""
    d = p.data
    lay = p.layout
    W, A, B, C = d.weights, d.intercepts, d.slope, d.marginal_cost
    GR = p.rival_total
    a = np.zeros((len(lay.pairs), lay.n))
    b = np.zeros(len(lay.pairs))
    for k, (kind, key, _) in enumerate(lay.pairs):
        if kind == "gen":
            j, t, pp = key
            a[k] = W[pp] * B * lay.y_rows[pp]
            a[k, lay.lam[key]] += 1.0
            b[k] = W[pp] * (C[t] - A[pp] + B * GR[pp])
        elif kind == "inv":
            j, t = key
            for pp in range(d.periods):
                if (j, t, pp) in lay.lam:
                    a[k, lay.lam[j, t, pp]] = -1.0
            b[k] = d.invest_cost[t]
        else:
            j, t, pp = key
            a[k, lay.gF[key]] = -1.0
            if (j, t) in lay.iF:
                a[k, lay.iF[j, t]] = 1.0
            b[k] = d.capacity[d.fringe[j], t]
    return a, b


@dataclass
class _Model:
    """Dense QP data shared by all nodes of one problem."""

    H: np.ndarray
    c: np.ndarray
    const: float
    Gl: np.ndarray  # leader capacity rows, Gl x >= hl
    hl: np.ndarray
    pa: np.ndarray  # pair rows
    pb: np.ndarray
    pvar: np.ndarray  # pair variable index
    vscale: np.ndarray  # normalisers for pair variables
    rscale: np.ndarray  # normalisers for pair rows
    xscale: np.ndarray  # natural units: GW for quantities, EUR/MWh for duals


def _model(p: MpecProblem) -> _Model:
    d = p.data
    lay = p.layout
    W, A, B, C = d.weights, d.intercepts, d.slope, d.marginal_cost
    GR = p.rival_total
    Y = lay.y_rows
    # minimise  sum W B y^2 - W (A - B GR) y + costs + lam CAP
    H = 2.0 * (Y.T * (W * B)) @ Y
    c = -Y.T @ (W * (A - B * GR))
    for (t, pp), v in lay.gL.items():
        c[v] += W[pp] * C[t]
    for (j, t, pp), v in lay.gF.items():
        c[v] += W[pp] * C[t]
    for t, v in lay.iL.items():
        c[v] += d.invest_cost[t]
    for (j, t), v in lay.iF.items():
        c[v] += d.invest_cost[t]
    for (j, t, pp), v in lay.lam.items():
        c[v] += d.capacity[d.fringe[j], t]
    rows = []
    h = []
    for (t, pp), v in lay.gL.items():
        r = np.zeros(lay.n)
        r[v] = -1.0
        if t in lay.iL:
            r[lay.iL[t]] = 1.0
        rows.append(r)
        h.append(-d.capacity[p.leader, t])
    pa, pb = _pair_rows(p)
    pvar = np.array([v for _, _, v in lay.pairs], dtype=int)
    vscale = p.var_upper[pvar]
    rscale = np.array([p.row_upper[kind, key] for kind, key, _ in lay.pairs])
    Gl = np.array(rows) if rows else np.zeros((0, lay.n))
    # GW on large markets, the market size on small ones
    xscale = np.full(lay.n, min(1e3, max(1.0, d.max_quantity)))
    for (_, _, pp), v in lay.lam.items():
        xscale[v] = W[pp]
    return _Model(H, c, 0.0, Gl, np.array(h), pa, pb, pvar, vscale, rscale, xscale)


# --------------------------------------------------------------------------
# subproblems


def _node_qp(p: MpecProblem, m: _Model, fix: Mapping[int, int]) -> QpProblem:
    """Relaxation with pairs in ``fix`` forced to one side (0: variable, 1: row)."""
    n = p.layout.n
    lower = np.zeros(n)
    upper = p.var_upper.copy()
    eq_rows, eq_rhs = [], []
    ineq_rows = [m.Gl]
    ineq_rhs = [m.hl]
    keep = []
    for k in range(len(m.pb)):
        s = fix.get(k)
        if s == 0:
            upper[m.pvar[k]] = 0.0
            keep.append(k)
        elif s == 1:
            eq_rows.append(m.pa[k])
            eq_rhs.append(-m.pb[k])
        else:
            keep.append(k)
    keep = np.array(keep, dtype=int)
    if len(keep):
        # 0 <= a x + b <= big-M row bound
        ineq_rows += [m.pa[keep], -m.pa[keep]]
        ineq_rhs += [-m.pb[keep], m.pb[keep] - m.rscale[keep]]
    return QpProblem(
        m.H, m.c,
        eq_matrix=np.array(eq_rows) if eq_rows else None,
        eq_rhs=np.array(eq_rhs) if eq_rhs else None,
        ineq_matrix=np.vstack(ineq_rows),
        ineq_rhs=np.concatenate(ineq_rhs),
        lower=lower, upper=upper,
    )


def _violations(m: _Model, x: np.ndarray) -> np.ndarray:
    """Normalised complementarity violation ``min(var, row)`` per pair."""
    var = np.maximum(x[m.pvar], 0.0) / m.vscale
    row = np.maximum(m.pa @ x + m.pb, 0.0) / m.rscale
    return np.minimum(var, row)


def _pattern_of(p: MpecProblem, m: _Model, x: np.ndarray) -> dict[int, int]:
    """Fix every pair to its (normalised) smaller side; ties go to the variable."""
    var = np.maximum(x[m.pvar], 0.0) / m.vscale
    row = np.maximum(m.pa @ x + m.pb, 0.0) / m.rscale
    return {k: int(row[k] < var[k]) for k in range(len(m.pb))}


def _pattern_record(p: MpecProblem, fix: Mapping[int, int]) -> ComplementarityPattern:
    d = p.data
    nf = len(d.fringe)
    inv_pos = {t: k for k, t in enumerate(d.investable_idx)}
    pat = ComplementarityPattern.zeros(nf, d.n_tech, len(d.investable_idx), d.periods)
    r1, r2, r3 = pat.r1, pat.r2, pat.r3
    # inactive fringe pairs: no generation, capacity row binds trivially
    r3[:] = 1
    for k, (kind, key, _) in enumerate(p.layout.pairs):
        s = fix.get(k, 0)
        if kind == "gen":
            r1[key] = s
        elif kind == "inv":
            r2[key[0], inv_pos[key[1]]] = s
        else:
            r3[key] = s
    return pat


def _fix_from_pattern(p: MpecProblem, pattern: ComplementarityPattern) -> dict[int, int]:
    inv_pos = {t: k for k, t in enumerate(p.data.investable_idx)}
    fix = {}
    for k, (kind, key, _) in enumerate(p.layout.pairs):
        if kind == "gen":
            fix[k] = int(pattern.r1[key])
        elif kind == "inv":
            fix[k] = int(pattern.r2[key[0], inv_pos[key[1]]])
        else:
            fix[k] = int(pattern.r3[key])
    return fix


def leader_profit(data: MarketData, gen: np.ndarray, inv: np.ndarray, prices: np.ndarray) -> float:
    """Profit of one firm from its (T, P) generation and (T,) investment."""
    margin = prices[None, :] - data.marginal_cost[:, None]
    return float(np.sum(data.weights[None, :] * gen * margin) - inv @ data.invest_cost)


def leader_objective(p: MpecProblem, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Leader profit as a function of the stacked variable vector, with gradient."""
    d = p.data
    lay = p.layout
    W, A, B, C = d.weights, d.intercepts, d.slope, d.marginal_cost
    y = lay.y_rows @ x
    gamma = A - B * (p.rival_total + y)
    f = 0.0
    g = np.zeros(lay.n)
    own = np.zeros(d.periods)
    for (t, pp), v in lay.gL.items():
        f += W[pp] * (gamma[pp] - C[t]) * x[v]
        g[v] += W[pp] * (gamma[pp] - C[t])
        own[pp] += x[v]
    for t, v in lay.iL.items():
        f -= d.invest_cost[t] * x[v]
        g[v] -= d.invest_cost[t]
    # d gamma_p / dx = -B * y_rows[p]
    g -= (W * B * own) @ lay.y_rows
    return float(f), g


def _solution(p: MpecProblem, m: _Model, x: np.ndarray, fix: Mapping[int, int], rep: SolveReport) -> MpecSolution:
    d = p.data
    lay = p.layout
    T, P = d.n_tech, d.periods
    nf = len(d.fringe)
    x = np.maximum(x, 0.0)
    gL = np.zeros((T, P))
    iL = np.zeros(T)
    gF = np.zeros((nf, T, P))
    iF = np.zeros((nf, T))
    lam = np.zeros((nf, T, P))
    for (t, pp), v in lay.gL.items():
        gL[t, pp] = x[v]
    for t, v in lay.iL.items():
        iL[t] = x[v]
    for key, v in lay.gF.items():
        gF[key] = x[v]
    for key, v in lay.iF.items():
        iF[key] = x[v]
    for key, v in lay.lam.items():
        lam[key] = x[v]
    total = p.rival_gen.sum(axis=(0, 1)) + gL.sum(axis=0) + gF.sum(axis=(0, 1))
    prices = d.intercepts - d.slope * total
    # inactive fringe pairs: smallest dual consistent with their stationarity
    for j, f in enumerate(d.fringe):
        for t in range(T):
            if not d.active[f, t]:
                lam[j, t] = d.weights * np.maximum(prices - d.marginal_cost[t], 0.0)
    profit = leader_profit(d, gL, iL, prices)
    pattern = _pattern_record(p, fix)
    flags = set(rep.flags)
    near = np.flatnonzero(x >= 0.99 * p.var_upper)
    rows = m.pa @ x + m.pb
    near_rows = np.flatnonzero(rows >= 0.99 * m.rscale)
    if len(near) or len(near_rows):
        flags.add("big_m_binding")
    report = SolveReport(rep.status, profit, rep.kkt_residual, rep.iterations, rep.tolerances, flags, rep.detail)
    return MpecSolution(gL, iL, gF, iF, lam, prices, pattern, profit, report)


def pattern_qp(p: MpecProblem, pattern: ComplementarityPattern | Mapping[int, int]) -> tuple[MpecSolution | None, SolveReport]:
    """Best leader decision within one complementarity pattern.

    Returns ``(None, report)`` with status ``infeasible`` when the pattern
    admits no point.
    """
    m = _model(p)
    fix = pattern if isinstance(pattern, Mapping) else _fix_from_pattern(p, pattern)
    return _pattern_qp(p, m, dict(fix))


def _pattern_qp(p: MpecProblem, m: _Model, fix: dict[int, int]):
    qp = _node_qp(p, m, fix)
    x, _, rep = solve_qp(qp, var_scale=m.xscale)
    if rep.status is SolveStatus.INFEASIBLE:
        return None, rep
    if not rep.ok:
        if rep.status in (SolveStatus.NUMERICAL_FAILURE, SolveStatus.ITERATION_LIMIT) and np.all(np.isfinite(x)):
            rep.flags.add("inexact")
        else:
            return None, rep
    return _solution(p, m, x, fix, rep), rep


# --------------------------------------------------------------------------
# fringe response and lower-level checks


def fringe_response(data: MarketData, other_gen_total: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Competitive fringe equilibrium on the residual demand curve.

    ``other_gen_total`` is the price-makers' total generation per period.
    Returns ``(gen (Ff,T,P), inv (Ff,T), duals (Ff,T,P), prices)``; prices are
    unique because the fringe problem is a strictly concave welfare QP in
    total output.
    """
    fr = [data.firms[f] for f in data.fringe]
    resid = DemandCurve(
        tuple(float(a) for a in data.intercepts - data.slope * other_gen_total),
        data.slope,
        tuple(float(w) for w in data.weights),
    )
    sub = MarketData(tuple(fr), data.technologies, resid, name=data.name + ":fringe")
    # price-takers alone: the cv = 0 complementarity system is exactly their
    # equilibrium; pivoting gives it to machine precision
    try:
        out = solve_market_mcp(sub, 0.0, validate=False, select=False)
    except (RayTermination, InaccurateSolution):
        out = welfare_lp_oracle(sub)
    gen, inv, lam = _share_among_twins(data, out.gen, out.inv, out.capacity_duals)
    return gen, inv, lam, out.prices


def _share_among_twins(data: MarketData, gen, inv, lam):
    """Average the response over price-takers with identical portfolios.

    At fixed prices each price-taker's optimality conditions form a convex
    set, and twins share that set, so the average is again an equilibrium
    with the same totals.
    """
    groups: dict[tuple, list[int]] = {}
    for j, f in enumerate(data.fringe):
        groups.setdefault(tuple(data.capacity[f]), []).append(j)
    gen, inv, lam = gen.copy(), inv.copy(), lam.copy()
    for js in groups.values():
        if len(js) > 1:
            for a in (gen, inv, lam):
                a[js] = a[js].mean(axis=0)
    return gen, inv, lam


def with_fringe_response(data: MarketData, profile: StrategyProfile) -> StrategyProfile:
    """Same price-maker decisions, fringe replaced by its equilibrium response."""
    gen = profile.gen.copy()
    inv = profile.inv.copy()
    others = gen[list(data.leaders)].sum(axis=(0, 1))
    gF, iF, lam, _ = fringe_response(data, others)
    duals = np.zeros_like(gen)
    for j, f in enumerate(data.fringe):
        gen[f], inv[f], duals[f] = gF[j], iF[j], lam[j]
    return StrategyProfile(gen, inv, clearing_prices(data, gen), duals, True)


def fringe_best_profit(data: MarketData, prices: np.ndarray) -> np.ndarray:
    """Optimal profit of each price-taker facing fixed prices (closed form).

    Returns ``inf`` for a firm when investing in some technology is
    profitable without bound.
    """
    margin = np.maximum(_margins(data, prices), 0.0) * data.weights[None, :]
    per_mw = margin.sum(axis=1)
    ic = _effective_invest_cost(data, per_mw)
    out = np.zeros(len(data.fringe))
    for j, f in enumerate(data.fringe):
        if np.any(data.investable & (per_mw > ic)):
            out[j] = math.inf
        else:
            out[j] = float(data.capacity[f] @ per_mw)
    return out


def check_lower_level_optimality(s: MpecSolution | StrategyProfile, data: MarketData) -> float:
    """Largest profit gain any price-taker could get by re-optimising at the given prices."""
    if isinstance(s, MpecSolution):
        gen, inv, prices = s.fringe_gen, s.fringe_inv, s.prices
    else:
        gen = s.gen[list(data.fringe)]
        inv = s.inv[list(data.fringe)]
        prices = s.prices
    best = fringe_best_profit(data, prices)
    margin = _margins(data, prices) * data.weights[None, :]
    ic = _effective_invest_cost(data, np.maximum(margin, 0.0).sum(axis=1))
    worst = 0.0
    for j in range(len(data.fringe)):
        got = float(np.sum(gen[j] * margin) - inv[j] @ ic)
        worst = max(worst, best[j] - got)
    return worst


def _effective_invest_cost(data: MarketData, per_mw: np.ndarray) -> np.ndarray:
    """Investment cost, snapped to the yearly margin when the two tie.

    Price noise of ``PRICE_TIE`` per period moves the yearly margin by up to
    ``PRICE_TIE * sum(W)``; within that band a new MW is break-even.
    """
    ic = np.asarray(data.invest_cost, dtype=float).copy()
    tie = data.investable & (np.abs(per_mw - ic) <= PRICE_TIE * float(np.sum(data.weights)))
    ic[tie] = per_mw[tie]
    return ic


def _margins(data: MarketData, prices: np.ndarray) -> np.ndarray:
    """Price minus marginal cost per (technology, period); ties at cost count as zero."""
    m = prices[None, :] - data.marginal_cost[:, None]
    return np.where(np.abs(m) <= PRICE_TIE, 0.0, m)


# --------------------------------------------------------------------------
# branch and bound


@dataclass(order=True)
class _Node:
    key: float
    seq: int
    fix: dict = field(compare=False)
    x: np.ndarray = field(compare=False)
    bound: float = field(compare=False)


class _Search:
    def __init__(self, p: MpecProblem, node_budget: int, gap_tol: float):
        self.p = p
        self.m = _model(p)
        self.node_budget = node_budget
        self.gap_tol = gap_tol
        self.best: MpecSolution | None = None
        self.best_key: tuple[int, ...] | None = None
        self.seen_patterns: set[tuple[int, ...]] = set()
        self.seq = itertools.count()
        self.qps = 0

    def consider(self, sol: MpecSolution | None) -> None:
        if sol is None:
            return
        key = sol.pattern.key()
        if self.best is None:
            self.best, self.best_key = sol, key
            return
        tie = 1e-9 * (1.0 + abs(self.best.leader_profit))
        if sol.leader_profit > self.best.leader_profit + tie or (
            sol.leader_profit >= self.best.leader_profit - tie and key < self.best_key
        ):
            self.best, self.best_key = sol, key

    def try_pattern(self, fix: dict[int, int]) -> None:
        key = tuple(fix[k] for k in range(len(self.m.pb)))
        if key in self.seen_patterns:
            return
        self.seen_patterns.add(key)
        self.qps += 1
        sol, _ = _pattern_qp(self.p, self.m, fix)
        self.consider(sol)

    def heuristic(self, leader_gen: np.ndarray) -> None:
        """Complete the leader's generation with the fringe's best response."""
        p = self.p
        d = p.data
        total = p.rival_total + leader_gen.sum(axis=0)
        gF, iF, lam, _ = fringe_response(d, total)
        self.qps += 1
        x = np.zeros(p.layout.n)
        lay = p.layout
        for (t, pp), v in lay.gL.items():
            x[v] = leader_gen[t, pp]
        for t, v in lay.iL.items():
            cap_need = leader_gen[t].max() - d.capacity[p.leader, t]
            x[v] = max(cap_need, 0.0)
        for key, v in lay.gF.items():
            x[v] = gF[key]
        for key, v in lay.iF.items():
            x[v] = iF[key]
        for key, v in lay.lam.items():
            x[v] = lam[key]
        self.try_pattern(_pattern_of(p, self.m, x))

    def leader_gen_of(self, x: np.ndarray) -> np.ndarray:
        d = self.p.data
        g = np.zeros((d.n_tech, d.periods))
        for (t, pp), v in self.p.layout.gL.items():
            g[t, pp] = max(x[v], 0.0)
        return g

    def solve_node(self, fix: dict) -> _Node | None:
        qp = _node_qp(self.p, self.m, fix)
        self.qps += 1
        x, _, rep = solve_qp(qp, polish=False, var_scale=self.m.xscale)
        if rep.status is SolveStatus.INFEASIBLE:
            return None
        if not np.all(np.isfinite(x)):
            x = np.zeros(self.p.layout.n)
        # an uncertified relaxation gives no bound: the node is only ever branched
        bound = -rep.objective if rep.ok else math.inf
        return _Node(-bound, next(self.seq), fix, x, bound)

    def run(self, warm: StrategyProfile | None) -> MpecSolution:
        p = self.p
        if warm is not None:
            self.heuristic(np.asarray(warm.gen[p.leader], dtype=float))
        root = self.solve_node({})
        if root is None:
            raise RuntimeError("leader problem relaxation is infeasible")
        heap = [root]
        nodes = 0
        top = root.bound
        while heap:
            node = heapq.heappop(heap)
            top = node.bound
            if self.best is not None and self._closed(top):
                break
            if nodes >= self.node_budget:
                heapq.heappush(heap, node)
                break
            nodes += 1
            if nodes == 1 or nodes % 8 == 0:
                self.heuristic(self.leader_gen_of(node.x))
            viol = _violations(self.m, node.x)
            free = np.array([k not in node.fix for k in range(len(viol))])
            viol = np.where(free, viol, -1.0)
            k = int(np.argmax(viol)) if len(viol) else -1
            if k < 0 or viol[k] <= COMP_TOL:
                # relaxation optimum is complementary: exact within this subtree
                self.try_pattern({**_pattern_of(p, self.m, node.x), **node.fix})
                continue
            for side in (0, 1):
                child = self.solve_node({**node.fix, k: side})
                if child is None:
                    continue
                if self.best is not None and self._closed(child.bound):
                    continue
                heapq.heappush(heap, child)
        else:
            top = -math.inf
        if heap:
            top = max(top, max(n.bound for n in heap))
        if self.best is None:
            raise NodeBudgetExhausted(None, math.inf, nodes)
        best = self.best
        bound = max(top, best.leader_profit)
        gap = (bound - best.leader_profit) / max(1.0, abs(best.leader_profit))
        best.bound = bound
        best.nodes = nodes
        best.report.iterations = nodes
        best.report.detail = f"nodes={nodes} qps={self.qps} gap={gap:.3g}"
        if nodes >= self.node_budget and gap > self.gap_tol:
            best.report.flags.add("heuristic")
            raise NodeBudgetExhausted(best, gap, nodes)
        return best

    def _closed(self, bound: float) -> bool:
        b = self.best.leader_profit
        return bound <= b + self.gap_tol * max(1.0, abs(b))


def solve_mpec(
    p: MpecProblem,
    warm: StrategyProfile | None = None,
    node_budget: int = NODE_BUDGET,
    gap_tol: float = GAP_TOL,
) -> MpecSolution:
    """Global optimum of the leader problem by best-first branch-and-bound.

    Raises :class:`NodeBudgetExhausted` (carrying the incumbent) if the
    relative gap is still above ``gap_tol`` after ``node_budget`` nodes.
    """
    return _Search(p, node_budget, gap_tol).run(warm)
