"""Joint strong-stationarity program for all leaders (Leyffer-Munson start).

Each leader's problem is restated with slacks, its Lagrangian is assembled as
a polynomial, and the stationarity rows are obtained by differentiating that
polynomial.  The rows of all leaders, together with the shared primal
equalities, form the constraint set; the complementarity products are moved
into the objective.

Scaling: every variable has a natural unit (GW for quantities, the period
weight for price-weighted duals, ...).  The solver works on ``z = x / scale``
with unit-normalised rows and minimises the sum of *scaled* products, which
vanishes exactly when the unscaled sum does.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from fringe_epec.market_data import MarketData, check
from fringe_epec.numerics import NlpOptions, NlpProblem, SolveReport, SolveStatus, TOL, solve_nlp_local
from fringe_epec.mpec import with_fringe_response
from fringe_epec.outcome import StrategyProfile, clearing_prices, project_profile

Q_UNIT = 1e3  # MW per natural quantity unit
MULT_HIGH = 100.0  # random multipliers are drawn from [0, MULT_HIGH]
LM_FEAS_TOL = 1e-6  # normalised row residual of an accepted point
LM_OPTIONS = NlpOptions(max_outer=4, max_inner=250, rho0=1e3)


# --------------------------------------------------------------------------
# polynomials in the stacked variable vector


class Poly:
    """Sparse polynomial: ``{sorted var-index tuple: coefficient}``."""

    __slots__ = ("terms",)

    def __init__(self, terms: dict | None = None):
        self.terms: dict[tuple[int, ...], float] = defaultdict(float)
        if terms:
            for k, v in terms.items():
                self.terms[k] += v

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls({(): float(c)})

    @classmethod
    def var(cls, i: int, coef: float = 1.0) -> "Poly":
        return cls({(int(i),): float(coef)})

    def __add__(self, other: "Poly") -> "Poly":
        out = Poly(self.terms)
        for k, v in other.terms.items():
            out.terms[k] += v
        return out

    def __iadd__(self, other: "Poly") -> "Poly":
        for k, v in other.terms.items():
            self.terms[k] += v
        return self

    def __isub__(self, other: "Poly") -> "Poly":
        for k, v in other.terms.items():
            self.terms[k] -= v
        return self

    def __sub__(self, other: "Poly") -> "Poly":
        return self + other.scale(-1.0)

    def scale(self, c: float) -> "Poly":
        return Poly({k: c * v for k, v in self.terms.items()})

    def times_var(self, i: int) -> "Poly":
        return Poly({tuple(sorted(k + (int(i),))): v for k, v in self.terms.items()})

    def diff(self, i: int) -> "Poly":
        out = Poly()
        for k, v in self.terms.items():
            m = k.count(i)
            if m:
                rest = list(k)
                rest.remove(i)
                out.terms[tuple(rest)] += m * v
        return out

    def gradient(self, wrt) -> dict[int, "Poly"]:
        """``{i: d self / d x_i}`` for every ``i`` in ``wrt``, in one pass."""
        want = set(int(i) for i in wrt)
        out = {i: Poly() for i in want}
        for k, v in self.terms.items():
            for pos, i in enumerate(k):
                if i in want and (pos == 0 or k[pos - 1] != i):
                    m = k.count(i)
                    rest = list(k)
                    rest.remove(i)
                    out[i].terms[tuple(rest)] += m * v
        return out

    @property
    def degree(self) -> int:
        return max((len(k) for k, v in self.terms.items() if v != 0.0), default=0)

    def __call__(self, x: np.ndarray) -> float:
        return float(sum(v * np.prod(x[list(k)]) for k, v in self.terms.items()))


def lin_sum(idx, coef: float = 1.0) -> Poly:
    return Poly({(int(i),): coef for i in np.ravel(idx)})


class QuadSystem:
    """Rows of degree <= 2, evaluated vectorised with a sparse Jacobian."""

    def __init__(self, rows: list[Poly], n: int):
        self.n = n
        self.m = len(rows)
        c0, l_r, l_i, l_c, q_r, q_i, q_j, q_c = [], [], [], [], [], [], [], []
        const = np.zeros(self.m)
        for r, poly in enumerate(rows):
            for k, v in poly.terms.items():
                if v == 0.0:
                    continue
                if len(k) == 0:
                    const[r] += v
                elif len(k) == 1:
                    l_r.append(r), l_i.append(k[0]), l_c.append(v)
                elif len(k) == 2:
                    q_r.append(r), q_i.append(k[0]), q_j.append(k[1]), q_c.append(v)
                else:
                    raise ValueError("row of degree > 2")
        self.const = const
        self.A = sp.csr_matrix((l_c, (l_r, l_i)), shape=(self.m, n))
        self.qr = np.array(q_r, dtype=int)
        self.qi = np.array(q_i, dtype=int)
        self.qj = np.array(q_j, dtype=int)
        self.qc = np.array(q_c, dtype=float)

    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.const + self.A @ x
        if len(self.qr):
            out += np.bincount(self.qr, self.qc * x[self.qi] * x[self.qj], minlength=self.m)
        return out

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        rows = np.concatenate([self.qr, self.qr])
        cols = np.concatenate([self.qi, self.qj])
        vals = np.concatenate([self.qc * x[self.qj], self.qc * x[self.qi]])
        return (self.A + sp.csr_matrix((vals, (rows, cols)), shape=(self.m, self.n))).tocsr()


# --------------------------------------------------------------------------
# variable layout


@dataclass
class LmLayout:
    """Named blocks of the stacked LM vector.

    Shared blocks (no leader index): gL (L,T,P), iL (L,I), gF (F,T,P),
    iF (F,I), lam (F,T,P), s_kkt_gen (F,T,P), s_kkt_inv (F,I),
    s_con_fr (F,T,P), s_con_lr (L,T,P).  Per-leader multiplier copies are
    stored under ``(name, l)``.
    """

    n: int = 0
    blocks: dict = field(default_factory=dict)
    lower: list = field(default_factory=list)
    scale: list = field(default_factory=list)
    leaders: tuple = ()

    def add(self, key, shape, lower: float, scale) -> np.ndarray:
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        self.blocks[key] = idx
        self.lower.extend([lower] * size)
        self.scale.extend(np.broadcast_to(scale, shape).ravel().tolist())
        return idx

    def __getitem__(self, key) -> np.ndarray:
        return self.blocks[key]

    def unpack(self, x: np.ndarray) -> dict:
        return {k: x[v] for k, v in self.blocks.items()}


MULTIPLIERS = (
    # name, shape kind, sign (0: >= 0, None: free), unit kind
    ("lambda_pm", "LTP", None, "w"),
    ("chi_gen", "TP", 0, "w"),
    ("chi_inv", "I", 0, "wbar"),
    ("mu_con_lr", "TP", 0, "w"),
    ("alpha_kkt_gen", "FTP", None, "q"),
    ("mu_kkt_gen", "FTP", 0, "w"),
    ("mu_s_kkt_gen", "FTP", 0, "q"),
    ("mu_gen_s_kkt_gen", "FTP", None, "one"),
    ("alpha_kkt_inv", "FI", None, "q"),
    ("mu_kkt_inv", "FI", 0, "wbar"),
    ("mu_kkt_s_inv", "FI", 0, "q"),
    ("mu_inv_s_kkt_inv", "FI", None, "one"),
    ("alpha_con", "FTP", None, "w"),
    ("mu_con", "FTP", 0, "q"),
    ("mu_s_con", "FTP", 0, "w"),
    ("mu_con_s_con", "FTP", None, "one"),
)


def _layout(d: MarketData) -> LmLayout:
    L, F = len(d.leaders), len(d.fringe)
    T, P, I = d.n_tech, d.periods, len(d.investable_idx)
    W = d.weights
    wbar = float(W.mean())
    lay = LmLayout(leaders=tuple(d.leaders))
    lay.add("gL", (L, T, P), 0.0, Q_UNIT)
    lay.add("iL", (L, I), 0.0, Q_UNIT)
    lay.add("gF", (F, T, P), 0.0, Q_UNIT)
    lay.add("iF", (F, I), 0.0, Q_UNIT)
    lay.add("lam", (F, T, P), 0.0, np.broadcast_to(W, (F, T, P)))
    lay.add("s_kkt_gen", (F, T, P), 0.0, np.broadcast_to(W, (F, T, P)))
    lay.add("s_kkt_inv", (F, I), 0.0, wbar)
    lay.add("s_con_fr", (F, T, P), 0.0, Q_UNIT)
    lay.add("s_con_lr", (L, T, P), 0.0, Q_UNIT)
    shapes = {"TP": (T, P), "I": (I,), "FTP": (F, T, P), "FI": (F, I), "LTP": (T, P)}
    for li in range(L):
        for name, kind, sign, unit in MULTIPLIERS:
            shape = shapes[kind]
            if unit == "w":
                s = np.broadcast_to(W, shape)
            elif unit == "wbar":
                s = wbar
            elif unit == "q":
                s = Q_UNIT
            else:
                s = 1.0
            lay.add((name, li), shape, 0.0 if sign == 0 else -np.inf, s)
    return lay


# --------------------------------------------------------------------------
# model


@dataclass
class LmModel:
    data: MarketData
    layout: LmLayout
    constraints: QuadSystem  # unscaled rows
    objective_pairs: np.ndarray  # (k, 2) index pairs of the complementarity products
    lagrangians: list  # Poly per leader
    decision_vars: list  # index arrays per leader
    row_names: list
    lower: np.ndarray
    upper: np.ndarray
    xscale: np.ndarray
    rscale: np.ndarray

    @property
    def n(self) -> int:
        return self.layout.n

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Sum of complementarity products (unscaled) and its gradient."""
        i, j = self.objective_pairs[:, 0], self.objective_pairs[:, 1]
        f = float(np.sum(x[i] * x[j]))
        g = np.zeros(self.n)
        np.add.at(g, i, x[j])
        np.add.at(g, j, x[i])
        return f, g

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.constraints.value(x)

    def nlp(self) -> NlpProblem:
        """Scaled problem in ``z = x / xscale``."""
        s = self.xscale
        r = self.rscale
        i, j = self.objective_pairs[:, 0], self.objective_pairs[:, 1]

        def obj(z):
            f = float(np.sum(z[i] * z[j]))
            g = np.zeros(self.n)
            np.add.at(g, i, z[j])
            np.add.at(g, j, z[i])
            return f, g

        def cons(z):
            x = s * z
            c = r * self.constraints.value(x)
            J = sp.diags(r) @ self.constraints.jacobian(x) @ sp.diags(s)
            return c, J.tocsr()

        return NlpProblem(self.n, obj, cons, self.lower / s, self.upper / s)


def _shared_rows(d: MarketData, lay: LmLayout):
    """Primal definitions of the slacks (identical in every leader problem)."""
    W, A, B, C = d.weights, d.intercepts, d.slope, d.marginal_cost
    L, F = len(d.leaders), len(d.fringe)
    T, P = d.n_tech, d.periods
    inv_pos = {t: k for k, t in enumerate(d.investable_idx)}
    gL, iL, gF, iF, lam = lay["gL"], lay["iL"], lay["gF"], lay["iF"], lay["lam"]
    rows: dict[tuple, Poly] = {}
    for li, l in enumerate(d.leaders):
        for t in range(T):
            for p in range(P):
                e = Poly.const(d.capacity[l, t]) - Poly.var(gL[li, t, p]) - Poly.var(lay["s_con_lr"][li, t, p])
                if t in inv_pos:
                    e = e + Poly.var(iL[li, inv_pos[t]])
                rows["con_lr", li, t, p] = e
    for p in range(P):
        total = lin_sum(gL[:, :, p]) + lin_sum(gF[:, :, p])
        for fj in range(F):
            for t in range(T):
                # -W (A - B Y - C) + lam - s = 0
                e = Poly.const(-W[p] * (A[p] - C[t])) + total.scale(W[p] * B)
                e = e + Poly.var(lam[fj, t, p]) - Poly.var(lay["s_kkt_gen"][fj, t, p])
                rows["kkt_gen", fj, t, p] = e
    for fj, f in enumerate(d.fringe):
        for t, k in inv_pos.items():
            e = Poly.const(d.invest_cost[t]) - lin_sum(lam[fj, t, :]) - Poly.var(lay["s_kkt_inv"][fj, k])
            rows["kkt_inv", fj, k] = e
        for t in range(T):
            for p in range(P):
                e = Poly.const(d.capacity[f, t]) - Poly.var(gF[fj, t, p]) - Poly.var(lay["s_con_fr"][fj, t, p])
                if t in inv_pos:
                    e = e + Poly.var(iF[fj, inv_pos[t]])
                rows["con_fr", fj, t, p] = e
    return rows


def _leader_lagrangian(d: MarketData, lay: LmLayout, li: int, shared: dict) -> tuple[Poly, np.ndarray, list]:
    """Lagrangian of leader ``li`` (minimising minus profit) and its decision variables."""
    W, A, B, C = d.weights, d.intercepts, d.slope, d.marginal_cost
    T, P = d.n_tech, d.periods
    F = len(d.fringe)
    inv_pos = {t: k for k, t in enumerate(d.investable_idx)}
    gL, iL, gF, iF, lam = lay["gL"], lay["iL"], lay["gF"], lay["iF"], lay["lam"]
    skg, ski, scf, scl = lay["s_kkt_gen"], lay["s_kkt_inv"], lay["s_con_fr"], lay["s_con_lr"]
    m = {name: lay[name, li] for name, *_ in MULTIPLIERS}

    Lg = Poly()
    # minus profit: -sum W (A - B Y - C) gL + IC iL
    for p in range(P):
        total = lin_sum(gL[:, :, p]) + lin_sum(gF[:, :, p])
        for t in range(T):
            v = gL[li, t, p]
            Lg += Poly.var(v, -W[p] * (A[p] - C[t])) + total.times_var(v).scale(W[p] * B)
    for t, k in inv_pos.items():
        Lg += Poly.var(iL[li, k], d.invest_cost[t])
    # equalities; the sign of each multiplier term is a convention
    for t in range(T):
        for p in range(P):
            Lg -= shared["con_lr", li, t, p].times_var(m["lambda_pm"][t, p])
    for fj in range(F):
        for t in range(T):
            for p in range(P):
                Lg += shared["kkt_gen", fj, t, p].times_var(m["alpha_kkt_gen"][fj, t, p])
                Lg += shared["con_fr", fj, t, p].times_var(m["alpha_con"][fj, t, p])
                Lg += Poly({tuple(sorted((gF[fj, t, p], skg[fj, t, p], m["mu_gen_s_kkt_gen"][fj, t, p]))): 1.0})
                Lg += Poly({tuple(sorted((lam[fj, t, p], scf[fj, t, p], m["mu_con_s_con"][fj, t, p]))): 1.0})
        for k in range(len(inv_pos)):
            Lg += shared["kkt_inv", fj, k].times_var(m["alpha_kkt_inv"][fj, k])
            Lg += Poly({tuple(sorted((iF[fj, k], ski[fj, k], m["mu_inv_s_kkt_inv"][fj, k]))): 1.0})
    # nonnegativity: - mu * x
    bounds = [
        (gL[li], m["chi_gen"]),
        (iL[li], m["chi_inv"]),
        (scl[li], m["mu_con_lr"]),
        (gF, m["mu_kkt_gen"]),
        (skg, m["mu_s_kkt_gen"]),
        (iF, m["mu_kkt_inv"]),
        (ski, m["mu_kkt_s_inv"]),
        (lam, m["mu_con"]),
        (scf, m["mu_s_con"]),
    ]
    for xs, ms in bounds:
        for a, b in zip(np.ravel(xs), np.ravel(ms)):
            Lg += Poly({tuple(sorted((int(a), int(b)))): -1.0})
    decision = np.concatenate([np.ravel(gL[li]), np.ravel(iL[li]), np.ravel(scl[li]), np.ravel(gF), np.ravel(iF),
                               np.ravel(lam), np.ravel(skg), np.ravel(ski), np.ravel(scf)])
    return Lg, decision, bounds


def build_leyffer_munson(data: MarketData) -> LmModel:
    """Assemble the joint stationarity program on ``data``."""
    check(data, require_players=True)
    lay = _layout(data)
    shared = _shared_rows(data, lay)
    rows = list(shared.values())
    names = [("primal",) + k for k in shared]
    lagr, decisions = [], []
    pairs = [
        (lay["gF"], lay["s_kkt_gen"]),
        (lay["iF"], lay["s_kkt_inv"]),
        (lay["lam"], lay["s_con_fr"]),
    ]
    for li in range(len(data.leaders)):
        Lg, dec, bounds = _leader_lagrangian(data, lay, li, shared)
        lagr.append(Lg)
        decisions.append(dec)
        grad = Lg.gradient(dec)
        for v in dec:
            rows.append(grad[int(v)])
            names.append(("stationarity", li, int(v)))
        pairs.extend(bounds)
    pair_idx = np.array([(int(a), int(b)) for xs, ms in pairs for a, b in zip(np.ravel(xs), np.ravel(ms))], dtype=int)
    system = QuadSystem(rows, lay.n)
    xscale = np.asarray(lay.scale, dtype=float)
    lower = np.asarray(lay.lower, dtype=float)
    upper = np.full(lay.n, np.inf)
    # row normalisation against nominal magnitudes of the scaled terms
    mag = np.abs(system.A @ sp.diags(xscale)).max(axis=1).toarray().ravel()
    if len(system.qr):
        qm = np.zeros(system.m)
        np.maximum.at(qm, system.qr, np.abs(system.qc) * xscale[system.qi] * xscale[system.qj])
        mag = np.maximum(mag, qm)
    rscale = 1.0 / np.where(mag > 0, mag, 1.0)
    return LmModel(data, lay, system, pair_idx, lagr, decisions, names, lower, upper, xscale, rscale)


# --------------------------------------------------------------------------
# points


@dataclass
class LmPoint:
    """A point of the joint program with its named pieces.

    ``slacks`` maps slack names to arrays; ``multipliers[l]`` maps
    multiplier names to leader ``l``'s copy.
    """

    profile: StrategyProfile
    leader_duals: np.ndarray  # (L, T, P)
    slacks: dict
    multipliers: list
    objective_value: float
    x: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "objective_value": self.objective_value,
        }


def point_from_vector(model: LmModel, x: np.ndarray) -> LmPoint:
    d = model.data
    lay = model.layout
    u = lay.unpack(x)
    F, T = d.n_firms, d.n_tech
    gen = np.zeros((F, T, d.periods))
    inv = np.zeros((F, T))
    duals = np.zeros_like(gen)
    inv_t = list(d.investable_idx)
    for li, l in enumerate(d.leaders):
        gen[l] = u["gL"][li]
        inv[l, inv_t] = u["iL"][li]
    for fj, f in enumerate(d.fringe):
        gen[f] = u["gF"][fj]
        inv[f, inv_t] = u["iF"][fj]
        duals[f] = u["lam"][fj]
    prof = StrategyProfile(gen, inv, clearing_prices(d, gen), duals, True)
    slacks = {k: u[k] for k in ("s_kkt_gen", "s_kkt_inv", "s_con_fr", "s_con_lr")}
    mults = [{name: u[name, li] for name, *_ in MULTIPLIERS} for li in range(len(d.leaders))]
    lpm = np.stack([m["lambda_pm"] for m in mults])
    return LmPoint(prof, lpm, slacks, mults, model.objective(x)[0], np.asarray(x, dtype=float).copy())


def random_start(data: MarketData, seed: int, model: LmModel | None = None) -> LmPoint:
    """Random point within bounds, deterministic in ``seed``.

    Quantities: investment ~ U[0, max A / B] on investable technologies,
    generation ~ U[0, CAP + bound] where the bound is the same investment cap
    for investable technologies and 0 otherwise.  Slacks follow from their
    linear definitions (clipped at zero); multipliers ~ U[0, 100].
    """
    model = model or build_leyffer_munson(data)
    d = data
    lay = model.layout
    rng = np.random.default_rng(seed)
    qmax = d.max_quantity
    x = np.zeros(lay.n)
    inv_t = list(d.investable_idx)
    cap_bound = d.capacity.copy()
    cap_bound[:, inv_t] += qmax
    for key, firms in (("L", d.leaders), ("F", d.fringe)):
        g = lay["g" + key]
        i = lay["i" + key]
        for j, f in enumerate(firms):
            x[i[j]] = rng.uniform(0.0, qmax, size=i[j].shape)
            x[g[j]] = rng.uniform(0.0, 1.0, size=g[j].shape) * cap_bound[f][:, None]
    x[lay["lam"]] = rng.uniform(0.0, MULT_HIGH, size=lay["lam"].shape)
    for li in range(len(d.leaders)):
        for name, *_ in MULTIPLIERS:
            idx = lay[name, li]
            x[idx] = rng.uniform(0.0, MULT_HIGH, size=idx.shape)
    _fill_slacks(model, x)
    return point_from_vector(model, x)


def _fill_slacks(model: LmModel, x: np.ndarray) -> None:
    """Set each slack from its defining primal row, clipped at zero."""
    lay = model.layout
    for name in ("s_con_lr", "s_kkt_gen", "s_kkt_inv", "s_con_fr"):
        x[lay[name]] = 0.0
    c = model.residual(x)
    m = lay["s_con_lr"].size + lay["s_kkt_gen"].size + lay["s_kkt_inv"].size + lay["s_con_fr"].size
    # shared rows come first, in the order con_lr, kkt_gen, kkt_inv, con_fr;
    # each has the form (expression) - slack = 0
    order = [n for n in model.row_names[:m]]
    slot = {"con_lr": "s_con_lr", "kkt_gen": "s_kkt_gen", "kkt_inv": "s_kkt_inv", "con_fr": "s_con_fr"}
    for r, name in enumerate(order):
        kind = name[1]
        idx = lay[slot[kind]][name[2:]]
        x[idx] = max(c[r], 0.0)


def feasibility(model: LmModel, x: np.ndarray) -> float:
    """Largest normalised row residual or bound violation of ``x``."""
    rows = float(np.abs(model.rscale * model.residual(x)).max(initial=0.0))
    below = float(np.max((model.lower - x) / model.xscale, initial=0.0))
    return max(rows, below)


def solve_leyffer_munson(
    data: MarketData,
    start: LmPoint,
    model: LmModel | None = None,
    options: NlpOptions | None = None,
) -> tuple[LmPoint, SolveReport]:
    """Local solve of the joint program from ``start``.

    Phase 1 keeps the start's price-maker decisions (clipped to capacity),
    puts the fringe at its exact response and completes the multipliers by
    LP, which yields a feasible point whenever one exists for that primal.
    Phase 2 runs the augmented-Lagrangian solver from there.  The returned
    point is the feasible one with the smaller objective.

    The report status is the phase-2 status; the flag ``"feasible"`` marks a
    returned point that satisfies every row within ``LM_FEAS_TOL``.
    """
    model = model or build_leyffer_munson(data)
    prof = with_fringe_response(data, project_profile(data, start.profile))
    p1, resid = point_from_profile(data, prof, model)
    x0 = p1.x if resid <= LM_FEAS_TOL else start.x
    z, rep = solve_nlp_local(model.nlp(), x0 / model.xscale, options or LM_OPTIONS)
    cands = [point_from_vector(model, model.xscale * z), p1]
    feas = [feasibility(model, c.x) for c in cands]
    ok = [i for i in range(2) if feas[i] <= LM_FEAS_TOL]
    pick = min(ok, key=lambda i: cands[i].objective_value) if ok else 0
    pt = cands[pick]
    rep.objective = pt.objective_value
    rep.kkt_residual = rep.kkt_residual if pick == 0 else math.inf
    if ok:
        rep.flags.add("feasible")
    if pick == 1:
        rep.flags.add("phase1")
    return pt, rep


def point_from_profile(data: MarketData, profile: StrategyProfile, model: LmModel | None = None) -> tuple[LmPoint, float]:
    """Complete a primal profile with multipliers minimising the product sum.

    With the primal part fixed every row is linear in the multipliers and so
    is the objective; the completion is an LP.  Returns the point and the
    equality residual left by the LP (0 when the completion exists).
    """
    model = model or build_leyffer_munson(data)
    d = data
    lay = model.layout
    x = np.zeros(lay.n)
    inv_t = list(d.investable_idx)
    for li, l in enumerate(d.leaders):
        x[lay["gL"][li]] = profile.gen[l]
        x[lay["iL"][li]] = profile.inv[l, inv_t]
    for fj, f in enumerate(d.fringe):
        x[lay["gF"][fj]] = profile.gen[f]
        x[lay["iF"][fj]] = profile.inv[f, inv_t]
        x[lay["lam"][fj]] = profile.fringe_duals[f]
    _fill_slacks(model, x)
    primal_n = lay["s_con_lr"].ravel()[-1] + 1  # shared blocks come first
    free = np.arange(primal_n, lay.n)
    # rows: value(x) = const + A x + quad; with primal fixed, linear in free vars
    J = model.constraints.jacobian(_probe(x, free))
    c0 = model.residual(_zeroed(x, free))
    # exact linearisation: rows are affine in multipliers once primal is fixed
    Af = J[:, free]
    s = model.xscale[free]
    r = model.rscale
    # objective: products primal * multiplier are linear in multipliers
    cost = np.zeros(lay.n)
    for a, b in model.objective_pairs:
        if a < primal_n and b >= primal_n:
            cost[b] += x[a]
        elif b < primal_n and a >= primal_n:
            cost[a] += x[b]
    bounds = [(lo / sc if np.isfinite(lo) else None, None) for lo, sc in zip(model.lower[free], s)]
    res = linprog(
        cost[free] * s,
        A_eq=(sp.diags(r) @ Af @ sp.diags(s)).tocsr(),
        b_eq=-r * c0,
        bounds=bounds,
        method="highs",
    )
    if res.x is not None:
        x[free] = res.x * s
    resid = float(np.abs(model.rscale * model.residual(x)).max(initial=0.0))
    return point_from_vector(model, x), resid


def _zeroed(x: np.ndarray, free: np.ndarray) -> np.ndarray:
    y = x.copy()
    y[free] = 0.0
    return y


def _probe(x: np.ndarray, free: np.ndarray) -> np.ndarray:
    # primal-primal products never meet a multiplier, so the Jacobian with
    # respect to the free block only depends on the primal part
    return _zeroed(x, free)


__all__ = [
    "LmLayout",
    "LmModel",
    "LmPoint",
    "MULTIPLIERS",
    "Poly",
    "QuadSystem",
    "build_leyffer_munson",
    "point_from_profile",
    "point_from_vector",
    "random_start",
    "feasibility",
    "solve_leyffer_munson",
]
