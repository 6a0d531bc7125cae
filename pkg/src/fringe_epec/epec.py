"""Nash equilibria among the leaders' bilevel problems.

Gauss-Seidel diagonalisation over globally solved leader problems, seeded
either by the joint stationarity program (:mod:`fringe_epec.lm`) or directly
by random profiles, inside a multistart loop.
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fringe_epec.lm import (
    LmModel,
    LmPoint,
    build_leyffer_munson,
    point_from_profile,
    random_start,
    solve_leyffer_munson,
)
from fringe_epec.market_data import MarketData, check
from fringe_epec.mpec import (
    NodeBudgetExhausted,
    build_mpec,
    check_lower_level_optimality,
    leader_profit,
    solve_mpec,
    with_fringe_response,
)
from fringe_epec.numerics import NlpOptions, SolveStatus
from fringe_epec.outcome import StrategyProfile, project_profile

log = logging.getLogger(__name__)

ORDER_POLICIES = ("l1_first", "l2_first", "split_half", "round_robin")
FAILURE_REASONS = ("lm_infeasible", "gs_no_convergence")
GS_TOL = 1e-3
GS_MAX_ITER = 100
# a leader keeps its current strategy unless re-solving gains more than this
KEEP_RTOL = 1e-6
NASH_RTOL = 1e-3
THREADS_ENV = "FRINGE_EPEC_THREADS"


class NoConvergence(RuntimeError):
    """Diagonalisation hit its iteration cap; ``trajectory`` holds the per-sweep movement."""

    def __init__(self, message: str, trajectory: list[float], profile: StrategyProfile | None = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.profile = profile


@dataclass
class EquilibriumRecord:
    profile: StrategyProfile
    leader_profits: dict[str, float]
    leader_order: tuple[str, ...]
    seed: int
    lm_objective: float
    gs_iterations: int
    deviation_residual: float
    attempt: int = 0
    lower_level_residual: float = 0.0
    trajectory: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "attempt": self.attempt,
            "seed": self.seed,
            "leader_order": list(self.leader_order),
            "leader_profits": self.leader_profits,
            "lm_objective": self.lm_objective,
            "gs_iterations": self.gs_iterations,
            "deviation_residual": self.deviation_residual,
            "lower_level_residual": self.lower_level_residual,
            "trajectory": self.trajectory,
            "profile": self.profile.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EquilibriumRecord":
        return cls(
            StrategyProfile.from_dict(doc["profile"]),
            {k: float(v) for k, v in doc["leader_profits"].items()},
            tuple(doc["leader_order"]),
            int(doc["seed"]),
            float(doc["lm_objective"]),
            int(doc["gs_iterations"]),
            float(doc["deviation_residual"]),
            int(doc.get("attempt", 0)),
            float(doc.get("lower_level_residual", 0.0)),
            [float(v) for v in doc.get("trajectory", [])],
        )


@dataclass
class EquilibriumSet:
    records: list[EquilibriumRecord] = field(default_factory=list)
    attempts: int = 0
    failure_reasons: Counter = field(default_factory=Counter)
    meta: dict = field(default_factory=dict)

    @property
    def successes(self) -> int:
        return len(self.records)

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0

    def to_dict(self) -> dict:
        return {
            "attempts": self.attempts,
            "successes": self.successes,
            "failure_reasons": {k: int(self.failure_reasons.get(k, 0)) for k in FAILURE_REASONS},
            "meta": self.meta,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EquilibriumSet":
        out = cls(
            [EquilibriumRecord.from_dict(r) for r in doc.get("records", [])],
            int(doc["attempts"]),
            Counter({k: int(v) for k, v in doc.get("failure_reasons", {}).items()}),
            dict(doc.get("meta", {})),
        )
        if "successes" in doc and int(doc["successes"]) != out.successes:
            raise ValueError("successes does not match the number of records")
        return out


# --------------------------------------------------------------------------
# profiles


def resolve_order(data: MarketData, order) -> tuple[int, ...]:
    """Leader indices from ids or indices; ``None`` means data order."""
    if order is None:
        return tuple(data.leaders)
    out = []
    for o in order:
        idx = data.firm_index(o) if isinstance(o, str) else int(o)
        if idx not in data.leaders:
            raise ValueError(f"{o!r} is not a price-making firm")
        out.append(idx)
    if sorted(out) != sorted(data.leaders):
        raise ValueError("order must be a permutation of the price-making firms")
    return tuple(out)


def order_for_attempt(data: MarketData, policy: str, attempt: int, iterations: int) -> tuple[int, ...]:
    base = tuple(data.leaders)
    if policy == "l1_first":
        return base
    if policy == "l2_first":
        return base[1:] + base[:1]
    if policy == "split_half":
        return base if attempt < (iterations + 1) // 2 else base[1:] + base[:1]
    if policy == "round_robin":
        k = attempt % len(base)
        return base[k:] + base[:k]
    raise ValueError(f"unknown order policy {policy!r}; expected one of {ORDER_POLICIES}")


# --------------------------------------------------------------------------
# diagonalisation


def _best_response(data: MarketData, prof: StrategyProfile, leader: int, node_budget: int | None):
    """``(current value, best value, profile after the best response)``.

    The current value re-evaluates the leader's present strategy against the
    fringe's response, so it is directly comparable with the optimum.
    """
    cur = with_fringe_response(data, prof)
    v = leader_profit(data, cur.gen[leader], cur.inv[leader], cur.prices)
    p = build_mpec(data, leader, cur)
    kw = {} if node_budget is None else {"node_budget": node_budget}
    try:
        s = solve_mpec(p, warm=cur, **kw)
    except NodeBudgetExhausted as exc:
        if exc.incumbent is None:
            raise
        s = exc.incumbent
    return v, s.leader_profit, cur, s.profile(p)


def _movement(a: StrategyProfile, b: StrategyProfile, leaders) -> float:
    idx = list(leaders)
    return float(np.abs(a.gen[idx] - b.gen[idx]).sum() + np.abs(a.inv[idx] - b.inv[idx]).sum())


def deviation_residual(data: MarketData, profile: StrategyProfile, node_budget: int | None = None) -> float:
    """Largest profit gain any price-maker obtains by re-solving its problem."""
    worst = 0.0
    for l in data.leaders:
        v, best, _, _ = _best_response(data, profile, l, node_budget)
        worst = max(worst, best - v)
    return worst


def gauss_seidel(
    data: MarketData,
    start: StrategyProfile,
    order=None,
    tol: float = GS_TOL,
    max_iter: int = GS_MAX_ITER,
    node_budget: int | None = None,
    seed: int = 0,
    lm_objective: float = float("nan"),
) -> EquilibriumRecord:
    """Cycle best responses in ``order`` until a sweep moves the price-makers
    by at most ``tol`` MW (L1 over generation and investment).

    A leader whose optimal value does not beat its current strategy (with the
    fringe re-responding) by more than ``KEEP_RTOL`` keeps that strategy, so a
    fixed point is reproduced exactly instead of hopping between optima of
    equal value.  Raises :class:`NoConvergence` after ``max_iter`` sweeps.
    """
    check(data, require_players=True)
    seq = resolve_order(data, order)
    prof = with_fringe_response(data, project_profile(data, start))
    traj: list[float] = []
    for sweep in range(1, max_iter + 1):
        moved = 0.0
        for l in seq:
            v, best, cur, new = _best_response(data, prof, l, node_budget)
            if best <= v + KEEP_RTOL * (1.0 + abs(v)):
                prof = cur
                continue
            moved += _movement(prof, new, [l])
            prof = new
        traj.append(moved)
        log.debug("sweep %d moved %.4g MW", sweep, moved)
        if moved <= tol:
            break
    else:
        raise NoConvergence(f"no convergence after {max_iter} sweeps", traj, prof)
    prof = with_fringe_response(data, prof)
    dev = deviation_residual(data, prof, node_budget)
    profits = prof.profits(data)
    return EquilibriumRecord(
        profile=prof,
        leader_profits={data.firms[l].id: float(profits[l]) for l in data.leaders},
        leader_order=tuple(data.firms[l].id for l in seq),
        seed=int(seed),
        lm_objective=float(lm_objective),
        gs_iterations=len(traj),
        deviation_residual=float(dev),
        lower_level_residual=float(check_lower_level_optimality(prof, data)),
        trajectory=traj,
    )


def is_nash(record: EquilibriumRecord, rtol: float = NASH_RTOL) -> bool:
    scale = 1.0 + max((abs(v) for v in record.leader_profits.values()), default=0.0)
    return record.deviation_residual <= rtol * scale


# --------------------------------------------------------------------------
# multistart


def lm_accepted(rep) -> bool:
    """A stationary point, or a point feasible for every stationarity row."""
    return rep.status is SolveStatus.OPTIMAL or "feasible" in rep.flags


def attempt_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(attempt)]).generate_state(1)[0])


@dataclass
class _Outcome:
    attempt: int
    record: EquilibriumRecord | None
    reason: str | None


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
    return os.cpu_count() or 1


def run_attempt(
    data: MarketData,
    attempt: int,
    seed: int,
    order: tuple[int, ...],
    use_lm: bool = True,
    tol: float = GS_TOL,
    max_gs: int = GS_MAX_ITER,
    model: LmModel | None = None,
    lm_options: NlpOptions | None = None,
) -> _Outcome:
    s = attempt_seed(seed, attempt)
    model = model or build_leyffer_munson(data)
    start = random_start(data, s, model)
    lm_obj = float("nan")
    if use_lm:
        try:
            point, rep = solve_leyffer_munson(data, start, model, lm_options)
        except (ArithmeticError, ValueError) as exc:
            log.info("attempt %d: LM failed: %s", attempt, exc)
            return _Outcome(attempt, None, "lm_infeasible")
        if not lm_accepted(rep):
            return _Outcome(attempt, None, "lm_infeasible")
        start, lm_obj = point, point.objective_value
    try:
        rec = gauss_seidel(data, start.profile, order, tol, max_gs, seed=s, lm_objective=lm_obj)
    except (NoConvergence, NodeBudgetExhausted, RuntimeError) as exc:
        log.info("attempt %d: GS failed: %s", attempt, exc)
        return _Outcome(attempt, None, "gs_no_convergence")
    if not is_nash(rec):
        log.info("attempt %d: fixed point fails the deviation check (%.3g)", attempt, rec.deviation_residual)
        return _Outcome(attempt, None, "gs_no_convergence")
    rec.attempt = attempt
    return _Outcome(attempt, rec, None)


def find_equilibria(
    data: MarketData,
    iterations: int,
    seed: int = 0,
    order_policy: str = "split_half",
    use_lm: bool = True,
    tol: float = GS_TOL,
    max_gs: int = GS_MAX_ITER,
    workers: int | None = None,
    lm_options: NlpOptions | None = None,
    progress=None,
) -> EquilibriumSet:
    """Multistart search: random start, optional LM solve, diagonalisation.

    Deterministic in ``(seed, iterations, order_policy, use_lm)``; records are
    ordered by attempt index whatever the number of worker threads.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if order_policy not in ORDER_POLICIES:
        raise ValueError(f"unknown order policy {order_policy!r}; expected one of {ORDER_POLICIES}")
    check(data, require_players=True)
    model = build_leyffer_munson(data)
    workers = min(workers or _threads(), iterations)

    def one(i: int) -> _Outcome:
        out = run_attempt(
            data, i, seed, order_for_attempt(data, order_policy, i, iterations),
            use_lm, tol, max_gs, model, lm_options,
        )
        if progress is not None:
            progress(out)
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(one, range(iterations)))
    else:
        outs = [one(i) for i in range(iterations)]
    result = EquilibriumSet(attempts=iterations)
    for k in FAILURE_REASONS:
        result.failure_reasons[k] = 0
    for o in sorted(outs, key=lambda o: o.attempt):
        if o.record is not None:
            result.records.append(o.record)
        else:
            result.failure_reasons[o.reason] += 1
    result.meta = {
        "dataset": data.name,
        "seed": int(seed),
        "iterations": int(iterations),
        "order_policy": order_policy,
        "use_lm": bool(use_lm),
        "tol": tol,
        "max_gs": max_gs,
    }
    return result


__all__ = [
    "EquilibriumRecord",
    "EquilibriumSet",
    "FAILURE_REASONS",
    "LmPoint",
    "NoConvergence",
    "ORDER_POLICIES",
    "attempt_seed",
    "build_leyffer_munson",
    "deviation_residual",
    "find_equilibria",
    "gauss_seidel",
    "is_nash",
    "order_for_attempt",
    "point_from_profile",
    "random_start",
    "run_attempt",
    "solve_leyffer_munson",
    "with_fringe_response",
]
