import numpy as np
import pytest

from fringe_epec.market_data import Technology
from fringe_epec.mcp_model import solve_market_mcp
from fringe_epec.mpec import (
    ComplementarityPattern,
    NodeBudgetExhausted,
    RivalInfeasible,
    UnknownLeader,
    build_mpec,
    check_lower_level_optimality,
    fringe_response,
    leader_objective,
    pattern_qp,
    solve_mpec,
    with_fringe_response,
)
from fringe_epec.numerics import finite_diff_check
from fringe_epec.outcome import StrategyProfile
from conftest import enumerate_patterns, random_micro_market, tiny_market

U = Technology("u", 10.0, 0.0)


def _monopoly(cap=100.0):
    return tiny_market([{"u": cap}], [{"u": 0.0}], [U], [50.0], slope=2.0)


def test_monopoly_closed_form():
    s = solve_mpec(build_mpec(_monopoly(), "l1"))
    assert s.leader_gen[0, 0] == pytest.approx(10.0, abs=1e-6)  # (A - C) / (2B)
    assert s.leader_profit == pytest.approx(200.0, rel=1e-8)
    assert s.prices[0] == pytest.approx(30.0, abs=1e-6)


def test_capacity_binding_monopoly():
    s = solve_mpec(build_mpec(_monopoly(cap=4.0), "l1"))
    assert s.leader_gen[0, 0] == pytest.approx(4.0, abs=1e-5)
    assert s.leader_profit == pytest.approx(4.0 * (50 - 8 - 10), rel=1e-6)


def test_stackelberg_with_fringe():
    # leader and fringe on the same unit, fringe has ample capacity: the
    # fringe prices at cost, so the leader earns nothing
    d = tiny_market([{"u": 100.0}], [{"u": 100.0}], [U], [50.0], slope=1.0)
    s = solve_mpec(build_mpec(d, "l1"))
    assert s.prices[0] == pytest.approx(10.0, abs=1e-6)
    assert s.leader_profit == pytest.approx(0.0, abs=1e-6)
    assert check_lower_level_optimality(s, d) <= 1e-6


def test_big_m_times_ten_is_stable(data):
    base = solve_mpec(build_mpec(data, "l1"))
    wide = solve_mpec(build_mpec(data, "l1", big_m=10.0))
    assert wide.leader_profit == pytest.approx(base.leader_profit, rel=1e-3)


def test_default_leader_alone(data):
    s = solve_mpec(build_mpec(data, "l1"))
    assert s.leader_profit == pytest.approx(23.287e6, rel=1e-3)
    assert np.allclose(s.prices, (34.0, 34.0, 34.0, 43.015, 63.38), atol=0.01)
    assert check_lower_level_optimality(s, data) <= 1e-4


def test_infeasible_pattern():
    # r1 = 1 forces the fringe stationarity row tight while r3 = 0 zeroes its
    # capacity dual; with a small leader the price stays above cost, so the
    # row cannot be tight
    d = tiny_market([{"u": 1.0}], [{"u": 5.0}], [U], [50.0], slope=1.0)
    p = build_mpec(d, "l1")
    pat = ComplementarityPattern(np.ones((1, 1, 1), np.int8), np.zeros((1, 0), np.int8), np.zeros((1, 1, 1), np.int8))
    sol, rep = pattern_qp(p, pat)
    assert sol is None and rep.status.value == "infeasible"


def test_mcp_pattern_is_feasible(data):
    # the fringe pattern observed at perfect competition admits a point
    o = solve_market_mcp(data, 0.0)
    p = build_mpec(data, "l1", o.profile())
    s = solve_mpec(p, warm=o.profile())
    sol, _ = pattern_qp(p, s.pattern)
    assert sol is not None
    assert sol.leader_profit == pytest.approx(s.leader_profit, rel=1e-6, abs=1e-3)


def test_leader_objective_gradient(data):
    p = build_mpec(data, "l2", {"l1": {"gen": np.full((6, 5), 50.0) * (data.capacity[0][:, None] > 0)}})
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 500, size=p.layout.n)
    assert finite_diff_check(lambda v: leader_objective(p, v), x) <= 1e-5


def test_corrupted_lower_level_detected(data):
    s = solve_mpec(build_mpec(data, "l1"))
    prof = s.profile(build_mpec(data, "l1"))
    assert check_lower_level_optimality(prof, data) <= 1e-4
    prof.gen[2, data.tech_index("new_midmerit")] *= 0.5
    assert check_lower_level_optimality(prof, data) > 1.0


def test_fringe_response_restores_optimality(data):
    s = solve_mpec(build_mpec(data, "l1"))
    prof = s.profile(build_mpec(data, "l1"))
    prof.gen[list(data.fringe)] = 0.0
    assert check_lower_level_optimality(with_fringe_response(data, prof), data) <= 1e-4


def test_bad_leader_and_rivals(data):
    with pytest.raises(UnknownLeader):
        build_mpec(data, "f3")
    with pytest.raises(UnknownLeader):
        build_mpec(data, "nobody")
    with pytest.raises(RivalInfeasible):
        build_mpec(data, "l1", {"l2": {"gen": np.full((6, 5), 1e5)}})


def test_node_budget_carries_incumbent(data):
    with pytest.raises(NodeBudgetExhausted) as exc:
        solve_mpec(build_mpec(data, "l1"), node_budget=1)
    assert exc.value.nodes >= 1


@pytest.mark.parametrize("seed", range(100))
def test_micro_matches_enumeration(seed):
    d = random_micro_market(np.random.default_rng(seed))
    p = build_mpec(d, "l1")
    assert len(p.layout.pairs) <= 12
    ref = enumerate_patterns(p)
    got = solve_mpec(p, gap_tol=1e-8).leader_profit
    assert got == pytest.approx(ref, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("others", [
    # price-maker totals on which pivoting once met a near-zero pivot element
    [1750.6532666631797, 1896.9655585536032, 2299.7148710604624, 2320.6934237863616, 2666.4443837653475],
    [1353.12626716473, 1501.8273365075543, 1891.2266014414863, 1912.2051541673204, 2257.9561141463646],
    # degenerate end point: a unit priced at its cost must not be left short
    [863.9569387973868, 974.3569875916651, 1377.106299992253, 1398.084851848243, 1743.835811583987],
])
def test_fringe_response_on_degenerate_residual_demand(data, others):
    gF, iF, lam, prices = fringe_response(data, np.array(others))
    gen = np.zeros((data.n_firms, data.n_tech, data.periods))
    inv = np.zeros((data.n_firms, data.n_tech))
    for j, f in enumerate(data.fringe):
        gen[f], inv[f] = gF[j], iF[j]
    assert gF.min() >= -1e-9 and iF.min() >= -1e-9
    assert np.all(gF <= (data.capacity[list(data.fringe)] + iF)[:, :, None] + 1e-6)
    s = StrategyProfile(gen, inv, data.intercepts - data.slope * (np.array(others) + gF.sum(axis=(0, 1))), np.zeros_like(gen), True)
    assert np.allclose(s.prices, prices, atol=1e-9)
    assert check_lower_level_optimality(s, data) <= 1e-4
