import json

import numpy as np
import pytest

from fringe_epec.epec import (
    FAILURE_REASONS,
    EquilibriumSet,
    NoConvergence,
    attempt_seed,
    deviation_residual,
    find_equilibria,
    gauss_seidel,
    is_nash,
    order_for_attempt,
    resolve_order,
)
from fringe_epec.market_data import Technology
from fringe_epec.outcome import StrategyProfile
from conftest import tiny_market

A, B, C = 100.0, 1.0, 10.0
COURNOT_Q = (A - C) / (3 * B)  # each of two price-makers


def _duopoly():
    u = Technology("u", C, 0.0)
    idle = Technology("idle", 1e3, 0.0)
    # the fringe owns only a unit that never runs
    return tiny_market([{"u": 500.0}, {"u": 500.0}], [{"idle": 1.0}], [u, idle], [A], slope=B)


def _profile(d, q1, q2):
    gen = np.zeros((d.n_firms, d.n_tech, d.periods))
    gen[0, 0, 0], gen[1, 0, 0] = q1, q2
    return StrategyProfile.from_quantities(d, gen, np.zeros((d.n_firms, d.n_tech)))


@pytest.mark.parametrize("order", [("l1", "l2"), ("l2", "l1")])
def test_cournot_duopoly(order):
    d = _duopoly()
    rec = gauss_seidel(d, _profile(d, 0.0, 0.0), order=order, tol=1e-6)
    q = rec.profile.gen[[0, 1], 0, 0]
    # a leader keeps its strategy when re-solving gains < 1e-6 of profit;
    # profit is quadratic near the optimum, so q is pinned to ~sqrt(2e-6 pi / B)
    assert np.allclose(q, COURNOT_Q, atol=0.05)
    assert is_nash(rec)
    assert rec.leader_order == order


def test_fixed_point_converges_in_one_sweep():
    d = _duopoly()
    rec = gauss_seidel(d, _profile(d, COURNOT_Q, COURNOT_Q), tol=1e-6)
    assert rec.gs_iterations == 1
    assert rec.trajectory == [0.0]
    assert np.allclose(rec.profile.gen[[0, 1], 0, 0], COURNOT_Q)


def test_non_equilibrium_has_positive_deviation():
    d = _duopoly()
    assert deviation_residual(d, _profile(d, 10.0, 10.0)) > 100.0
    assert deviation_residual(d, _profile(d, COURNOT_Q, COURNOT_Q)) <= 1e-6


def test_sweep_limit():
    d = _duopoly()
    with pytest.raises(NoConvergence) as exc:
        gauss_seidel(d, _profile(d, 0.0, 0.0), max_iter=1, tol=1e-12)
    assert len(exc.value.trajectory) == 1


def test_orders(data):
    assert order_for_attempt(data, "l1_first", 5, 10) == (0, 1)
    assert order_for_attempt(data, "l2_first", 0, 10) == (1, 0)
    assert [order_for_attempt(data, "split_half", i, 5) for i in range(5)] == [(0, 1)] * 3 + [(1, 0)] * 2
    assert order_for_attempt(data, "round_robin", 3, 10) == (1, 0)
    with pytest.raises(ValueError):
        order_for_attempt(data, "random", 0, 1)
    assert resolve_order(data, ["l2", "l1"]) == (1, 0)
    with pytest.raises(ValueError):
        resolve_order(data, ["l1", "f3"])


def test_attempt_seeds_distinct():
    seeds = {attempt_seed(0, i) for i in range(200)}
    assert len(seeds) == 200
    assert attempt_seed(7, 3) == attempt_seed(7, 3)


def test_single_lm_infeasible_attempt(data):
    # the first attempt under seed 4 does not reach a feasible stationarity point
    res = find_equilibria(data, 1, seed=4, workers=1)
    assert res.successes == 0
    assert res.success_rate == 0.0
    assert dict(res.failure_reasons) == {"lm_infeasible": 1, "gs_no_convergence": 0}
    assert set(res.failure_reasons) == set(FAILURE_REASONS)


@pytest.fixture(scope="module")
def small_run(data):
    return find_equilibria(data, 2, seed=0, order_policy="split_half", workers=2)


def test_small_run_records_are_nash(small_run, data):
    assert small_run.attempts == 2
    assert small_run.successes + sum(small_run.failure_reasons.values()) == 2
    for r in small_run.records:
        assert is_nash(r)
        assert r.lower_level_residual <= 1e-4
        assert set(r.leader_profits) == {"l1", "l2"}


def test_determinism_across_threads(small_run, data):
    again = find_equilibria(data, 2, seed=0, order_policy="split_half", workers=1)
    assert json.dumps(again.to_dict()) == json.dumps(small_run.to_dict())


def test_json_round_trip(small_run):
    doc = json.loads(json.dumps(small_run.to_dict()))
    back = EquilibriumSet.from_dict(doc)
    assert back.to_dict() == small_run.to_dict()


def test_bad_iterations(data):
    with pytest.raises(ValueError):
        find_equilibria(data, 0)
