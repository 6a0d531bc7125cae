import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fringe_epec.epec import EquilibriumRecord, EquilibriumSet
from fringe_epec.market_data import Technology
from fringe_epec.mcp_model import CvConfig, solve_market_mcp, welfare_lp_oracle
from fringe_epec.outcome import StrategyProfile
from fringe_epec.reporting import (
    cluster_price_series,
    combined_leader_investment,
    consumer_costs,
    duplicate_of,
    emissions,
    metrics_rows,
    revenue_breakdown,
    write_clusters_csv,
    write_metrics_csv,
    write_outcome_csv,
)
from conftest import tiny_market


def _one_period(E=0.5, C=20.0):
    techs = [Technology("u", C, E)]
    return tiny_market([{"u": 5000.0}], [{"u": 10.0}], techs, [1e5], slope=1.0, weights=[1752.0])


def _profile(d, gen, prices=None):
    gen = np.asarray(gen, dtype=float)
    prof = StrategyProfile.from_quantities(d, gen, np.zeros(gen.shape[:2]))
    if prices is not None:
        prof.prices = np.asarray(prices, dtype=float)
    return prof


def _record(prof, attempt=0, profits=None):
    return EquilibriumRecord(prof, profits or {}, ("l1", "l2"), 0, 0.0, 1, 0.0, attempt)


def test_consumer_cost_single_term():
    d = _one_period()
    prof = _profile(d, [[[600.0]], [[400.0]]], prices=[50.0])
    assert consumer_costs(prof, d) == pytest.approx(87.6e6)


def test_emissions_single_term():
    d = _one_period(E=1.17)
    prof = _profile(d, [[[100.0]], [[0.0]]])
    assert emissions(prof, d) == pytest.approx(204_984.0)


def test_zero_generation_gives_zero(data):
    prof = _profile(data, np.zeros((4, 6, 5)))
    assert consumer_costs(prof, data) == 0.0
    assert emissions(prof, data) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.0, 5.0))
def test_metrics_linear_in_generation(data, seed, k):
    rng = np.random.default_rng(seed)
    gen = rng.uniform(0, 500, size=(4, 6, 5))
    prices = rng.uniform(20, 80, size=5)
    a, b = _profile(data, gen, prices), _profile(data, k * gen, prices)
    assert consumer_costs(b, data) == pytest.approx(k * consumer_costs(a, data), rel=1e-12, abs=1e-6)
    assert emissions(b, data) == pytest.approx(k * emissions(a, data), rel=1e-12, abs=1e-6)
    assert consumer_costs(a, data) >= 0 and emissions(a, data) >= 0


def _rec_with_prices(prices, attempt):
    d = _one_period()
    return _record(_profile(d, [[[1.0]], [[0.0]]], prices=prices), attempt)


def test_identical_series_one_cluster():
    recs = [_rec_with_prices([34.0, 41.1], i) for i in range(4)]
    cl = cluster_price_series(recs)
    assert len(cl) == 1 and cl[0].members == [0, 1, 2, 3]


def test_five_euro_gap_splits():
    recs = [_rec_with_prices([34.0, 41.1], 0), _rec_with_prices([34.0, 46.1], 1)]
    assert len(cluster_price_series(recs, 0.1)) == 2


def test_clusters_ordered_by_size_then_first_seen():
    series = [[1.0], [2.0], [2.05], [3.0], [3.0]]
    cl = cluster_price_series([_rec_with_prices(s, i) for i, s in enumerate(series)])
    assert [c.size for c in cl] == [2, 2, 1]
    assert cl[0].members == [1, 2] and cl[1].members == [3, 4]
    assert [c.id for c in cl] == [0, 1, 2]


def test_cluster_membership_is_permutation_stable():
    rng = np.random.default_rng(4)
    base = [[34.0, 63.38], [34.0, 58.2], [41.1, 65.2]]
    recs = [_rec_with_prices(np.array(base[i % 3]) + rng.uniform(-0.01, 0.01, 2), i) for i in range(12)]
    a = cluster_price_series(recs)
    b = cluster_price_series(list(reversed(recs)))
    groups = lambda cl, rs: sorted(sorted(rs[i].attempt for i in c.members) for c in cl)
    assert groups(a, recs) == groups(b, list(reversed(recs)))


def test_duplicates_within_one_mw():
    d = _one_period()
    r0 = _record(_profile(d, [[[10.0]], [[0.0]]]), 0)
    r1 = _record(_profile(d, [[[10.5]], [[0.0]]]), 1)
    r2 = _record(_profile(d, [[[12.0]], [[0.0]]]), 2)
    assert duplicate_of([r0, r1, r2]) == [None, 0, None]


def test_revenue_zero_when_price_equals_cost():
    d = _one_period(C=20.0)
    prof = _profile(d, [[[300.0]], [[5.0]]], prices=[20.0])
    rb = revenue_breakdown(prof, d)
    assert np.all(rb.operating == 0.0)


def test_revenue_identity_on_mcp_outcome(data):
    out = solve_market_mcp(data, CvConfig.uniform(0.5))
    prof = StrategyProfile(out.gen, out.inv, out.prices, out.capacity_duals, True)
    rb = revenue_breakdown(prof, data)
    profits = prof.profits(data)
    for k, l in enumerate(data.leaders):
        assert rb.profit[k] == pytest.approx(profits[l], rel=1e-6)


def test_below_cost_period_is_negative():
    techs = [Technology("cheap", 10.0, 0.0), Technology("dear", 30.0, 0.0)]
    d = tiny_market([{"cheap": 100.0, "dear": 100.0}], [{}], techs, [1e3, 1e3])
    gen = np.zeros((2, 2, 2))
    gen[0, 1, 1] = 50.0
    prof = _profile(d, gen, prices=[25.0, 25.0])
    rb = revenue_breakdown(prof, d)
    assert rb.operating[0, 1] < 0 and rb.operating[0, 0] == 0.0


def test_combined_leader_investment(data):
    inv = np.zeros((4, 6))
    inv[0, 4], inv[1, 4], inv[2, 4] = 1000.0, 500.0, 700.0
    prof = StrategyProfile.from_quantities(data, np.zeros((4, 6, 5)), inv)
    assert combined_leader_investment(prof, data) == 1500.0


def test_metrics_and_csv(tmp_path, data):
    pc = welfare_lp_oracle(data)
    prof = StrategyProfile(pc.gen, pc.inv, pc.prices, pc.capacity_duals, True)
    res = EquilibriumSet([_record(prof, 3), _record(prof, 8)], attempts=10)
    rows, clusters = metrics_rows(res, data)
    assert len(rows) == 2 and len(clusters) == 1
    assert rows[0].consumer_cost_vs_pc == pytest.approx(0.0, abs=1e-9)
    assert rows[1].duplicate_of == 3
    write_metrics_csv(rows, data, tmp_path / "m.csv")
    write_clusters_csv(clusters, res.records, data, tmp_path / "c.csv")
    write_outcome_csv(pc, data, tmp_path / "o.csv")
    m = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["record_id"] for r in m] == ["3", "8"]
    assert float(m[0]["pm_combined_new_midmerit"]) == pytest.approx(2 * 713.11, abs=0.1)
    c = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert c[0]["members"] == "3 8"
    o = list(csv.DictReader(open(tmp_path / "o.csv")))
    assert set(o[0]) == {"firm", "technology", "period", "gen_MW", "inv_MW", "price_eur_MWh", "lambda"}
