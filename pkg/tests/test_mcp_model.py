import numpy as np
import pytest

from fringe_epec.lcp import residuals
from fringe_epec.market_data import Technology
from fringe_epec.mcp_model import (
    DEFAULT_CV_GRID,
    CvConfig,
    build_market_lcp,
    cv_sweep,
    market_layout,
    solve_market_mcp,
    welfare_lp_oracle,
)

from conftest import tiny_market

# perfect competition on the default market, frozen from the solver
PC_PRICES = (34.0, 41.1, 41.1, 43.325, 48.87)
PC_NEW_MIDMERIT = 713.11


@pytest.fixture(scope="module")
def pc(data):
    return solve_market_mcp(data, 0.0)


def test_single_firm_closed_form():
    # one competitive firm, one unit, one period: gen = min(cap, (A - C)/B)
    d = tiny_market([], [{"u": 100.0}], [Technology("u", 10.0, 0.0)], [50.0], slope=1.0)
    o = solve_market_mcp(d, 0.0, validate=False)
    assert o.gen[0, 0, 0] == pytest.approx(40.0, abs=1e-9)
    assert o.prices[0] == pytest.approx(10.0, abs=1e-9)


def test_monopoly_closed_form():
    # a price-maker with cv = 1 produces (A - C)/(2B)
    d = tiny_market([{"u": 100.0}], [{"u": 0.0}], [Technology("u", 10.0, 0.0)], [50.0], slope=2.0)
    o = solve_market_mcp(d, 1.0)
    assert o.gen[0, 0, 0] == pytest.approx(10.0, abs=1e-9)
    assert o.prices[0] == pytest.approx(30.0, abs=1e-9)


def test_lcp_dimensions(data):
    p = build_market_lcp(data)
    lay = market_layout(data)
    assert p.n == 2 * 4 * 6 * 5 + 4 * 3 == lay.n == 252
    assert p.free_set == ()


def test_perfect_competition_investment(pc, data):
    k = data.tech_index("new_midmerit")
    assert np.allclose(pc.inv[:, k], PC_NEW_MIDMERIT, atol=0.01)
    for name in ("new_baseload", "new_peak"):
        assert np.allclose(pc.inv[:, data.tech_index(name)], 0.0, atol=1e-6)
    assert np.allclose(pc.prices, PC_PRICES, atol=1e-3)


def test_pc_matches_welfare_oracle(pc, data):
    ref = welfare_lp_oracle(data)
    assert np.allclose(pc.gen.sum(axis=0), ref.gen.sum(axis=0), atol=1e-4)
    assert np.allclose(pc.inv.sum(axis=0), ref.inv.sum(axis=0), atol=1e-4)
    assert np.allclose(pc.prices, ref.prices, atol=1e-6)


def test_symmetric_split_among_identical_fringe(pc, data):
    k = data.tech_index("new_midmerit")
    assert pc.inv[2, k] == pytest.approx(pc.inv[3, k], abs=1e-6)


@pytest.mark.parametrize("cv", [0.0, 0.5, 1.0])
def test_complementarity_residual(data, cv):
    p = build_market_lcp(data, CvConfig.uniform(cv))
    o = solve_market_mcp(data, cv)
    lay = market_layout(data)
    z = np.concatenate([o.gen.ravel(), o.inv[:, list(lay.inv_techs)].ravel(), o.capacity_duals.ravel()])
    comp, eq, bound = residuals(p, z)
    scale = 1 + np.abs(p.q).max()
    assert comp <= 1e-6 * scale and bound <= 1e-6 * scale


def test_cv_one_price_makers_withhold(data):
    o = solve_market_mcp(data, 1.0)
    k = data.tech_index("new_midmerit")
    assert np.allclose(o.inv[list(data.leaders)], 0.0, atol=1.0)
    assert np.allclose(o.inv[list(data.fringe), k], 1736.0, atol=10.0)
    assert np.allclose(o.prices, (34.0, 34.0, 34.0, 41.1, 65.295), atol=1e-3)


def test_cv_config():
    with pytest.raises(ValueError):
        CvConfig.uniform(1.2)
    assert DEFAULT_CV_GRID[0] == 0.0 and DEFAULT_CV_GRID[-1] == 1.0 and len(DEFAULT_CV_GRID) == 11


def test_per_firm_cv_vector(data):
    v = CvConfig({"l2": 0.3}, 0.7).vector(data)
    assert v.tolist() == [0.7, 0.3, 0.0, 0.0]


def test_sweep_order_and_bad_level(data):
    out = cv_sweep(data, [1.0, 0.0])
    assert np.allclose(out[1].prices, PC_PRICES, atol=1e-3)
    assert out[0].prices[-1] == pytest.approx(65.295, abs=1e-3)
    with pytest.raises(ValueError):
        cv_sweep(data, [2.0])


def test_sweep_never_below_cost(data):
    for o in cv_sweep(data):
        below = o.prices[None, None, :] < data.marginal_cost[None, :, None] - 1e-6
        assert not np.any((o.gen > 1e-6) & below)
