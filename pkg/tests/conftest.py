from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from fringe_epec.market_data import (
    PRICE_MAKING,
    PRICE_TAKING,
    DemandCurve,
    Firm,
    MarketData,
    Technology,
    default_dataset,
)

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / "runs"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def data() -> MarketData:
    return default_dataset()


def tiny_market(
    leaders: list[dict[str, float]],
    fringe: list[dict[str, float]],
    techs: list[Technology],
    intercepts,
    slope: float = 1.0,
    weights=None,
) -> MarketData:
    """Small instance: capacity maps per firm, technologies, demand."""
    ids = [t.id for t in techs]
    firms = []
    for i, caps in enumerate(leaders):
        firms.append(Firm(f"l{i + 1}", PRICE_MAKING, {t: float(caps.get(t, 0.0)) for t in ids}, 0.0))
    for i, caps in enumerate(fringe):
        firms.append(Firm(f"f{len(leaders) + i + 1}", PRICE_TAKING, {t: float(caps.get(t, 0.0)) for t in ids}, 0.0))
    P = len(intercepts)
    w = tuple(weights) if weights is not None else tuple([1.0] * P)
    return MarketData(tuple(firms), tuple(techs), DemandCurve(tuple(map(float, intercepts)), float(slope), w), name="tiny")


def random_micro_market(rng: np.random.Generator) -> MarketData:
    """One leader, one fringe firm, one or two technologies, one or two periods.

    Kept at <= 12 complementarity pairs so that every pattern can be enumerated.
    """
    while True:
        n_tech = int(rng.integers(1, 3))
        periods = int(rng.integers(1, 3))
        techs = []
        for k in range(n_tech):
            investable = bool(rng.integers(0, 2))
            techs.append(
                Technology(
                    f"t{k}",
                    float(rng.uniform(5.0, 40.0)),
                    float(rng.uniform(0.0, 1.0)),
                    float(rng.uniform(20.0, 400.0)) if investable else None,
                )
            )
        lead = {t.id: (0.0 if t.investable else float(rng.uniform(0.0, 30.0))) for t in techs}
        frin = {t.id: (0.0 if t.investable else float(rng.uniform(0.0, 30.0))) for t in techs}
        A = rng.uniform(30.0, 120.0, size=periods)
        W = rng.uniform(1.0, 10.0, size=periods)
        d = tiny_market([lead], [frin], techs, A, float(rng.uniform(0.5, 2.0)), W)
        inv = sum(t.investable for t in techs)
        active = sum(1 for t in techs if t.investable or frin[t.id] > 0)
        if active and 2 * active * periods + inv <= 12:
            return d


def enumerate_patterns(p) -> float:
    """Best leader profit over every complementarity pattern (oracle)."""
    from fringe_epec.mpec import pattern_qp

    best = -np.inf
    for bits in itertools.product((0, 1), repeat=len(p.layout.pairs)):
        sol, _ = pattern_qp(p, dict(enumerate(bits)))
        if sol is not None:
            best = max(best, sol.leader_profit)
    return best


def load_run(name: str):
    path = RUNS / name
    if not path.exists():
        return None
    from fringe_epec.epec import EquilibriumSet

    return EquilibriumSet.from_dict(json.loads(path.read_text()))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
