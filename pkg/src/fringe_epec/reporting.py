"""Derived metrics, price-series clustering and CSV export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fringe_epec.epec import EquilibriumRecord, EquilibriumSet
from fringe_epec.market_data import MarketData
from fringe_epec.mcp_model import welfare_lp_oracle
from fringe_epec.outcome import MarketOutcome, StrategyProfile

CLUSTER_TOL = 0.1  # EUR/MWh, L-infinity distance between price series
DUPLICATE_TOL = 1.0  # MW, L-infinity distance between full profiles
NEW_MIDMERIT = "new_midmerit"


def _gen_prices(o: MarketOutcome | StrategyProfile) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(o.gen, dtype=float), np.asarray(o.prices, dtype=float)


def consumer_costs(o: MarketOutcome | StrategyProfile, data: MarketData) -> float:
    """Weighted price times quantity, summed over periods (EUR)."""
    gen, prices = _gen_prices(o)
    return float(np.sum(data.weights * prices * gen.sum(axis=(0, 1))))


def emissions(o: MarketOutcome | StrategyProfile, data: MarketData) -> float:
    """Weighted generation times emission factor (tCO2)."""
    gen, _ = _gen_prices(o)
    return float(np.einsum("p,t,ftp->", data.weights, data.emissions_factor, gen))


@dataclass
class Cluster:
    id: int
    representative: np.ndarray
    members: list[int] = field(default_factory=list)  # positions in the record list

    @property
    def size(self) -> int:
        return len(self.members)


def cluster_price_series(records: EquilibriumSet | Sequence[EquilibriumRecord], tol: float = CLUSTER_TOL) -> list[Cluster]:
    """Greedy leader clustering of the records' price series.

    A record joins the first cluster whose representative (its first member)
    is within ``tol`` in the max-norm; otherwise it opens a new cluster.
    Clusters are numbered by size, largest first, ties by first appearance.
    """
    recs = records.records if isinstance(records, EquilibriumSet) else list(records)
    found: list[Cluster] = []
    for i, r in enumerate(recs):
        series = np.asarray(r.profile.prices, dtype=float)
        for c in found:
            if np.max(np.abs(series - c.representative)) <= tol:
                c.members.append(i)
                break
        else:
            found.append(Cluster(len(found), series.copy(), [i]))
    found.sort(key=lambda c: (-c.size, c.id))
    for k, c in enumerate(found):
        c.id = k
    return found


@dataclass
class RevenueBreakdown:
    """Operating revenue per (price-maker, period) and investment cost per price-maker (EUR)."""

    firms: tuple[str, ...]
    operating: np.ndarray  # (L, P)
    investment_cost: np.ndarray  # (L,)

    @property
    def profit(self) -> np.ndarray:
        return self.operating.sum(axis=1) - self.investment_cost


def revenue_breakdown(record: EquilibriumRecord | StrategyProfile, data: MarketData) -> RevenueBreakdown:
    prof = record.profile if isinstance(record, EquilibriumRecord) else record
    L = list(data.leaders)
    margin = prof.prices[None, :] - data.marginal_cost[:, None]  # (T, P)
    op = np.einsum("p,ltp,tp->lp", data.weights, prof.gen[L], margin)
    ic = prof.inv[L] @ data.invest_cost
    return RevenueBreakdown(tuple(data.firms[l].id for l in L), op, ic)


def combined_leader_investment(prof: StrategyProfile, data: MarketData, tech: str = NEW_MIDMERIT) -> float:
    try:
        t = data.tech_index(tech)
    except KeyError:
        return math.nan
    return float(prof.inv[list(data.leaders), t].sum())


def duplicate_of(records: Sequence[EquilibriumRecord], tol: float = DUPLICATE_TOL) -> list[int | None]:
    """For each record, the position of an earlier record within ``tol`` MW, else None."""
    out: list[int | None] = []
    for i, r in enumerate(records):
        hit = None
        for j in range(i):
            a, b = r.profile, records[j].profile
            d = max(np.abs(a.gen - b.gen).max(initial=0.0), np.abs(a.inv - b.inv).max(initial=0.0))
            if d <= tol:
                hit = j
                break
        out.append(hit)
    return out


@dataclass
class MetricsRow:
    record_id: int
    profits: dict[str, float]
    consumer_cost: float
    consumer_cost_vs_pc: float  # relative change against perfect competition
    emissions: float
    price_series: np.ndarray
    pm_combined_new_midmerit: float
    cluster_id: int
    duplicate_of: int | None = None

    def as_csv(self, firm_ids: Sequence[str]) -> dict:
        row = {"record_id": self.record_id}
        for f in firm_ids:
            row[f"profit_{f}"] = repr(self.profits[f])
        row["consumer_cost"] = repr(self.consumer_cost)
        row["consumer_cost_vs_pc"] = repr(self.consumer_cost_vs_pc)
        row["emissions"] = repr(self.emissions)
        for p, v in enumerate(self.price_series, start=1):
            row[f"price_p{p}"] = repr(float(v))
        row["pm_combined_new_midmerit"] = repr(self.pm_combined_new_midmerit)
        row["cluster_id"] = self.cluster_id
        row["duplicate_of"] = "" if self.duplicate_of is None else self.duplicate_of
        return row


def metrics_rows(result: EquilibriumSet, data: MarketData, tol: float = CLUSTER_TOL) -> tuple[list[MetricsRow], list[Cluster]]:
    recs = result.records
    clusters = cluster_price_series(recs, tol)
    cid = {}
    for c in clusters:
        for i in c.members:
            cid[i] = c.id
    base = consumer_costs(welfare_lp_oracle(data), data)
    dups = duplicate_of(recs)
    rows = []
    for i, r in enumerate(recs):
        profits = r.profile.profits(data)
        cc = consumer_costs(r.profile, data)
        rows.append(
            MetricsRow(
                record_id=r.attempt,
                profits={f.id: float(profits[k]) for k, f in enumerate(data.firms)},
                consumer_cost=cc,
                consumer_cost_vs_pc=cc / base - 1.0 if base else math.nan,
                emissions=emissions(r.profile, data),
                price_series=np.asarray(r.profile.prices, dtype=float),
                pm_combined_new_midmerit=combined_leader_investment(r.profile, data),
                cluster_id=cid[i],
                duplicate_of=None if dups[i] is None else recs[dups[i]].attempt,
            )
        )
    return rows, clusters


# --------------------------------------------------------------------------
# CSV writers


def _write(path: Path, header: Sequence[str], rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


OUTCOME_COLUMNS = ("firm", "technology", "period", "gen_MW", "inv_MW", "price_eur_MWh", "lambda")


def write_outcome_csv(o: MarketOutcome | StrategyProfile, data: MarketData, path: Path) -> None:
    """One row per (firm, technology, period) with an active or invested unit."""
    duals = o.capacity_duals if isinstance(o, MarketOutcome) else o.fringe_duals
    rows = []
    for f, firm in enumerate(data.firms):
        for t, tech in enumerate(data.technologies):
            if not (data.active[f, t] or o.inv[f, t] > 0):
                continue
            for p in range(data.periods):
                rows.append({
                    "firm": firm.id,
                    "technology": tech.id,
                    "period": p + 1,
                    "gen_MW": repr(float(o.gen[f, t, p])),
                    "inv_MW": repr(float(o.inv[f, t])),
                    "price_eur_MWh": repr(float(o.prices[p])),
                    "lambda": repr(float(duals[f, t, p])),
                })
    _write(path, OUTCOME_COLUMNS, rows)


def write_metrics_csv(rows: Sequence[MetricsRow], data: MarketData, path: Path) -> None:
    ids = [f.id for f in data.firms]
    header = (
        ["record_id"] + [f"profit_{f}" for f in ids]
        + ["consumer_cost", "consumer_cost_vs_pc", "emissions"]
        + [f"price_p{p}" for p in range(1, data.periods + 1)]
        + ["pm_combined_new_midmerit", "cluster_id", "duplicate_of"]
    )
    _write(path, header, (r.as_csv(ids) for r in rows))


def write_clusters_csv(clusters: Sequence[Cluster], records: Sequence[EquilibriumRecord], data: MarketData, path: Path) -> None:
    header = ["cluster_id", "size"] + [f"price_p{p}" for p in range(1, data.periods + 1)] + ["members"]
    rows = []
    for c in clusters:
        row = {"cluster_id": c.id, "size": c.size}
        for p, v in enumerate(c.representative, start=1):
            row[f"price_p{p}"] = repr(float(v))
        row["members"] = " ".join(str(records[i].attempt) for i in c.members)
        rows.append(row)
    _write(path, header, rows)


__all__ = [
    "CLUSTER_TOL",
    "Cluster",
    "MetricsRow",
    "RevenueBreakdown",
    "cluster_price_series",
    "combined_leader_investment",
    "consumer_costs",
    "duplicate_of",
    "emissions",
    "metrics_rows",
    "revenue_breakdown",
    "write_clusters_csv",
    "write_metrics_csv",
    "write_outcome_csv",
]
