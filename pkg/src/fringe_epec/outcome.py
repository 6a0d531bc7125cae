"""Market outcome records shared by the MCP, MPEC and equilibrium layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fringe_epec.market_data import MarketData


def clearing_prices(data: MarketData, gen: np.ndarray) -> np.ndarray:
    """Inverse demand ``A_p - B * total_gen_p`` for ``gen`` of shape (F, T, P)."""
    return data.intercepts - data.slope * gen.sum(axis=(0, 1))


def firm_profits(data: MarketData, gen: np.ndarray, inv: np.ndarray, prices: np.ndarray) -> np.ndarray:
    """Operating margin minus investment cost, per firm (EUR)."""
    margin = prices[None, None, :] - data.marginal_cost[None, :, None]
    op = np.einsum("p,ftp,ftp->f", data.weights, gen, np.broadcast_to(margin, gen.shape))
    return op - inv @ data.invest_cost


@dataclass
class StrategyProfile:
    """Generation (F, T, P), investment (F, T), prices (P) and fringe duals (F, T, P).

    ``cleared`` means the prices were computed from ``gen`` by inverse demand.
    """

    gen: np.ndarray
    inv: np.ndarray
    prices: np.ndarray
    fringe_duals: np.ndarray
    cleared: bool = True

    @classmethod
    def from_quantities(cls, data: MarketData, gen: np.ndarray, inv: np.ndarray, duals: np.ndarray | None = None):
        gen = np.asarray(gen, dtype=float)
        duals = np.zeros_like(gen) if duals is None else np.asarray(duals, dtype=float)
        return cls(gen, np.asarray(inv, dtype=float), clearing_prices(data, gen), duals, True)

    def leader_block(self, firm: int) -> np.ndarray:
        """Primal decision vector of one firm: gen followed by inv."""
        return np.concatenate([self.gen[firm].ravel(), self.inv[firm]])

    def profits(self, data: MarketData) -> np.ndarray:
        return firm_profits(data, self.gen, self.inv, self.prices)

    def to_dict(self) -> dict:
        return {
            "gen": self.gen.tolist(),
            "inv": self.inv.tolist(),
            "prices": self.prices.tolist(),
            "fringe_duals": self.fringe_duals.tolist(),
            "cleared": self.cleared,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StrategyProfile":
        return cls(
            np.asarray(doc["gen"], dtype=float),
            np.asarray(doc["inv"], dtype=float),
            np.asarray(doc["prices"], dtype=float),
            np.asarray(doc["fringe_duals"], dtype=float),
            bool(doc.get("cleared", True)),
        )


@dataclass
class MarketOutcome:
    gen: np.ndarray
    inv: np.ndarray
    prices: np.ndarray
    capacity_duals: np.ndarray
    profits: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, data: MarketData, gen, inv, duals, **meta) -> "MarketOutcome":
        gen = np.maximum(np.asarray(gen, dtype=float), 0.0)
        inv = np.maximum(np.asarray(inv, dtype=float), 0.0)
        prices = clearing_prices(data, gen)
        return cls(gen, inv, prices, np.asarray(duals, dtype=float), firm_profits(data, gen, inv, prices), dict(meta))

    def profile(self) -> StrategyProfile:
        return StrategyProfile(self.gen.copy(), self.inv.copy(), self.prices.copy(), self.capacity_duals.copy(), True)


def project_profile(data: MarketData, profile: StrategyProfile) -> StrategyProfile:
    """Clip a raw profile onto the feasible set: nonnegative, only investable
    technologies invested in, generation within capacity."""
    inv = np.maximum(profile.inv, 0.0) * data.investable[None, :]
    gen = np.clip(profile.gen, 0.0, (data.capacity + inv)[:, :, None])
    return StrategyProfile(gen, inv, clearing_prices(data, gen), profile.fringe_duals.copy(), True)
