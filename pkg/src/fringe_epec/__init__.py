"""Electricity oligopoly with a competitive fringe: MCP, MPEC and EPEC solvers."""

from fringe_epec.market_data import (
    DemandCurve,
    Firm,
    MarketData,
    Technology,
    default_dataset,
    load_dataset,
    validate,
)

__all__ = [
    "DemandCurve",
    "Firm",
    "MarketData",
    "Technology",
    "default_dataset",
    "load_dataset",
    "validate",
]

__version__ = "0.1.0"
