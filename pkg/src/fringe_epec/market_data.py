"""Problem-instance schema, validation and the built-in Irish 2025 dataset.

A :class:`MarketData` is immutable once built.  Array views used by the
solvers (capacities, costs, demand) are computed on first access and cached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

PRICE_MAKING = "price_making"
PRICE_TAKING = "price_taking"
FIRM_KINDS = (PRICE_MAKING, PRICE_TAKING)

HOURS_PER_YEAR = 8760.0


class ParseError(ValueError):
    """Raised when a dataset file is not valid JSON or misses required keys."""


class ValidationError(ValueError):
    """Raised when a dataset violates one of the schema invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class Technology:
    """A generating technology.

    ``invest_cost`` is ``None`` for existing (non-investable) technologies.
    """

    id: str
    marginal_cost: float
    emissions_factor: float
    invest_cost: float | None = None

    @property
    def investable(self) -> bool:
        return self.invest_cost is not None and self.invest_cost > 0


@dataclass(frozen=True)
class Firm:
    id: str
    kind: str
    initial_capacity: Mapping[str, float]
    cv: float = 0.0

    @property
    def price_making(self) -> bool:
        return self.kind == PRICE_MAKING


@dataclass(frozen=True)
class DemandCurve:
    """Linear inverse demand ``price_p = intercepts[p] - slope * quantity``."""

    intercepts: tuple[float, ...]
    slope: float
    weights: tuple[float, ...]


@dataclass(frozen=True)
class MarketData:
    firms: tuple[Firm, ...]
    technologies: tuple[Technology, ...]
    demand: DemandCurve
    name: str = field(default="custom", compare=False)

    @property
    def periods(self) -> int:
        return len(self.demand.intercepts)

    @property
    def n_firms(self) -> int:
        return len(self.firms)

    @property
    def n_tech(self) -> int:
        return len(self.technologies)

    @cached_property
    def firm_ids(self) -> tuple[str, ...]:
        return tuple(f.id for f in self.firms)

    @cached_property
    def tech_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.technologies)

    def firm_index(self, firm_id: str) -> int:
        try:
            return self.firm_ids.index(firm_id)
        except ValueError:
            raise KeyError(f"unknown firm {firm_id!r}") from None

    def tech_index(self, tech_id: str) -> int:
        try:
            return self.tech_ids.index(tech_id)
        except ValueError:
            raise KeyError(f"unknown technology {tech_id!r}") from None

    @cached_property
    def leaders(self) -> tuple[int, ...]:
        """Indices of price-making firms."""
        return tuple(i for i, f in enumerate(self.firms) if f.price_making)

    @cached_property
    def fringe(self) -> tuple[int, ...]:
        """Indices of price-taking firms."""
        return tuple(i for i, f in enumerate(self.firms) if not f.price_making)

    @cached_property
    def capacity(self) -> np.ndarray:
        """Initial capacity, shape (firms, technologies), MW."""
        cap = np.zeros((self.n_firms, self.n_tech))
        for i, f in enumerate(self.firms):
            for tid, mw in f.initial_capacity.items():
                cap[i, self.tech_index(tid)] = mw
        cap.setflags(write=False)
        return cap

    @cached_property
    def marginal_cost(self) -> np.ndarray:
        return _frozen([t.marginal_cost for t in self.technologies])

    @cached_property
    def invest_cost(self) -> np.ndarray:
        """Annualised investment cost per MW; 0 for non-investable technologies."""
        return _frozen([t.invest_cost if t.investable else 0.0 for t in self.technologies])

    @cached_property
    def investable(self) -> np.ndarray:
        return _frozen([t.investable for t in self.technologies], dtype=bool)

    @cached_property
    def investable_idx(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.investable))

    @cached_property
    def emissions_factor(self) -> np.ndarray:
        return _frozen([t.emissions_factor for t in self.technologies])

    @cached_property
    def intercepts(self) -> np.ndarray:
        return _frozen(self.demand.intercepts)

    @cached_property
    def weights(self) -> np.ndarray:
        return _frozen(self.demand.weights)

    @property
    def slope(self) -> float:
        return float(self.demand.slope)

    @cached_property
    def cv(self) -> np.ndarray:
        return _frozen([f.cv for f in self.firms])

    @cached_property
    def active(self) -> np.ndarray:
        """(firm, tech) pairs that can ever generate: installed or investable."""
        act = (self.capacity > 0) | self.investable[None, :]
        act.setflags(write=False)
        return act

    @property
    def max_quantity(self) -> float:
        """Zero-price demand in the highest-demand period, MW."""
        return float(np.max(self.intercepts) / self.slope)

    def replace_demand(self, **changes: Any) -> "MarketData":
        d = self.demand
        kw = {"intercepts": d.intercepts, "slope": d.slope, "weights": d.weights}
        kw.update({k: tuple(v) if k != "slope" else float(v) for k, v in changes.items()})
        return MarketData(self.firms, self.technologies, DemandCurve(**kw), name=self.name)

    def with_cv(self, cv: float | Mapping[str, float]) -> "MarketData":
        """Copy with price-maker conjectural variations replaced."""
        firms = []
        for f in self.firms:
            if f.price_making:
                v = cv if isinstance(cv, (int, float)) else cv.get(f.id, f.cv)
                f = Firm(f.id, f.kind, f.initial_capacity, float(v))
            firms.append(f)
        return MarketData(tuple(firms), self.technologies, self.demand, name=self.name)

    def to_dict(self) -> dict[str, Any]:
        techs = []
        for t in self.technologies:
            rec: dict[str, Any] = {"id": t.id, "marginal_cost": t.marginal_cost}
            if t.invest_cost is not None:
                rec["invest_cost"] = t.invest_cost
            rec["emissions_factor"] = t.emissions_factor
            techs.append(rec)
        firms = [
            {"id": f.id, "kind": f.kind, "cv": f.cv, "initial_capacity": dict(f.initial_capacity)}
            for f in self.firms
        ]
        demand = {
            "intercepts": list(self.demand.intercepts),
            "slope": self.demand.slope,
            "weights": list(self.demand.weights),
        }
        return {"technologies": techs, "firms": firms, "demand": demand}


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# Irish system 2025, 4 firms x 6 technologies x 5 periods.
_TECHNOLOGIES = (
    Technology("existing_baseload", 48.87, 1.17),
    Technology("existing_midmerit", 41.10, 0.36),
    Technology("existing_peak", 63.38, 0.56),
    Technology("new_baseload", 31.58, 0.78, 110769.0),
    Technology("new_midmerit", 34.00, 0.30, 67268.0),
    Technology("new_peak", 50.50, 0.45, 40363.0),
)

_PORTFOLIOS = {
    "l1": (PRICE_MAKING, {"existing_baseload": 1947.0, "existing_midmerit": 512.0, "existing_peak": 270.0}),
    "l2": (PRICE_MAKING, {"existing_baseload": 1940.0}),
    "f3": (PRICE_TAKING, {"existing_midmerit": 404.0}),
    "f4": (PRICE_TAKING, {"existing_peak": 234.0}),
}

_INTERCEPTS = (25175.993, 26768.307, 30429.701, 34302.196, 37465.783)
_SLOPE = 9.091


def default_dataset() -> MarketData:
    """The four-firm Irish 2025 instance: leaders ``l1``, ``l2``; fringe ``f3``, ``f4``."""
    tech_ids = [t.id for t in _TECHNOLOGIES]
    firms = []
    for fid, (kind, caps) in _PORTFOLIOS.items():
        full = {tid: float(caps.get(tid, 0.0)) for tid in tech_ids}
        firms.append(Firm(fid, kind, full, 0.0))
    n = len(_INTERCEPTS)
    demand = DemandCurve(_INTERCEPTS, _SLOPE, tuple([HOURS_PER_YEAR / n] * n))
    return MarketData(tuple(firms), _TECHNOLOGIES, demand, name="ireland_2025")


def validate(data: MarketData, require_players: bool = False) -> list[Violation]:
    """Check every schema invariant; an empty list means the instance is valid.

    With ``require_players`` the instance must also contain at least one
    price-making and one price-taking firm (needed by the MPEC/EPEC solvers).
    """
    out: list[Violation] = []

    def bad(code: str, msg: str) -> None:
        out.append(Violation(code, msg))

    if not data.technologies:
        bad("NoTechnologies", "technologies must be non-empty")
    if not data.firms:
        bad("NoFirms", "firms must be non-empty")

    seen: set[str] = set()
    for t in data.technologies:
        if t.id in seen:
            bad("DuplicateId", f"technology id {t.id!r} declared twice")
        seen.add(t.id)
        if not _finite(t.marginal_cost) or t.marginal_cost <= 0:
            bad("NonPositiveMarginalCost", f"technologies[{t.id}].marginal_cost must be > 0")
        if not _finite(t.emissions_factor) or t.emissions_factor < 0:
            bad("NegativeEmissions", f"technologies[{t.id}].emissions_factor must be >= 0")
        if t.invest_cost is not None and (not _finite(t.invest_cost) or t.invest_cost <= 0):
            bad("InvestCostMismatch", f"technologies[{t.id}].invest_cost must be > 0 when present")

    techs = {t.id: t for t in data.technologies}
    fids: set[str] = set()
    for f in data.firms:
        if f.id in fids:
            bad("DuplicateId", f"firm id {f.id!r} declared twice")
        fids.add(f.id)
        if f.kind not in FIRM_KINDS:
            bad("UnknownKind", f"firms[{f.id}].kind must be one of {FIRM_KINDS}")
        if not _finite(f.cv) or not 0.0 <= f.cv <= 1.0:
            bad("CvOutOfRange", f"firms[{f.id}].cv must lie in [0, 1]")
        for tid, mw in f.initial_capacity.items():
            if tid not in techs:
                bad("UnknownTechnology", f"firms[{f.id}].initial_capacity references undeclared technology {tid!r}")
                continue
            if not _finite(mw) or mw < 0:
                bad("NegativeCapacity", f"firms[{f.id}].initial_capacity[{tid}] must be >= 0")
            elif techs[tid].investable and mw != 0:
                bad("NewCapacityNonzero", f"firms[{f.id}].initial_capacity[{tid}] must be 0 for an investable technology")

    d = data.demand
    if not d.intercepts:
        bad("NoPeriods", "demand.intercepts must be non-empty")
    if len(d.weights) != len(d.intercepts):
        bad("PeriodMismatch", "demand.weights and demand.intercepts must have equal length")
    if any(not _finite(a) or a <= 0 for a in d.intercepts):
        bad("NonPositiveIntercept", "demand.intercepts must be > 0")
    if not _finite(d.slope) or d.slope <= 0:
        bad("NonPositiveSlope", "demand.slope must be > 0")
    if any(not _finite(w) or w <= 0 for w in d.weights):
        bad("NonPositiveWeight", "demand.weights must be > 0")

    if require_players:
        kinds = {f.kind for f in data.firms}
        if PRICE_MAKING not in kinds:
            bad("NoPriceMaker", "at least one price_making firm is required")
        if PRICE_TAKING not in kinds:
            bad("NoPriceTaker", "at least one price_taking firm is required")
    return out


def check(data: MarketData, require_players: bool = False) -> MarketData:
    """Return ``data`` unchanged or raise :class:`ValidationError`."""
    violations = validate(data, require_players)
    if violations:
        raise ValidationError(violations)
    return data


def _finite(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _require(obj: Mapping[str, Any], key: str, where: str) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise ParseError(f"{where}: missing key {key!r}")
    return obj[key]


def _num(x: Any, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ParseError(f"{where}: expected a number, got {x!r}")
    return float(x)


def from_dict(doc: Mapping[str, Any], name: str = "custom") -> MarketData:
    """Build (and validate) a dataset from its JSON document form."""
    if not isinstance(doc, Mapping):
        raise ParseError("top level must be a JSON object")
    techs = []
    for i, rec in enumerate(_require(doc, "technologies", "dataset")):
        where = f"technologies[{i}]"
        ic = rec.get("invest_cost") if isinstance(rec, Mapping) else None
        techs.append(
            Technology(
                id=str(_require(rec, "id", where)),
                marginal_cost=_num(_require(rec, "marginal_cost", where), where + ".marginal_cost"),
                emissions_factor=_num(_require(rec, "emissions_factor", where), where + ".emissions_factor"),
                invest_cost=None if ic is None or ic == 0 else _num(ic, where + ".invest_cost"),
            )
        )
    firms = []
    for i, rec in enumerate(_require(doc, "firms", "dataset")):
        where = f"firms[{i}]"
        caps = _require(rec, "initial_capacity", where)
        if not isinstance(caps, Mapping):
            raise ParseError(f"{where}.initial_capacity must be an object")
        firms.append(
            Firm(
                id=str(_require(rec, "id", where)),
                kind=str(_require(rec, "kind", where)),
                initial_capacity={str(k): _num(v, f"{where}.initial_capacity.{k}") for k, v in caps.items()},
                cv=_num(rec.get("cv", 0.0), where + ".cv"),
            )
        )
    dem = _require(doc, "demand", "dataset")
    demand = DemandCurve(
        intercepts=tuple(_num(a, "demand.intercepts") for a in _require(dem, "intercepts", "demand")),
        slope=_num(_require(dem, "slope", "demand"), "demand.slope"),
        weights=tuple(_num(w, "demand.weights") for w in _require(dem, "weights", "demand")),
    )
    return check(MarketData(tuple(firms), tuple(techs), demand, name=name))


def load_dataset(path: str | Path) -> MarketData:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return from_dict(doc, name=path.stem)


def save_dataset(data: MarketData, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data.to_dict(), indent=2))
