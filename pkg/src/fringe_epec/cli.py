"""``fringe-epec`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fringe_epec import __version__
from fringe_epec.epec import ORDER_POLICIES, EquilibriumSet, find_equilibria
from fringe_epec.lcp import RayTermination, SingularBasis
from fringe_epec.market_data import (
    MarketData,
    ParseError,
    ValidationError,
    default_dataset,
    from_dict,
    load_dataset,
    validate,
)
from fringe_epec.mcp_model import CvConfig, solve_market_mcp, welfare_lp_oracle
from fringe_epec.mpec import NodeBudgetExhausted, RivalInfeasible, UnknownLeader, build_mpec, solve_mpec
from fringe_epec.outcome import StrategyProfile
from fringe_epec.reporting import (
    CLUSTER_TOL,
    metrics_rows,
    write_clusters_csv,
    write_metrics_csv,
    write_outcome_csv,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SOLVER = 2

log = logging.getLogger("fringe_epec")


class InputError(Exception):
    """Bad user input that is not a dataset violation (exit code 1)."""


def _parse_levels(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _globals(suppress: bool) -> argparse.ArgumentParser:
    # options accepted before or after the subcommand; the copy attached to
    # subcommands must not reset values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", type=Path, default=d(None), help="dataset JSON (default: built-in instance)")
    common.add_argument("--out", type=Path, default=d(Path(".")), help="output directory (default: .)")
    common.add_argument("-v", "--verbose", action="count", default=d(0))
    return common


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fringe-epec", parents=[_globals(False)], description="Oligopoly-with-fringe equilibrium tools.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _globals(True)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check a dataset file")
    p.add_argument("dataset", type=Path)

    sub.add_parser("solve-pc", parents=[common], help="perfect competition (welfare maximisation)")

    p = sub.add_parser("solve-mcp", parents=[common], help="complementarity model with conjectural variations")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--cv", type=float)
    g.add_argument("--sweep", type=_parse_levels, metavar="V1,V2,...")

    p = sub.add_parser("solve-mpec", parents=[common], help="one price-maker's bilevel problem")
    p.add_argument("--leader", required=True)
    p.add_argument("--rivals", type=Path, help="JSON: a profile or {firm: {gen, inv}} for the other price-makers")

    p = sub.add_parser("find-equilibria", parents=[common], help="multistart Nash equilibrium search")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--order", choices=ORDER_POLICIES, required=True)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-gs", type=int, default=100)
    p.add_argument("--no-lm", action="store_true", help="start diagonalisation directly from random profiles")

    p = sub.add_parser("report", parents=[common], help="metrics and clusters for an equilibrium file")
    p.add_argument("--in", dest="infile", type=Path, required=True)
    p.add_argument("--cluster-tol", type=float, default=CLUSTER_TOL)
    return ap


def _data(args) -> MarketData:
    return load_dataset(args.data) if args.data else default_dataset()


def _cmd_validate(args) -> int:
    try:
        doc = json.loads(args.dataset.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{args.dataset}: {exc}") from exc
    try:
        data = from_dict(doc, name=args.dataset.stem)
    except ValidationError as exc:
        for v in exc.violations:
            print(f"{v.code}: {v.message}", file=sys.stderr)
        return EXIT_INVALID
    extra = validate(data, require_players=True)
    for v in extra:
        print(f"warning {v.code}: {v.message}", file=sys.stderr)
    print(f"{args.dataset}: ok ({data.n_firms} firms, {data.n_tech} technologies, {data.periods} periods)")
    return EXIT_OK


def _cmd_solve_pc(args) -> int:
    data = _data(args)
    out = welfare_lp_oracle(data)
    write_outcome_csv(out, data, args.out / "outcome.csv")
    _print_summary(data, out.inv, out.prices, out.profits)
    return EXIT_OK


def _cmd_solve_mcp(args) -> int:
    data = _data(args)
    levels = [args.cv] if args.cv is not None else args.sweep
    for v in levels:
        if not 0.0 <= v <= 1.0:
            raise InputError(f"conjectural variation {v} outside [0, 1]")
    for v in levels:
        out = solve_market_mcp(data, CvConfig.uniform(v))
        name = "outcome.csv" if args.cv is not None else f"outcome_cv{v:g}.csv"
        write_outcome_csv(out, data, args.out / name)
        print(f"cv={v:g}")
        _print_summary(data, out.inv, out.prices, out.profits)
    return EXIT_OK


def _read_rivals(path: Path, data: MarketData):
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if "gen" in doc and "inv" in doc:
        try:
            return StrategyProfile.from_quantities(data, doc["gen"], doc["inv"])
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from exc
    return doc


def _cmd_solve_mpec(args) -> int:
    data = _data(args)
    rivals = _read_rivals(args.rivals, data) if args.rivals else None
    try:
        p = build_mpec(data, args.leader, rivals)
    except (UnknownLeader, RivalInfeasible, KeyError) as exc:
        raise InputError(str(exc).strip("'\"")) from exc
    sol = solve_mpec(p)
    prof = sol.profile(p)
    write_outcome_csv(prof, data, args.out / "outcome.csv")
    summary = {
        "leader": p.leader_id,
        "leader_profit": sol.leader_profit,
        "bound": sol.bound,
        "nodes": sol.nodes,
        "prices": prof.prices.tolist(),
        "pattern": sol.pattern.to_dict(),
    }
    (args.out / "mpec.json").write_text(json.dumps(summary, indent=1))
    _print_summary(data, prof.inv, prof.prices, prof.profits(data))
    return EXIT_OK


def _cmd_find_equilibria(args) -> int:
    if args.iters < 1:
        raise InputError("--iters must be >= 1")
    data = _data(args)
    res = find_equilibria(data, args.iters, args.seed, args.order, use_lm=not args.no_lm, tol=args.tol, max_gs=args.max_gs)
    doc = res.to_dict()
    doc["provenance"] = {
        "tool": "fringe-epec",
        "version": __version__,
        "command": "find-equilibria",
        "data": data.to_dict(),
    }
    (args.out / "equilibria.json").write_text(json.dumps(doc, indent=1))
    print(f"{res.successes}/{res.attempts} attempts converged; failures: {dict(res.failure_reasons)}")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        doc = json.loads(args.infile.read_text())
        res = EquilibriumSet.from_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.infile}: {exc}") from exc
    if args.data:
        data = load_dataset(args.data)
    elif "data" in doc.get("provenance", {}):
        data = from_dict(doc["provenance"]["data"], name=doc.get("meta", {}).get("dataset", "custom"))
    else:
        data = default_dataset()
    rows, clusters = metrics_rows(res, data, args.cluster_tol)
    write_metrics_csv(rows, data, args.out / "metrics.csv")
    write_clusters_csv(clusters, res.records, data, args.out / "clusters.csv")
    print(f"{len(rows)} records, {len(clusters)} price clusters")
    for c in clusters:
        print(f"  cluster {c.id}: {c.size} records, prices {np.round(c.representative, 3).tolist()}")
    return EXIT_OK


def _print_summary(data: MarketData, inv, prices, profits) -> None:
    print("prices:", " ".join(f"{p:.3f}" for p in prices))
    for f, firm in enumerate(data.firms):
        invs = ", ".join(f"{data.technologies[t].id}={inv[f, t]:.1f}" for t in data.investable_idx)
        print(f"  {firm.id}: profit {profits[f] / 1e6:.3f} MEUR; new capacity MW: {invs}")


COMMANDS = {
    "validate": _cmd_validate,
    "solve-pc": _cmd_solve_pc,
    "solve-mcp": _cmd_solve_mcp,
    "solve-mpec": _cmd_solve_mpec,
    "find-equilibria": _cmd_find_equilibria,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        for v in exc.violations:
            print(f"error {v.code}: {v.message}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RayTermination, SingularBasis, NodeBudgetExhausted, RuntimeError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
