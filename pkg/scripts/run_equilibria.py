"""Multistart equilibrium search on the default market, with and without LM seeding.

Writes ``<out>/equilibria_lm.json`` and ``<out>/equilibria_bypass.json``; the
acceptance suite reads these files when present.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from fringe_epec.epec import find_equilibria
from fringe_epec.market_data import default_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--order", default="split_half")
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--only", choices=["lm", "bypass"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    data = default_dataset()
    for tag, use_lm in (("lm", True), ("bypass", False)):
        if args.only and args.only != tag:
            continue
        t0 = time.time()
        res = find_equilibria(
            data, args.iters, seed=args.seed, order_policy=args.order, use_lm=use_lm,
            progress=lambda o: logging.info("%s attempt %d: %s", tag, o.attempt, o.reason or "converged"),
        )
        doc = res.to_dict()
        doc["meta"]["elapsed_s"] = round(time.time() - t0, 1)
        (args.out / f"equilibria_{tag}.json").write_text(json.dumps(doc, indent=1))
        logging.info("%s: %d/%d converged, failures %s", tag, res.successes, res.attempts, dict(res.failure_reasons))


if __name__ == "__main__":
    main()
