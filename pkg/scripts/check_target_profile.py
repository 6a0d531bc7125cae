"""Best-response check at the target price series (34, 34, 34, 41.1, 65.19)
with 2941 MW of combined price-maker new mid-merit investment.

Builds leader profiles that produce that series for several investment and
output splits, puts the fringe at its exact response and re-solves each
leader's bilevel problem to global optimality.  Prints current and optimal
profit per leader.
"""

import argparse

import numpy as np

from fringe_epec.market_data import default_dataset
from fringe_epec.mpec import build_mpec, leader_profit, solve_mpec, with_fringe_response
from fringe_epec.outcome import StrategyProfile

TARGET = np.array([34.0, 34.0, 34.0, 41.1, 65.19])
COMBINED_MW = 2941.0


def profile_for_split(data, share: float) -> StrategyProfile:
    """Leaders supply the residual of demand at TARGET, cheapest units first."""
    C = data.marginal_cost
    k = data.tech_index("new_midmerit")
    total = (data.intercepts - TARGET) / data.slope
    fringe = np.zeros(data.periods)
    for f in data.fringe:
        fringe += np.array([data.capacity[f][C < g - 1e-9].sum() for g in TARGET])
    need_all = total - fringe
    gen = np.zeros((data.n_firms, data.n_tech, data.periods))
    inv = np.zeros((data.n_firms, data.n_tech))
    for l, sh in zip(data.leaders, (share, 1.0 - share)):
        inv[l, k] = COMBINED_MW * sh
        cap = data.capacity[l] + inv[l]
        for p in range(data.periods):
            need = need_all[p] * sh
            for t in np.argsort(C):
                gen[l, t, p] = min(cap[t], need)
                need -= gen[l, t, p]
            if need > 1e-6:
                raise ValueError(f"split {share}: leader {data.firms[l].id} short by {need:.1f} MW in p{p + 1}")
    return with_fringe_response(data, StrategyProfile.from_quantities(data, gen, inv))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shares", type=float, nargs="+", default=[0.3, 0.4, 0.5, 0.6, 0.7])
    args = ap.parse_args()
    data = default_dataset()
    for share in args.shares:
        prof = profile_for_split(data, share)
        cells = []
        for l in data.leaders:
            now = leader_profit(data, prof.gen[l], prof.inv[l], prof.prices)
            best = solve_mpec(build_mpec(data, l, prof))
            cells.append(f"{data.firms[l].id} {now / 1e6:.2f} -> {best.leader_profit / 1e6:.2f} M EUR (gap {best.bound - best.leader_profit:.2g})")
        print(f"share {share:.2f} prices {np.round(prof.prices, 3).tolist()}: " + "; ".join(cells))


if __name__ == "__main__":
    main()
