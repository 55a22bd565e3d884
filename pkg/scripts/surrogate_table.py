"""Elite spaces on the analytic surrogate across FLOPs targets, with NAS sample counts.

For each target and seed: search the space distribution, extract the elite
space, then count how many architecture samples NAS needs to land in the
FLOPs band inside the elite space and inside the full universe. Prints one
CSV row per target with medians over seeds.
"""

import argparse
import sys

import numpy as np

from nss.cli import format_flops, parse_flops
from nss.errors import CapExhaustedError
from nss.objectives import SurrogateOracle
from nss.search import SearchConfig, run_nas_in_space, run_nss
from nss.space_model import ExpandedSpaceConfig, full_space


def nas_count(space, oracle, cfg, search, seed):
    try:
        return run_nas_in_space(space, oracle, cfg, search, np.random.default_rng(1000 + seed)).samples_to_constraint
    except CapExhaustedError:
        return search.nas_cap


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--targets", default="600MF,1.6GF,4GF,8GF,16GF,24GF")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--penalty", choices=["space_mean", "per_architecture"], default="space_mean")
    args = ap.parse_args(argv)

    cfg = ExpandedSpaceConfig()
    wide, whole = full_space(cfg)
    print("target,mean_flops_median,deviation_pct_median,deviation_pct_max,nas_elite_median,nas_full_median")
    for target in (parse_flops(t) for t in args.targets.split(",")):
        devs, flops, elite_n, full_n = [], [], [], []
        for seed in range(args.seeds):
            search = SearchConfig(flops_target=target, epochs=args.epochs, seed=seed,
                                  flops_penalty_level=args.penalty)
            oracle = SurrogateOracle(cfg)
            _, elite = run_nss(cfg, search, oracle)
            devs.append(100 * elite.deviation)
            flops.append(elite.mean_flops)
            elite_n.append(nas_count(elite.space, oracle, cfg, search, seed))
            full_n.append(nas_count(whole, SurrogateOracle(wide), wide, search, seed))
            print(f"  {format_flops(target)} seed {seed}: deviation {devs[-1]:.2f}% "
                  f"nas elite {elite_n[-1]} full {full_n[-1]}", file=sys.stderr)
        print(f"{format_flops(target)},{np.median(flops):.0f},{np.median(devs):.2f},{max(devs):.2f},"
              f"{np.median(elite_n):g},{np.median(full_n):g}")


if __name__ == "__main__":
    main()
