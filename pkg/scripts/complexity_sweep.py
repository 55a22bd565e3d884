"""Universe-complexity sweep: how capping the maximum width changes NAS and NSS.

For each width cap, run full-space NAS and NSS at one target and report the
fraction of their samples that land in the FLOPs band.
"""

import argparse

from nss.analysis import complexity_sweep, with_width_cap
from nss.cli import parse_flops
from nss.objectives import SurrogateOracle
from nss.search import SearchConfig
from nss.space_model import ExpandedSpaceConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--caps", default="64,128,256,512")
    ap.add_argument("--target", default="600MF")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--n-eval", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    base = ExpandedSpaceConfig()
    variants = [with_width_cap(base, int(c)) for c in args.caps.split(",")]
    search = SearchConfig(epochs=args.epochs, flops_target=parse_flops(args.target), seed=args.seed,
                          flops_penalty_level="space_mean")
    print("w_max,nas_samples_to_constraint,nas_band_fraction,elite_band_fraction,elite_deviation_pct")
    for row in complexity_sweep(variants, SurrogateOracle, search, n_eval=args.n_eval):
        nas = "" if row.nas_samples_to_constraint is None else row.nas_samples_to_constraint
        print(f"{row.variant.w_max},{nas},{row.nas_band_fraction:.4f},{row.elite_band_fraction:.4f},"
              f"{100 * row.elite.deviation:.2f}")


if __name__ == "__main__":
    main()
