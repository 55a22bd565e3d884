"""Bilevel search on the toy weight-sharing supernet.

Weights train on architectures drawn from the current space distribution
while that distribution learns from validation loss plus the FLOPs penalty.
"""

import argparse

import numpy as np

from nss.search import SearchConfig
from nss.space_model import ExpandedSpaceConfig, NetworkSpace, space_mean_flops
from nss.supernet import SupernetConfig, SyntheticTask, bilevel_nss


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--steps-per-epoch", type=int, default=25)
    args = ap.parse_args(argv)

    cfg = ExpandedSpaceConfig(num_stages=2, d_max=4, depth_window=1, w_max=16, width_window=4,
                              input_resolution=8, input_channels=8, stem_width=4, num_classes=4)
    # a target that a mid-sized space meets exactly
    target = space_mean_flops(cfg, NetworkSpace((1, 1), (1, 2)))
    search = SearchConfig(epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, flops_target=target,
                          seed=args.seed)
    task = SyntheticTask(seed=args.seed, input_dim=8, output_dim=4)

    def report(state):
        if state.history and state.step % search.steps_per_epoch == 0:
            h = state.history[-1]
            print(f"step {state.step:4d}  T={h.temperature:.3f}  task={h.task_loss:.4f}  flops={h.flops_loss:.4f}")

    state, elite, params = bilevel_nss(task, cfg, search, SupernetConfig(), np.random.default_rng(args.seed),
                                       on_step=report)
    print(f"target {target:.0f} FLOPs; elite {elite.space.describe(cfg)} mean {elite.mean_flops:.0f} "
          f"deviation {100 * elite.deviation:.2f}%; supernet digest {params.digest()[:16]}")


if __name__ == "__main__":
    main()
