"""Pre-train on the 32-window noiseless corpus and print the epoch loss curve."""
import argparse
from dataclasses import replace

import torch

from timedart.experiments import SMOKE_CONFIG, overfit_corpus
from timedart.pretrain import pretrain_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loss-log", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)
    res = pretrain_loop(overfit_corpus(), replace(SMOKE_CONFIG, seed=args.seed), loss_log=args.loss_log)
    for epoch, loss in enumerate(res.losses, start=1):
        print(f"{epoch},{loss:.6f}")
    print(f"# final/initial = {res.losses[-1] / res.losses[0]:.4f}")


if __name__ == "__main__":
    main()
