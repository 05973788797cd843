"""Test MSE of the four pre-training settings (with/without AR masks and diffusion)."""
import argparse
import logging

import numpy as np
import torch

from timedart.experiments import BENEFIT_FINETUNE, BENEFIT_PRETRAIN, ForecastSetup, ablation_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = ablation_study(ForecastSetup(), BENEFIT_PRETRAIN, BENEFIT_FINETUNE, seeds=range(args.seeds))
    print("setting,mean_mse,std_mse")
    for name, vals in out.items():
        print(f"{name},{np.mean(vals):.5f},{np.std(vals):.5f}")


if __name__ == "__main__":
    main()
