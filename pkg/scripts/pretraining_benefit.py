"""Fine-tuned test MSE: pre-trained backbone vs random init (10 and 60 fine-tune epochs)."""
import argparse
import logging
from dataclasses import replace

import numpy as np
import torch

from timedart.experiments import BENEFIT_FINETUNE, BENEFIT_PRETRAIN, ForecastSetup, pretraining_benefit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pretrain-epochs", type=int, default=BENEFIT_PRETRAIN.epochs)
    ap.add_argument("--finetune-epochs", type=int, default=BENEFIT_FINETUNE.epochs)
    ap.add_argument("--ar-noise", type=float, default=ForecastSetup.ar_noise_std)
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    setup = ForecastSetup(ar_noise_std=args.ar_noise)
    rows = pretraining_benefit(
        setup,
        replace(BENEFIT_PRETRAIN, epochs=args.pretrain_epochs),
        replace(BENEFIT_FINETUNE, epochs=args.finetune_epochs),
        seeds=range(args.seeds),
        long_random_epochs=args.pretrain_epochs + args.finetune_epochs,
    )
    print("seed,pretrained,random,random_long")
    for r in rows:
        print(f"{r['seed']},{r['pretrained']:.5f},{r['random']:.5f},{r['random_long']:.5f}")
    wins = sum(r["pretrained"] <= r["random"] for r in rows)
    wins_long = sum(r["pretrained"] <= r["random_long"] for r in rows)
    pre = np.mean([r["pretrained"] for r in rows])
    rnd = np.mean([r["random"] for r in rows])
    print(f"# pretrained <= random in {wins}/{len(rows)} seeds, <= random_long in {wins_long}/{len(rows)}")
    print(f"# mean MSE reduction vs random: {100 * (1 - pre / rnd):.1f}%")


if __name__ == "__main__":
    main()
