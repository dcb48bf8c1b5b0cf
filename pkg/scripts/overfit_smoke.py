#!/usr/bin/env python3
"""Memorization smoke run: 16 small clusters, 500 optimizer steps.

Prints the early/late median total loss and their ratio; a healthy build
drives the ratio well under 0.1.

    python scripts/overfit_smoke.py --hidden-dim 128 --out /tmp/overfit
"""

import argparse

import numpy as np

from transip import moldata as md
from transip import model as M
from transip import train as TR


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--hidden-dim", type=int, default=128)
    parser.add_argument("--num-layers", type=int, default=8)
    parser.add_argument("--num-heads", type=int, default=8)
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--out", default=None, help="optional checkpoint/log directory")
    args = parser.parse_args()

    data = md.generate_lj_dataset(
        16, 3, 5, element_palette=[1], rng=np.random.default_rng(11)
    )
    cfg = M.ModelConfig(
        hidden_dim=args.hidden_dim, num_layers=args.num_layers, num_heads=args.num_heads
    )
    # 16 molecules pack into one batch, so epochs == optimizer steps
    train_cfg = TR.TrainConfig(epochs=args.steps, seed=args.seed, batch_max_tokens=512)
    result = TR.train(data, cfg, train_cfg, out_dir=args.out, hold_out=False)

    totals = [r["loss_total"] for r in result.log]
    early = float(np.median(totals[: max(10, len(totals) // 5)]))
    late = float(np.median(totals[-max(10, len(totals) // 5) :]))
    print(f"steps: {len(result.log)}")
    print(f"median loss early {early:.3f} -> late {late:.4f} (ratio {late / early:.4f})")


if __name__ == "__main__":
    main()
