#!/usr/bin/env python3
"""Run the latent-objective versus rotation-augmentation comparison across
dataset sizes and seeds, writing per-run checkpoints and the combined
metrics CSV.

Example:
    python scripts/run_scaling_comparison.py --out runs/comparison
    python scripts/run_scaling_comparison.py --out /tmp/quick --quick
"""

import argparse

from transip.experiments import ComparisonSettings, directional_summary, run_comparison


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/comparison", help="output directory")
    parser.add_argument(
        "--quick",
        action="store_true",
        help="one small size and one seed, for a fast end-to-end check",
    )
    parser.add_argument("--sizes", type=int, nargs="+", default=None)
    parser.add_argument("--seeds", type=int, nargs="+", default=None)
    args = parser.parse_args()

    settings = ComparisonSettings()
    if args.quick:
        settings = ComparisonSettings(sizes=(200,), seeds=(0,), epochs=2)
    if args.sizes:
        settings = ComparisonSettings(
            sizes=tuple(args.sizes), seeds=settings.seeds, epochs=settings.epochs
        )
    if args.seeds:
        settings = ComparisonSettings(sizes=settings.sizes, seeds=tuple(args.seeds), epochs=settings.epochs)

    outcomes, csv_path = run_comparison(args.out, settings)
    print(f"\nwrote {csv_path}")
    print(directional_summary(outcomes))


if __name__ == "__main__":
    main()
