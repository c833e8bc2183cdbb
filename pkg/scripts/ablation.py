#!/usr/bin/env python3
"""Ablation ladder on shared phantoms and folds: segmentor-only baseline,
generator+segmentor, and the full three-network pipeline."""
import argparse
import dataclasses
import json

from strokeforge.phantom import PhantomSpec, generate_dataset
from strokeforge.pipeline import TrainConfig, cross_validate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n_cases", type=int, default=24)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--folds", type=int, default=2)
    ap.add_argument("--total_epochs", type=int, default=24)
    args = ap.parse_args()

    cases = generate_dataset(PhantomSpec(n_cases=args.n_cases, seed=args.seed))
    base = TrainConfig.desk(seed=args.seed, folds=args.folds,
                            total_epochs=args.total_epochs,
                            lr_decay_epochs=(args.total_epochs // 2,
                                             args.total_epochs * 5 // 6))
    dice = {}
    for variant in ("segonly", "gen", "full"):
        cfg = dataclasses.replace(base, variant=variant)
        report = cross_validate(cases, cfg)
        dice[variant] = report["mean_dice"]
        print(f"{variant:8s} mean CV dice {report['mean_dice']:.4f}")
    ordered = dice["segonly"] <= dice["gen"] <= dice["full"]
    print(json.dumps({"mean_dice": dice, "ordering_ok": ordered,
                      "full_minus_segonly": dice["full"] - dice["segonly"]},
                     indent=1))


if __name__ == "__main__":
    main()
