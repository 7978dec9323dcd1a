#!/usr/bin/env python3
"""Run the headline desk-scale experiments and cache their RunRecords.

Two experiment families:

  * sparsity ordering: M=6, k_train in {1, 8}, 3 seeds, 20k steps. Compares
    mean OOD exact-match of the dense-ish (k=8) models against the k=1
    models on held-out rule tuples.
  * inference-k sweep: M=4, k_train=2, 3 seeds. After training, each model
    is evaluated at k_eval in {1..8}; we look at where OOD accuracy peaks.

Records land in results/headline/ keyed by config hash and seed, so reruns
are no-ops and the acceptance suite can read them without retraining.

These runs take hours on one core. Use --family/--seeds to shard the work,
and --steps to smoke-test the plumbing first.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from smoelab.cli import run_train_cell, aggregate_dir
from smoelab.model import ModelConfig
from smoelab.training import TrainConfig

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "results",
                       "headline")

# Width is reduced relative to the package default so that six 20k-step
# runs finish on a single desktop core; the comparisons are within this
# family, never across widths.
BASE_MODEL = dict(d_model=64, num_heads=4, num_blocks=2, num_experts=8,
                  expert_hidden=128, max_seq_len=64, activation="relu")
BASE_TRAIN = dict(p=10, batch_size=64, lr=2e-3, grad_clip=1.0,
                  eval_every=1000, eval_snapshot_size=1024,
                  eval_k_list=list(range(1, 9)))


def ordering_cells(seeds, steps):
    for seed in seeds:
        for k in (1, 8):
            yield TrainConfig(
                model=ModelConfig(k_train=k, **BASE_MODEL),
                M=6, steps=steps, seed=seed, **BASE_TRAIN)


def sweep_cells(seeds, steps):
    for seed in seeds:
        yield TrainConfig(
            model=ModelConfig(k_train=2, **BASE_MODEL),
            M=4, steps=steps, seed=seed, **BASE_TRAIN)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--family", choices=("ordering", "sweep", "all"),
                    default="all")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--out", default=OUT_DIR)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    cells = []
    if args.family in ("ordering", "all"):
        cells += list(ordering_cells(args.seeds, args.steps))
    if args.family in ("sweep", "all"):
        cells += list(sweep_cells(args.seeds, args.steps))

    for tc in cells:
        t0 = time.time()
        rec = run_train_cell(tc, args.out)
        print(f"M={tc.M} k_train={tc.model.k_train} seed={tc.seed}: "
              f"test={rec.final_test_acc:.4f} ood={rec.final_ood_acc:.4f} "
              f"({time.time() - t0:.0f}s)", flush=True)

    aggregate_dir(args.out)


if __name__ == "__main__":
    main()
