"""Experiment front end: single runs, (M x k) sweeps, and theory curves.

One JSON config per experiment; subcommands ``train``, ``sweep``, ``theory``,
``aggregate``. Outputs are plot-ready CSV/JSON only. Exit codes: 0 success,
2 config error, 3 partial sweep failure, 4 no data.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import traceback
from dataclasses import asdict

from .common import ConfigError
from .theory import ErrorModelParams, export_error_curve, optimal_k
from .training import RunRecord, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_NO_DATA = 4


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _out_dir(cfg: dict, override: str | None) -> str:
    out = override or os.environ.get("SMOELAB_OUT") or cfg.get("output_dir")
    if not out:
        raise ConfigError("no output_dir in config and no --out given")
    os.makedirs(out, exist_ok=True)
    return out


def _record_path(out_dir: str, record: RunRecord) -> str:
    return os.path.join(out_dir,
                        f"run_{record.config_hash}_{record.seed}.json")


def run_train_cell(train_cfg: TrainConfig, out_dir: str) -> RunRecord:
    """Train once and persist the RunRecord (JSON + metric-curve CSV).

    Records are cached by (config hash, seed): an existing file is loaded
    instead of recomputed, which is sound because runs are deterministic.
    """
    probe = os.path.join(out_dir,
                         f"run_{train_cfg.hash()}_{train_cfg.seed}.json")
    if os.path.exists(probe):
        with open(probe) as fh:
            return RunRecord.from_json(fh.read())
    _, record = train(train_cfg)
    with open(probe, "w") as fh:
        fh.write(record.to_json())
    record.write_csv(probe.replace(".json", "_curve.csv"))
    return record


def cmd_train(cfg: dict, out_dir: str, seed_override: int | None) -> int:
    tc = TrainConfig.from_dict(cfg.get("train") or {})
    if seed_override is not None:
        tc.seed = seed_override
    tc.validate()
    record = run_train_cell(tc, out_dir)
    print(f"run {record.config_hash} seed {record.seed}: "
          f"test {record.final_test_acc:.4f} ood {record.final_ood_acc:.4f}")
    return EXIT_OK


def _sweep_cells(cfg: dict) -> list[TrainConfig]:
    sweep = cfg.get("sweep") or {}
    for key in ("M_list", "k_list", "seeds"):
        if key not in sweep:
            raise ConfigError(f"sweep config missing {key!r}")
    base = sweep.get("base_train", {})
    cells = []
    for M in sweep["M_list"]:
        for k in sweep["k_list"]:
            for seed in sweep["seeds"]:
                d = json.loads(json.dumps(base))  # deep copy
                d["M"] = M
                d["seed"] = seed
                d.setdefault("model", {})["k_train"] = k
                cells.append(TrainConfig.from_dict(d))
    return cells


def _run_cell_safe(args):
    tc, out_dir = args
    try:
        rec = run_train_cell(tc, out_dir)
        return (tc.M, tc.model.k_train, tc.seed, None,
                rec.final_test_acc, rec.final_ood_acc)
    except Exception:
        return (tc.M, tc.model.k_train, tc.seed, traceback.format_exc(),
                None, None)


def cmd_sweep(cfg: dict, out_dir: str, jobs: int) -> int:
    cells = _sweep_cells(cfg)
    for tc in cells:
        tc.validate()
    work = [(tc, out_dir) for tc in cells]
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_run_cell_safe, work)
    else:
        results = [_run_cell_safe(w) for w in work]

    failures = [r for r in results if r[3] is not None]
    for M, k, seed, err, _, _ in failures:
        with open(os.path.join(out_dir, f"failed_M{M}_k{k}_s{seed}.txt"),
                  "w") as fh:
            fh.write(err)
    code = aggregate_dir(out_dir)
    if failures:
        print(f"{len(failures)}/{len(results)} sweep cells failed",
              file=sys.stderr)
        return EXIT_PARTIAL
    return code


def aggregate_dir(out_dir: str) -> int:
    """Recompute the sweep summary from RunRecords on disk; idempotent."""
    records = []
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("run_") and name.endswith(".json"):
            with open(os.path.join(out_dir, name)) as fh:
                records.append(RunRecord.from_json(fh.read()))
    if not records:
        print(f"no RunRecords found in {out_dir}", file=sys.stderr)
        return EXIT_NO_DATA

    rows = sorted(
        (r.M, r.k_train, r.seed, r.final_test_acc, r.final_ood_acc)
        for r in records
    )
    with open(os.path.join(out_dir, "sweep_summary.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "k_train", "seed", "test_acc", "ood_acc"])
        w.writerows(rows)

    groups: dict[tuple, list] = {}
    for M, k, seed, ta, oa in rows:
        groups.setdefault((M, k), []).append((ta, oa))
    aggregates = []
    for (M, k), vals in sorted(groups.items()):
        n = len(vals)
        mt = sum(v[0] for v in vals) / n
        mo = sum(v[1] for v in vals) / n
        if n > 1:
            st = math.sqrt(sum((v[0] - mt) ** 2 for v in vals) / (n - 1) / n)
            so = math.sqrt(sum((v[1] - mo) ** 2 for v in vals) / (n - 1) / n)
        else:
            st = so = None
        aggregates.append({
            "M": M, "k_train": k, "num_seeds": n,
            "mean_test_acc": mt, "stderr_test_acc": st,
            "mean_ood_acc": mo, "stderr_ood_acc": so,
        })
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as fh:
        json.dump({"rows": [list(r) for r in rows],
                   "aggregates": aggregates}, fh, indent=1)
    return EXIT_OK


def cmd_theory(cfg: dict, out_dir: str) -> int:
    sets = (cfg.get("theory") or {}).get("param_sets")
    if not sets:
        raise ConfigError("theory config needs a non-empty param_sets list")
    summary = []
    for d in sets:
        params = ErrorModelParams(**d)
        path = export_error_curve(params, out_dir)
        k_star, curve = optimal_k(params)
        summary.append({"params": asdict(params), "k_star": k_star,
                        "min_total_error": min(curve), "curve_csv": path})
        print(f"{os.path.basename(path)}: k*={k_star}")
    with open(os.path.join(out_dir, "theory_kstar.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smoelab")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep", "theory"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int,
                       default=int(os.environ.get("SMOELAB_JOBS", "1")))
    p = sub.add_parser("aggregate")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "aggregate":
            return aggregate_dir(args.out)
        cfg = _load_config(args.config)
        out_dir = _out_dir(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.seed)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.jobs)
        return cmd_theory(cfg, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
