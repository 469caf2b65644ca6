"""Command-line surface: gen-data, run, ablate, report, verify.

Every path is a flag; the only writes go to the chosen output/data
directories. MRN_SEED in the environment overrides the configured seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import storage
from .config import (MODES, ExperimentConfig, RehearsalConfig, RouterConfig,
                     ORDER_ALTERNATING, ORDER_LARGE_FIRST, ORDER_LARGE_LAST,
                     default_config, load_config, save_config)
from .errors import ContractViolation
from .glyphs import TaskDataset, build_task_dataset, CharsetRegistry
from .reporting import (load_summary, write_comparison_report,
                        write_run_artifacts, SUMMARY_JSON)
from .svg import bar_chart, line_chart
from .trainer import run_mode
from .verify import run_all

ABLATION_AXES = ("rehearsal_size", "sampling", "alpha", "depth", "order", "voting")


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    if getattr(args, "voting", None):
        cfg.voting = args.voting
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _gen_data(cfg: ExperimentConfig, data_dir: Path, quiet: bool = False):
    """Write per-script MRNB caches plus the registry sidecar; identical
    existing files are left untouched (checksum match)."""
    data_dir.mkdir(parents=True, exist_ok=True)
    registry = CharsetRegistry(overlap=cfg.overlap)
    datasets: dict[int, TaskDataset] = {}
    coverage_rows = []
    for sid in cfg.order:
        spec = cfg.script(sid)
        ds = build_task_dataset(spec, registry, cfg.noise, cfg.max_len)
        datasets[sid] = ds
        blob = storage.serialize_dataset_cache(ds.train + ds.test)
        path = data_dir / f"script_{sid}.mrnb"
        digest = hashlib.sha256(blob).hexdigest()
        if path.exists() and storage.file_sha256(path) == digest:
            status = "unchanged, skipped"
        else:
            path.write_bytes(blob)
            status = "written"
        cov = ds.coverage
        coverage_rows.append((sid, spec.charset_size,
                              len(cov.absent_categories), status))
    sidecar = {
        "registry": registry.to_dict(),
        "max_len": cfg.max_len,
        "noise": cfg.to_dict()["noise"],
        "scripts": cfg.to_dict()["scripts"],
        "order": cfg.order,
    }
    storage.write_json(data_dir / "registry.json", sidecar)
    if not quiet:
        print("script  charset  absent-from-train  cache")
        for sid, k, absent, status in coverage_rows:
            print(f"{sid:>6}  {k:>7}  {absent:>17}  {status}")
    return datasets, registry


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    _gen_data(cfg, Path(args.data_dir))
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data_dir:
        _gen_data(cfg, Path(args.data_dir), quiet=True)
    report = run_mode(cfg, args.mode, out_dir=out)
    write_run_artifacts(out, report)
    save_config(out / "config.json", cfg)
    print(f"mode={report.mode} avg={report.avg:.4f} last={report.last:.4f} "
          f"({report.seconds:.0f}s)")
    violations = report.audit.get("violations", [])
    if violations:
        print(f"AUDIT VIOLATIONS: {violations}", file=sys.stderr)
        return 1
    return 0


def _axis_grid(cfg: ExperimentConfig, axis: str):
    """(label, config) pairs for one ablation axis."""
    grid = []
    if axis == "rehearsal_size":
        for cap in (100, 150, 200):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            c.rehearsal = RehearsalConfig(cap, cfg.rehearsal.strategy)
            grid.append((str(cap), c))
    elif axis == "sampling":
        for strat in ("random", "confidence", "length", "frequency"):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            c.rehearsal = RehearsalConfig(cfg.rehearsal.capacity, strat)
            grid.append((strat, c))
    elif axis == "alpha":
        for a in (1.0, 5.0, 10.0, 15.0, 20.0):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            c.router = RouterConfig(cfg.router.variant, cfg.router.depth, a,
                                    cfg.router.hidden)
            grid.append((str(int(a)), c))
    elif axis == "depth":
        for d in (1, 2, 3):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            c.router = RouterConfig(cfg.router.variant, d, cfg.router.alpha,
                                    cfg.router.hidden)
            grid.append((str(d), c))
    elif axis == "order":
        for name, order in (("large_first", ORDER_LARGE_FIRST),
                            ("alternating", ORDER_ALTERNATING),
                            ("large_last", ORDER_LARGE_LAST)):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            known = {s.script_id for s in c.scripts}
            if not set(order) <= known:
                raise ContractViolation(
                    f"order axis needs scripts {order}, config has {sorted(known)}"
                )
            c.order = list(order)
            grid.append((name, c))
    elif axis == "voting":
        for v in ("soft", "hard"):
            c = ExperimentConfig.from_dict(cfg.to_dict())
            c.voting = v
            grid.append((v, c))
    else:
        raise ContractViolation(f"unknown ablation axis {axis!r}")
    return grid


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = _axis_grid(cfg, args.axis)
    stage1_cache: dict = {}
    rows = []
    from .trainer import ProbeCache

    probe_cache = ProbeCache()
    for label, c in grid:
        run_dir = out / f"{args.axis}_{label}"
        rep = run_mode(c, "mrn", stage1_cache=stage1_cache,
                       probe_cache=probe_cache, out_dir=run_dir)
        write_run_artifacts(run_dir, rep)
        save_config(run_dir / "config.json", c)
        rows.append({"axis": args.axis, "value": label,
                     "avg": rep.avg, "last": rep.last})
        print(f"{args.axis}={label}: avg={rep.avg:.4f} last={rep.last:.4f}")

    import csv as _csv

    with open(out / f"ablation_{args.axis}.csv", "w", newline="") as f:
        w = _csv.DictWriter(f, fieldnames=["axis", "value", "avg", "last"])
        w.writeheader()
        w.writerows(rows)

    labels = [r["value"] for r in rows]
    avgs = [r["avg"] for r in rows]
    lasts = [r["last"] for r in rows]
    numeric = all(v.replace(".", "").isdigit() for v in labels)
    chart = out / f"ablation_{args.axis}.svg"
    if numeric:
        line_chart(chart, f"ablation: {args.axis}",
                   [float(v) for v in labels],
                   {"Avg": avgs, "Last": lasts}, x_label=args.axis,
                   y_label="accuracy")
    else:
        bar_chart(chart, f"ablation: {args.axis} (Avg)", labels, avgs,
                  y_label="accuracy")
    if args.axis == "rehearsal_size":
        monotone = all(a <= b + 1e-12 for a, b in zip(avgs, avgs[1:]))
        print(f"rehearsal-size trend monotone nondecreasing: {monotone}")
        if not monotone:
            print("TREND VIOLATION: larger memory did not help", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    summaries = []
    names = []
    for run_dir in args.runs:
        p = Path(run_dir) / SUMMARY_JSON
        summaries.append(load_summary(p))
        names.append(Path(run_dir).name)
    write_comparison_report(Path(args.out), summaries, names)
    print(f"report written to {args.out}")
    return 0


def cmd_verify(args) -> int:
    return 0 if run_all(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mrn",
        description="incremental multilingual glyph recognition with routed "
                    "per-language recognizers",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write dataset caches + registry sidecar")
    g.add_argument("--config", help="config JSON (default: built-in benchmark)")
    g.add_argument("--data-dir", required=True)
    g.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("run", help="execute one protocol end to end")
    r.add_argument("--config")
    r.add_argument("--mode", choices=MODES, default="mrn")
    r.add_argument("--out", help="output directory (overrides config)")
    r.add_argument("--data-dir", help="also materialize dataset caches here")
    r.add_argument("--voting", choices=("soft", "hard"))
    r.add_argument("--seed", type=int)
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("ablate", help="sweep one axis of the configuration")
    a.add_argument("--config")
    a.add_argument("--axis", choices=ABLATION_AXES, required=True)
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.set_defaults(fn=cmd_ablate)

    rp = sub.add_parser("report", help="compare finished runs")
    rp.add_argument("runs", nargs="+", help="run directories with summary.json")
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)

    v = sub.add_parser("verify", help="gradient, oracle, and fusion suites")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # structured error surface for scripts
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
