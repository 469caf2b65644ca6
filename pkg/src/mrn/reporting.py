"""Run artifacts: results.csv, summary.json, predictions.jsonl, and the
comparison report (markdown + SVG curves)."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .errors import ContractViolation
from .storage import write_json
from .svg import line_chart
from .trainer import RunReport

RESULTS_CSV = "results.csv"
SUMMARY_JSON = "summary.json"
PREDICTIONS_JSONL = "predictions.jsonl"

CSV_COLUMNS = ("step", "task", "split", "correct", "total", "accuracy")


def write_run_artifacts(out_dir: str | Path, report: RunReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    counts: dict[tuple[int, int], list[int]] = {}
    for row in report.predictions:
        key = (row["step"], row["script_id"])
        c = counts.setdefault(key, [0, 0])
        c[0] += int(row["correct"])
        c[1] += 1
    with open(out / RESULTS_CSV, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for step in sorted({k[0] for k in counts}):
            step_rows = sorted(k for k in counts if k[0] == step)
            tot_ok = tot_n = 0
            for key in step_rows:
                ok, n = counts[key]
                tot_ok += ok
                tot_n += n
                w.writerow([key[0], key[1], "test", ok, n, repr(ok / n)])
            w.writerow([step, "all", "test", tot_ok, tot_n, repr(tot_ok / tot_n)])

    write_json(out / SUMMARY_JSON, report.summary_dict())

    with open(out / PREDICTIONS_JSONL, "w") as f:
        for row in report.predictions:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def recompute_from_predictions(path: str | Path) -> dict[int, float]:
    """Pooled per-step accuracy recomputed from persisted predictions."""
    ok: dict[int, int] = {}
    n: dict[int, int] = {}
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            s = row["step"]
            ok[s] = ok.get(s, 0) + int(row["correct"])
            n[s] = n.get(s, 0) + 1
    return {s: ok[s] / n[s] for s in sorted(n)}


def load_summary(path: str | Path) -> dict:
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ContractViolation(f"malformed summary {p}: {e}") from e


def write_comparison_report(out_path: str | Path, summaries: Sequence[dict],
                            names: Sequence[str]) -> None:
    """Markdown table (Avg/Last per system) plus accuracy-curve SVGs.

    Includes the forgetting curve: the first task's accuracy across steps.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Run comparison", "",
             "| run | mode | Avg | Last |",
             "|-----|------|-----|------|"]
    for name, s in zip(names, summaries):
        lines.append(f"| {name} | {s['mode']} | {s['avg']:.4f} | {s['last']:.4f} |")
    lines.append("")

    curves = {}
    max_steps = 0
    for name, s in zip(names, summaries):
        curves[name] = s["acc"]
        max_steps = max(max_steps, len(s["acc"]))
    if max_steps > 0:
        padded = {n: list(c) + [c[-1]] * (max_steps - len(c))
                  for n, c in curves.items()}
        line_chart(out / "accuracy_curves.svg", "pooled accuracy per step",
                   list(range(1, max_steps + 1)), padded,
                   x_label="step", y_label="accuracy")
        lines.append("![accuracy](accuracy_curves.svg)")

    forgetting = {}
    for name, s in zip(names, summaries):
        per_task = s.get("per_task") or []
        if not per_task:
            continue
        first_task = s["config"]["order"][0]
        curve = [row.get(str(first_task)) for row in per_task
                 if row.get(str(first_task)) is not None]
        if curve:
            forgetting[name] = curve
    if forgetting:
        steps = max(len(c) for c in forgetting.values())
        padded = {n: list(c) + [c[-1]] * (steps - len(c))
                  for n, c in forgetting.items()}
        line_chart(out / "first_task_accuracy.svg",
                   "first task's accuracy across steps",
                   list(range(1, steps + 1)), padded,
                   x_label="step", y_label="accuracy")
        lines.append("![forgetting](first_task_accuracy.svg)")

    (out / "report.md").write_text("\n".join(lines) + "\n")
