"""Cross-condition result aggregation: success curves per goal type with
standard-error bands (SVG) plus a plain-text summary table."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .harness import CSV_HEADER

GOAL_TYPE_ORDER = ("posture", "reaching", "pushing", "pickplace")
# Fields allowed to differ between compared runs.
_COMPARISON_EXEMPT = ("condition", "purpose", "resolver", "llm_url", "llm_mode", "out_dir")


class ReportError(ValueError):
    pass


class ConfigMismatchError(ReportError):
    def __init__(self, fields):
        self.fields = tuple(fields)
        super().__init__(f"run configs differ in: {', '.join(self.fields)}")


@dataclass
class RunData:
    directory: Path
    condition: str
    purpose: str
    config: dict
    rows: list[dict]


def load_run(directory) -> RunData:
    directory = Path(directory)
    config_path = directory / "config.json"
    metrics_path = directory / "metrics.csv"
    if not config_path.exists() or not metrics_path.exists():
        raise ReportError(f"{directory} is not a completed run (missing config.json/metrics.csv)")
    config = json.loads(config_path.read_text())
    with metrics_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ReportError(f"{metrics_path} has unexpected header {reader.fieldnames}")
        rows = [
            {
                **row,
                "seed": int(row["seed"]),
                "step": int(row["step"]),
                "success": int(row["success"]),
            }
            for row in reader
        ]
    if not rows:
        raise ReportError(f"{metrics_path} contains no metric rows")
    return RunData(
        directory=directory,
        condition=config["condition"],
        purpose=config["purpose"],
        config=config,
        rows=rows,
    )


def check_configs_match(runs: list[RunData]) -> None:
    """Everything except condition/purpose/resolver/output must agree,
    otherwise curves would not be comparable."""
    reference = runs[0].config
    differing = []
    for run in runs[1:]:
        for key in sorted(set(reference) | set(run.config)):
            if key in _COMPARISON_EXEMPT:
                continue
            a, b = reference.get(key), run.config.get(key)
            if isinstance(a, dict) and isinstance(b, dict):
                for sub in sorted(set(a) | set(b)):
                    if a.get(sub) != b.get(sub):
                        differing.append(f"{key}.{sub}")
            elif a != b:
                differing.append(key)
    if differing:
        raise ConfigMismatchError(sorted(set(differing)))


def mean_and_se(values) -> tuple[float, float]:
    """Sample mean and standard error (ddof=1); single values get SE 0."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(arr.std(ddof=1) / math.sqrt(arr.size))


def success_curves(run: RunData) -> dict[str, dict[int, list[float]]]:
    """goal_type -> step -> per-seed mean success over that type's goals."""
    acc: dict[str, dict[int, dict[int, list[int]]]] = {}
    for row in run.rows:
        by_step = acc.setdefault(row["goal_type"], {})
        by_seed = by_step.setdefault(row["step"], {})
        by_seed.setdefault(row["seed"], []).append(row["success"])
    return {
        gtype: {
            step: [float(np.mean(v)) for _, v in sorted(by_seed.items())]
            for step, by_seed in sorted(by_step.items())
        }
        for gtype, by_step in acc.items()
    }


def _goal_color(goal_id: str) -> str | None:
    for color in ("blue", "green", "red"):
        if f"-{color}" in goal_id:
            return color
    return None


def _final_cube_success(run: RunData, color: str) -> float | None:
    """Mean success over the final checkpoint's goals targeting a cube."""
    final_step = max(row["step"] for row in run.rows)
    vals = [
        row["success"]
        for row in run.rows
        if row["step"] == final_step and _goal_color(row["goal_id"]) == color
    ]
    return float(np.mean(vals)) if vals else None


def _purpose_color(runs: list[RunData]) -> str | None:
    """Infer the purpose cube from the POEL run's purpose text."""
    for run in runs:
        if run.condition == "poel":
            for color in ("blue", "green", "red"):
                if color in run.purpose.lower():
                    return color
    return None


def summary_table(runs: list[RunData]) -> str:
    lines = []
    header = f"{'condition':<10} {'goal type':<10} {'final mean':>10} {'se':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for run in runs:
        curves = success_curves(run)
        for gtype in GOAL_TYPE_ORDER:
            if gtype not in curves:
                continue
            final_step = max(curves[gtype])
            mean, se = mean_and_se(curves[gtype][final_step])
            lines.append(f"{run.condition:<10} {gtype:<10} {mean:>10.3f} {se:>8.3f}")
        overall_by_seed: dict[int, list[int]] = {}
        final_step = max(row["step"] for row in run.rows)
        for row in run.rows:
            if row["step"] == final_step:
                overall_by_seed.setdefault(row["seed"], []).append(row["success"])
        mean, se = mean_and_se([np.mean(v) for v in overall_by_seed.values()])
        lines.append(f"{run.condition:<10} {'overall':<10} {mean:>10.3f} {se:>8.3f}")
    trade = tradeoff_lines(runs)
    if trade:
        lines.append("")
        lines.extend(trade)
    return "\n".join(lines)


def tradeoff_lines(runs: list[RunData]) -> list[str]:
    """Purpose-cube gain vs non-purpose-cube change, POEL relative to
    each baseline (report-only; no threshold)."""
    color = _purpose_color(runs)
    poel = next((r for r in runs if r.condition == "poel"), None)
    if color is None or poel is None:
        return []
    other = {"blue": "green", "green": "blue"}.get(color)
    if other is None:
        return []
    lines = []
    poel_purpose = _final_cube_success(poel, color)
    poel_other = _final_cube_success(poel, other)
    for run in runs:
        if run.condition == "poel":
            continue
        base_purpose = _final_cube_success(run, color)
        base_other = _final_cube_success(run, other)
        if None in (poel_purpose, poel_other, base_purpose, base_other):
            continue
        lines.append(
            f"trade-off vs {run.condition}: {color}-cube goals "
            f"{poel_purpose - base_purpose:+.3f}, {other}-cube goals "
            f"{poel_other - base_other:+.3f}"
        )
    return lines


def render_report(run_dirs, out_path) -> str:
    """Charts (SVG) + summary table (returned, and written next to the
    SVG as a .txt file)."""
    dirs = list(run_dirs)
    if not dirs:
        raise ReportError("no run directories given")
    runs = [load_run(d) for d in dirs]
    check_configs_match(runs)

    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True, sharey=True)
    for ax, gtype in zip(axes.flat, GOAL_TYPE_ORDER):
        for run in runs:
            curves = success_curves(run).get(gtype)
            if not curves:
                continue
            steps = sorted(curves)
            stats = [mean_and_se(curves[s]) for s in steps]
            means = np.array([m for m, _ in stats])
            ses = np.array([s for _, s in stats])
            ax.plot(steps, means, marker="o", markersize=3, label=run.condition)
            ax.fill_between(steps, means - ses, means + ses, alpha=0.2)
        ax.set_title(gtype)
        ax.set_ylim(-0.05, 1.05)
        ax.grid(alpha=0.3)
    for ax in axes[-1]:
        ax.set_xlabel("env steps")
    for ax in axes[:, 0]:
        ax.set_ylabel("mean success")
    axes.flat[0].legend(loc="upper left", fontsize=8)
    fig.suptitle("Goal success by type (mean ± SE over seeds)")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg")
    plt.close(fig)

    table = summary_table(runs)
    out_path.with_suffix(".txt").write_text(table + "\n")
    return table
