"""Render run artifacts to matplotlib figures plus a combined summary CSV.

Consumes the delimited/JSON outputs of the train, simulate and optimize
commands and writes PNG figures next to a machine-readable summary.  Dates
are stripped from the PNG metadata so re-renders are byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = [
    "render_gantt",
    "render_stage_losses",
    "render_ratio_sweep",
    "collect_run",
    "write_report",
]

_PNG_META = {"Software": None}
_KIND_COLORS = {"FP_f": "#4c72b0", "FP_t": "#55a868", "BP_t": "#c44e52"}


def _savefig(fig, path: Path) -> None:
    fig.savefig(path, dpi=150, metadata=_PNG_META)
    plt.close(fig)


def render_gantt(rows: list[dict], path: Path, title: str = "pipeline trace") -> None:
    """Horizontal bars per device, colored by event kind, labeled by micro-batch."""
    devices = sorted({r["device"] for r in rows})
    ypos = {dev: i for i, dev in enumerate(devices)}
    fig, ax = plt.subplots(figsize=(9, 1.2 + 0.6 * len(devices)))
    for r in rows:
        color = _KIND_COLORS.get(r["event"], "#8172b2")
        ax.barh(
            ypos[r["device"]],
            r["end"] - r["start"],
            left=r["start"],
            height=0.6,
            color=color,
            edgecolor="black",
            linewidth=0.4,
        )
        if r["end"] > r["start"]:
            ax.text(
                (r["start"] + r["end"]) / 2,
                ypos[r["device"]],
                f"{r['event'][:2]}{r['mb']}",
                ha="center",
                va="center",
                fontsize=7,
            )
    ax.set_yticks(range(len(devices)), devices)
    ax.set_xlabel("time (s)")
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in _KIND_COLORS.values()]
    ax.legend(handles, list(_KIND_COLORS), loc="upper right", fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)


def render_stage_losses(runs: dict[str, list[dict]], path: Path) -> None:
    """Final loss per training stage, one line per run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, rows in sorted(runs.items()):
        xs = [int(r["stage"]) for r in rows]
        ys = [float(r["loss"]) for r in rows]
        names = [r["trainee"] for r in rows]
        ax.plot(xs, ys, marker="o", label=label)
        for x, y, name in zip(xs, ys, names):
            ax.annotate(name, (x, y), textcoords="offset points", xytext=(0, 5), fontsize=7)
    ax.set_xlabel("stage")
    ax.set_ylabel("final loss")
    ax.set_yscale("log")
    ax.set_title("stage losses")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)


def render_ratio_sweep(points: list[tuple[float, str, float]], path: Path) -> None:
    """Final loss versus frozen ratio, one line per task."""
    by_task: dict[str, list[tuple[float, float]]] = {}
    for ratio, task, loss in points:
        by_task.setdefault(task, []).append((ratio, loss))
    fig, ax = plt.subplots(figsize=(7, 4))
    for task, series in sorted(by_task.items()):
        series.sort()
        ax.plot([r for r, _ in series], [l for _, l in series], marker="o", label=task)
    ax.set_xlabel("frozen ratio")
    ax.set_ylabel("final loss")
    ax.set_title("effect of the frozen ratio")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)


def collect_run(run_dir: Path) -> dict:
    """Gather whatever artifacts a run directory holds."""
    run_dir = Path(run_dir)
    found: dict = {"name": run_dir.name, "dir": run_dir}
    cfg = run_dir / "config.json"
    if cfg.is_file():
        found["config"] = json.loads(cfg.read_text(encoding="utf-8"))
    stage_csv = run_dir / "stage_results.csv"
    if stage_csv.is_file():
        with open(stage_csv, newline="", encoding="utf-8") as fh:
            found["stages"] = list(csv.DictReader(fh))
    trace = run_dir / "trace.json"
    if trace.is_file():
        found["trace"] = json.loads(trace.read_text(encoding="utf-8"))
    result = run_dir / "result.json"
    if result.is_file():
        found["result"] = json.loads(result.read_text(encoding="utf-8"))
    return found


def write_report(run_dirs: list[Path], out_dir: Path) -> list[Path]:
    """Render figures for the given runs and write summary.csv; returns outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [collect_run(d) for d in sorted(Path(d) for d in run_dirs)]
    written: list[Path] = []

    loss_runs = {r["name"]: r["stages"] for r in runs if "stages" in r}
    if loss_runs:
        p = out_dir / "stage_losses.png"
        render_stage_losses(loss_runs, p)
        written.append(p)

    sweep_points = []
    for r in runs:
        ratio = r.get("config", {}).get("frozen_ratio")
        if ratio is None or "stages" not in r:
            continue
        for row in r["stages"]:
            sweep_points.append((float(ratio), row["trainee"], float(row["loss"])))
    if len({p[0] for p in sweep_points}) > 1:
        p = out_dir / "frozen_ratio_sweep.png"
        render_ratio_sweep(sweep_points, p)
        written.append(p)

    for r in runs:
        if "trace" in r:
            p = out_dir / f"gantt_{r['name']}.png"
            render_gantt(r["trace"], p, title=f"pipeline trace: {r['name']}")
            written.append(p)

    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "metric", "value"])
        for r in runs:
            for row in r.get("stages", []):
                writer.writerow([r["name"], f"loss:stage{row['stage']}:{row['trainee']}", row["loss"]])
            if "result" in r:
                for key in ("C_min", "k"):
                    if key in r["result"]:
                        writer.writerow([r["name"], key, r["result"][key]])
            if "trace" in r and r["trace"]:
                makespan = max(float(row["end"]) for row in r["trace"])
                writer.writerow([r["name"], "makespan", makespan])
    written.append(summary)
    return written
