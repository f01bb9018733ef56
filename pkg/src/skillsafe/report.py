"""Render run reports: figures from the line-delimited metric records.

Reads a run directory (history.jsonl written by training, or any metrics
log), renders the learning curves and the safety census to PNG files and
writes a delimited summary table alongside.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


_CURVES = [
    ("success_rate", "success rate", "tab:green"),
    ("sw_time", "success-weighted time (steps)", "tab:blue"),
    ("sw_energy", "success-weighted energy", "tab:orange"),
    ("mean_r_H", "mean episode reward", "tab:purple"),
]


def _load_history(run_dir: Path) -> list[dict]:
    for name in ("history.jsonl", "metrics.jsonl", "log.jsonl"):
        path = run_dir / name
        if path.exists():
            rows = []
            with open(path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if rec.get("type") in (None, "metric") \
                            and "iteration" in rec:
                        rows.append(rec)
            if rows:
                return rows
    raise FileNotFoundError(f"no metric history found under {run_dir}")


def render_run(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write learning-curve and safety figures plus summary.csv.

    Returns the list of files written.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = _load_history(run_dir)
    its = [r["iteration"] for r in rows]
    written = []

    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, (key, label, color) in zip(axes.ravel(), _CURVES):
        ys = [r.get(key, float("nan")) for r in rows]
        ax.plot(its, ys, color=color, lw=1.4)
        ax.set_title(label, fontsize=9)
        ax.grid(alpha=0.3)
    for ax in axes[-1]:
        ax.set_xlabel("iteration")
    fig.suptitle("training metrics")
    fig.tight_layout()
    path = out / "metrics.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 3.2))
    for key, color in (("min_barrier", "tab:red"),):
        ys = [r.get(key, float("nan")) for r in rows]
        ax.plot(its, ys, color=color, lw=1.2, label="min barrier value")
    ax.axhline(0.0, color="k", lw=0.8, ls="--")
    ax2 = ax.twinx()
    for key, color, lbl in (("violations", "tab:brown", "violations"),
                            ("infeasible", "tab:gray", "infeasible programs")):
        ys = [r.get(key, 0) for r in rows]
        ax2.plot(its, ys, color=color, lw=1.0, label=lbl)
    ax.set_xlabel("iteration")
    ax.set_ylabel("barrier value")
    ax2.set_ylabel("event count")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, fontsize=8, loc="upper right")
    ax.set_title("safety census")
    fig.tight_layout()
    path = out / "safety.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    keys = sorted({k for r in rows for k in r
                   if isinstance(r[k], (int, float))})
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    written.append(path)
    return written
