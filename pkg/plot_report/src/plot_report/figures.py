"""Figure rendering from metrics and training-log CSV files.

Inputs are never modified; identical CSVs render identical plotted data
(series are keyed and colored by sorted variant name).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRICS_COLUMNS = ["run_id", "variant", "resolution", "snapshot_index", "lead_time",
                   "mae", "rmse", "rel_l2"]
LOG_COLUMNS = ["epoch", "phase", "train_loss", "val_loss", "lr", "seconds"]


class MalformedCsvError(ValueError):
    """Raised with the 1-based line number of the offending CSV row."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def _read_rows(path, required, converters):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise MalformedCsvError(path, 1, "empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise MalformedCsvError(path, 1, f"missing columns {missing}")
        for row in reader:
            line = reader.line_num
            parsed = {}
            for col in required:
                value = row.get(col)
                if value is None or value == "":
                    raise MalformedCsvError(path, line, f"missing value for {col!r}")
                try:
                    parsed[col] = converters.get(col, str)(value)
                except ValueError as exc:
                    raise MalformedCsvError(path, line, f"bad {col!r} value {value!r}") from exc
            rows.append(parsed)
    if not rows:
        raise MalformedCsvError(path, 2, "no data rows")
    return rows


def read_metrics(path):
    conv = {"resolution": int, "snapshot_index": int, "lead_time": float,
            "mae": float, "rmse": float, "rel_l2": float}
    return _read_rows(path, METRICS_COLUMNS, conv)


def read_train_log(path):
    conv = {"epoch": int, "train_loss": float, "val_loss": float,
            "lr": float, "seconds": float}
    return _read_rows(path, LOG_COLUMNS, conv)


def _series(rows, variant, resolution, metric):
    pts = sorted((r["lead_time"], r[metric]) for r in rows
                 if r["variant"] == variant and r["resolution"] == resolution)
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_error_curves(metrics_csv, out_path) -> Path:
    """2x2 panel figure: MAE (left) and RMSE (right) on the coarse (top) and
    fine (bottom) grids, one line per variant against lead time."""
    rows = read_metrics(metrics_csv)
    variants = sorted({r["variant"] for r in rows})
    resolutions = sorted({r["resolution"] for r in rows})
    coarse = resolutions[0]
    fine = resolutions[-1] if len(resolutions) > 1 else None

    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    colors = {v: f"C{i % 10}" for i, v in enumerate(variants)}
    panel_grid = [(coarse, "mae"), (coarse, "rmse"), (fine, "mae"), (fine, "rmse")]
    for ax, (res, metric) in zip(axes.flat, panel_grid):
        if res is None:
            ax.text(0.5, 0.5, "no fine-grid rows", ha="center", va="center",
                    transform=ax.transAxes, color="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            continue
        for variant in variants:
            x, y = _series(rows, variant, res, metric)
            if x:
                ax.plot(x, y, marker="o", ms=3, color=colors[variant], label=variant)
        ax.set_title(f"{metric.upper()} at {res}x{res}")
        ax.grid(alpha=0.3)
    axes[1, 0].set_xlabel("lead time")
    axes[1, 1].set_xlabel("lead time")
    handles = [plt.Line2D([], [], color=colors[v], marker="o", ms=3) for v in variants]
    fig.legend(handles, variants, loc="lower center", ncol=min(len(variants), 4),
               frameon=False)
    fig.tight_layout(rect=(0, 0.04 + 0.03 * ((len(variants) - 1) // 4), 1, 1))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_training_log(log_csv, out_path) -> Path:
    """Loss curves per epoch with a vertical rule at the phase boundary; the
    loss axis switches to log scale when values span more than two decades."""
    rows = read_train_log(log_csv)
    epochs = [r["epoch"] for r in rows]
    train = [r["train_loss"] for r in rows]
    val = [r["val_loss"] for r in rows]

    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(epochs, train, marker="o", ms=3, label="train")
    finite_val = [v for v in val if v == v]
    if finite_val:
        ax.plot(epochs, val, marker="s", ms=3, label="validation")
    boundary = next((r["epoch"] for r in rows if r["phase"] == "finetune"), None)
    if boundary is not None and any(r["phase"] != "finetune" for r in rows):
        ax.axvline(boundary - 0.5, color="gray", ls="--", lw=1)
        ax.text(boundary - 0.5, ax.get_ylim()[1], " fine-tuning", va="top", fontsize=8,
                color="gray")
    positive = [v for v in train + finite_val if v > 0]
    if positive and max(positive) / min(positive) > 100.0:
        ax.set_yscale("log")
    ax.set_xlim(min(epochs), max(epochs))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
