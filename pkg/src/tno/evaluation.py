"""Masked error metrics, rollout error-accumulation curves, zero-shot
super-resolution evaluation, and the ablation/benchmark suite that emits the
combined metrics CSV.

All metrics are computed in denormalized physical units.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import Dataset, znorm_invert
from .model import TNOConfig, TNOModel, VARIANTS
from .training import TrainPlan, rollout_batch, train_run
from .tensorio import write_json

CSV_HEADER = ["run_id", "variant", "resolution", "snapshot_index", "lead_time", "mae", "rmse", "rel_l2"]


def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    total = m.sum()
    if total == 0:
        raise ValueError("metric needs at least one valid pixel")
    return pred, target, m, total


def mae(pred, target, mask) -> float:
    pred, target, m, total = _masked(pred, target, mask)
    return float((m * np.abs(pred - target)).sum() / total)


def rmse(pred, target, mask) -> float:
    pred, target, m, total = _masked(pred, target, mask)
    return float(np.sqrt((m * (pred - target) ** 2).sum() / total))


def relative_l2(pred, target, mask) -> float:
    pred, target, m, _ = _masked(pred, target, mask)
    denom = np.sqrt((m * target**2).sum())
    if denom == 0:
        raise ValueError("relative_l2 needs a nonzero masked target")
    return float(np.sqrt((m * (pred - target) ** 2).sum()) / denom)


def region_mae(pred, target, region_mask) -> float:
    """MAE restricted to a support region (e.g. |target| above threshold)."""
    return mae(pred, target, region_mask)


def support_region(target, threshold: float = 0.01) -> np.ndarray:
    return (np.abs(np.asarray(target)) > threshold).astype(np.float64)


class MetricsTable:
    """Rows of per-snapshot metrics plus free-form metadata."""

    def __init__(self):
        self.rows: list[dict] = []
        self.metadata: dict = {}

    def add_row(self, run_id, variant, resolution, snapshot_index, lead_time, mae_v, rmse_v, rel_v):
        if mae_v < 0 or rmse_v < 0 or rel_v < 0:
            raise ValueError("metrics must be non-negative")
        if mae_v > rmse_v * (1.0 + 1e-12) + 1e-15:
            raise ValueError(f"mae {mae_v} exceeds rmse {rmse_v}")
        self.rows.append({
            "run_id": run_id, "variant": variant, "resolution": int(resolution),
            "snapshot_index": int(snapshot_index), "lead_time": float(lead_time),
            "mae": float(mae_v), "rmse": float(rmse_v), "rel_l2": float(rel_v),
        })

    def extend(self, other: "MetricsTable"):
        self.rows.extend(other.rows)
        for key, val in other.metadata.items():
            self.metadata.setdefault(key, val)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r["run_id"], r["variant"], r["resolution"], r["snapshot_index"],
                            repr(r["lead_time"]), repr(r["mae"]), repr(r["rmse"]), repr(r["rel_l2"])])
        if self.metadata:
            write_json(path.with_suffix(".meta.json"), self.metadata)

    @classmethod
    def read_csv(cls, path) -> "MetricsTable":
        table = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                table.add_row(row["run_id"], row["variant"], int(row["resolution"]),
                              int(row["snapshot_index"]), float(row["lead_time"]),
                              float(row["mae"]), float(row["rmse"]), float(row["rel_l2"]))
        return table

    def mean_over(self, column: str, where: dict | None = None) -> float:
        vals = [r[column] for r in self.rows
                if all(r[k] == v for k, v in (where or {}).items())]
        if not vals:
            raise ValueError(f"no rows match {where}")
        return float(np.mean(vals))


# ---------------------------------------------------------------------------
# rollout evaluation protocols

def error_accumulation_curve(model: TNOModel, dataset: Dataset, n_windows: int = 2,
                             split: str = "test", t_lo: int = 0,
                             run_id: str = "run", batch_size: int = 64,
                             predictor=None) -> MetricsTable:
    """Per-lead-time errors over repeated rollouts re-initialized from truth.

    Rollout chunks of n_windows*K steps start at ground-truth states spaced
    exactly one chunk apart, so each chunk is initialized fresh. Rows are one
    per snapshot index, averaged over all chunks and trajectories.
    """
    cfg = model.config
    k_total = n_windows * cfg.K
    h, w = dataset.mask.shape
    samples = dataset.bundles(split, cfg.L, k_total, stride=k_total, t_lo=t_lo)
    if not samples:
        raise ValueError("no evaluation windows available")
    dt_win_norm = 2.0 * (cfg.K * dataset.dt) / dataset.t_norm_span
    sums = {"mae": np.zeros(k_total), "rmse": np.zeros(k_total), "rel_l2": np.zeros(k_total)}
    count = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        batch = dataset.collate(chunk)
        if predictor is None:
            t_norm0 = 2.0 * batch["t0"] / dataset.t_norm_span - 1.0
            grid = batch["grid"].copy()
            grid[:, 0] = t_norm0[:, None, None]
            preds_n = rollout_batch(model, batch["v"], batch["hist"], grid, n_windows,
                                    window_time_step=dt_win_norm, mask=batch["mask"])
        else:
            preds_n = predictor(batch)
        preds = znorm_invert(preds_n.astype(np.float64), dataset.stats)
        targets = np.stack([s.U_fut for s in chunk])
        for b in range(len(chunk)):
            for j in range(k_total):
                sums["mae"][j] += mae(preds[b, j], targets[b, j], chunk[b].mask)
                sums["rmse"][j] += rmse(preds[b, j], targets[b, j], chunk[b].mask)
                sums["rel_l2"][j] += relative_l2(preds[b, j], targets[b, j], chunk[b].mask)
        count += len(chunk)
    table = MetricsTable()
    table.metadata = {"n_samples": count, "split": split, "n_windows": n_windows, "t_lo": t_lo}
    for j in range(k_total):
        table.add_row(run_id, cfg.variant, h, j, (j + 1) * dataset.dt,
                      sums["mae"][j] / count, sums["rmse"][j] / count, sums["rel_l2"][j] / count)
    return table


def super_resolution_eval(model: TNOModel, fine_dataset: Dataset, n_windows: int = 2,
                          split: str = "test", t_lo: int = 0, run_id: str = "run",
                          batch_size: int = 64) -> MetricsTable:
    """error_accumulation_curve on a finer grid with the same checkpoint."""
    h, w = fine_dataset.mask.shape
    if h < model.config.S or w < model.config.S:
        raise ValueError(f"fine grid {h}x{w} is smaller than the pooling resolution {model.config.S}")
    return error_accumulation_curve(model, fine_dataset, n_windows=n_windows, split=split,
                                    t_lo=t_lo, run_id=run_id, batch_size=batch_size)


def extrapolation_start(dataset: Dataset) -> int:
    cfg = dataset.manifest["config"]
    return int(round(cfg["T"] * cfg["train_time_fraction"]))


def ablation_suite(dataset: Dataset, base_config: TNOConfig, plan: TrainPlan,
                   variants=VARIANTS, n_windows: int = 2, include_fine: bool = True,
                   out_dir=None, quiet: bool = True) -> MetricsTable:
    """Train every variant under identical data/seed/budget and evaluate each
    with the rollout curve (and optionally at 2x resolution). A failing
    variant is recorded in the table metadata and the suite continues.
    """
    combined = MetricsTable()
    combined.metadata = {"failures": {}, "n_test_trajectories": len(dataset.trajectories["test"]),
                         "seed": plan.seed}
    t_lo = extrapolation_start(dataset)
    fine = dataset.resampled("2-up") if include_fine else None
    horizon = n_windows * base_config.K
    for variant in variants:
        run_id = f"{variant}-seed{plan.seed}"
        try:
            config = base_config.with_variant(variant)
            # every variant rolls out to the same snapshot horizon and trains
            # on the same number of windows (hence optimizer steps) per epoch
            var_windows = horizon // config.K
            var_plan = replace(plan, window_stride=plan.window_stride or horizon)
            var_dir = Path(out_dir) / variant if out_dir is not None else None
            model, _, _ = train_run(var_plan, config, dataset, out_dir=var_dir, quiet=quiet,
                                    restore_best=True)
            coarse = error_accumulation_curve(model, dataset, n_windows=var_windows,
                                              t_lo=t_lo, run_id=run_id)
            combined.extend(coarse)
            if fine is not None:
                combined.extend(super_resolution_eval(model, fine, n_windows=var_windows,
                                                      t_lo=t_lo, run_id=run_id))
        except Exception as exc:  # noqa: BLE001 - suite must survive one bad variant
            combined.metadata["failures"][variant] = f"{type(exc).__name__}: {exc}"
    return combined
