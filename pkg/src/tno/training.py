"""Two-phase training: teacher forcing, then fine-tuning on the model's own
rollouts, with temporal bundling, masked loss, cosine or step scheduling,
gradient clipping and best/final checkpointing.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import TNOConfig, TNOModel
from .optim import AdamState, LRSchedule, adam_step, clip_grad_norm
from .tensor import Tape, Tensor, backward, concat, hadamard, masked_mse, take_slice
from .tensorio import save_checkpoint


@dataclass
class TrainPlan:
    tf_epochs: int = 30
    ft_epochs: int = 15
    batch_size: int = 16
    lr0: float = 1e-3
    weight_decay: float = 1e-3
    schedule: dict = field(default_factory=lambda: {"kind": "cosine_anneal"})
    rollout_windows_per_sample: int = 2
    window_stride: int | None = None
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.tf_epochs + self.ft_epochs < 1:
            raise ValueError("need at least one training epoch")
        if self.rollout_windows_per_sample < 1:
            raise ValueError("rollout_windows_per_sample must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tf_epochs": self.tf_epochs, "ft_epochs": self.ft_epochs,
            "batch_size": self.batch_size, "lr0": self.lr0,
            "weight_decay": self.weight_decay, "schedule": dict(self.schedule),
            "rollout_windows_per_sample": self.rollout_windows_per_sample,
            "window_stride": self.window_stride, "clip_norm": self.clip_norm,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainPlan keys: {sorted(unknown)}")
        return cls(**d)

    def build_schedule(self) -> LRSchedule:
        sched = dict(self.schedule)
        kind = sched.pop("kind", "cosine_anneal")
        if kind == "cosine_anneal":
            sched.setdefault("total_steps", self.tf_epochs + self.ft_epochs)
        return LRSchedule(kind=kind, lr0=self.lr0, **sched)


@dataclass
class TrainLogRow:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


class TrainLog:
    """Per-epoch records, serialized as CSV."""

    HEADER = ["epoch", "phase", "train_loss", "val_loss", "lr", "seconds"]

    def __init__(self):
        self.rows: list[TrainLogRow] = []

    def add(self, **kw):
        self.rows.append(TrainLogRow(**kw))

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.epoch, r.phase, repr(r.train_loss), repr(r.val_loss),
                            repr(r.lr), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.add(epoch=int(row["epoch"]), phase=row["phase"],
                        train_loss=float(row["train_loss"]), val_loss=float(row["val_loss"]),
                        lr=float(row["lr"]), seconds=float(row["seconds"]))
        return log


def _mask_tensor(mask: np.ndarray, channels: int) -> Tensor:
    return Tensor(np.broadcast_to(mask[:, None], (mask.shape[0], channels) + mask.shape[1:]).copy())


def _grid_with_time(grid: np.ndarray, t_norm: np.ndarray) -> Tensor:
    g = grid.copy()
    g[:, 0] = t_norm[:, None, None]
    return Tensor(g)


def windowed_loss(model: TNOModel, batch: dict, dataset: Dataset, n_windows: int,
                  teacher_forcing: bool) -> Tensor:
    """Masked MSE summed over consecutive K-step windows.

    Window w > 0 is conditioned on the last L snapshots of window w-1: the
    ground truth under teacher forcing, the model's own (differentiable)
    prediction during fine-tuning. Fed-back snapshots are zero-filled on
    masked pixels, matching how initial histories enter the model.
    """
    cfg = model.config
    k, length = cfg.K, cfg.L
    if batch["fut"].shape[1] != n_windows * k:
        raise ValueError(f"batch carries {batch['fut'].shape[1]} future steps, "
                         f"need {n_windows}*{k}")
    v = Tensor(batch["v"])
    hist = Tensor(batch["hist"])
    mask_l = _mask_tensor(batch["mask"], length)
    mask_k = Tensor(batch["mask"][:, None])
    dt_win_norm = 2.0 * (k * dataset.dt) / dataset.t_norm_span
    t_norm0 = 2.0 * batch["t0"] / dataset.t_norm_span - 1.0
    total = None
    for w in range(n_windows):
        grid_w = _grid_with_time(batch["grid"], t_norm0 + w * dt_win_norm)
        pred = model(v, hist, grid_w)
        target = batch["fut"][:, w * k : (w + 1) * k]
        loss_w = masked_mse(pred, target, mask_k)
        total = loss_w if total is None else total + loss_w
        if w + 1 < n_windows:
            if teacher_forcing:
                stacked = np.concatenate([hist.data, target], axis=1)
                hist = hadamard(Tensor(stacked[:, -length:].copy()), mask_l)
            else:
                stacked = concat([hist, pred], 1)
                window = take_slice(stacked, 1, stacked.shape[1] - length, stacked.shape[1])
                hist = hadamard(window, mask_l)
    return total


def teacher_forcing_epoch(model, samples, dataset, plan, opt_state, lr, rng) -> float:
    return _train_epoch(model, samples, dataset, plan, opt_state, lr, rng, teacher_forcing=True)


def finetune_epoch(model, samples, dataset, plan, opt_state, lr, rng) -> float:
    return _train_epoch(model, samples, dataset, plan, opt_state, lr, rng, teacher_forcing=False)


def _train_epoch(model, samples, dataset, plan, opt_state, lr, rng, teacher_forcing) -> float:
    model.train()
    order = rng.permutation(len(samples))
    total, count = 0.0, 0
    for lo in range(0, len(order), plan.batch_size):
        idx = order[lo : lo + plan.batch_size]
        batch = dataset.collate([samples[i] for i in idx])
        model.zero_grad()
        with Tape() as tape:
            loss = windowed_loss(model, batch, dataset, plan.rollout_windows_per_sample,
                                 teacher_forcing)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss {value} in {'teacher-forcing' if teacher_forcing else 'fine-tuning'} batch")
        backward(loss, tape)
        clip_grad_norm(model.parameters(), plan.clip_norm)
        adam_step(opt_state, lr)
        total += value * len(idx)
        count += len(idx)
    return total / max(count, 1)


def evaluate_loss(model, samples, dataset, plan) -> float:
    """Free-rollout windowed loss without any parameter or buffer updates."""
    model.eval()
    total, count = 0.0, 0
    for lo in range(0, len(samples), plan.batch_size):
        batch = dataset.collate(samples[lo : lo + plan.batch_size])
        loss = windowed_loss(model, batch, dataset, plan.rollout_windows_per_sample,
                             teacher_forcing=False)
        total += loss.item() * (min(lo + plan.batch_size, len(samples)) - lo)
        count += min(lo + plan.batch_size, len(samples)) - lo
    return total / max(count, 1)


def rollout_batch(model: TNOModel, v: np.ndarray, u_init: np.ndarray, grid: np.ndarray,
                  n_windows: int, window_time_step: float = 0.0,
                  mask: np.ndarray | None = None) -> np.ndarray:
    """Autoregressive rollout in eval mode; returns (B, n_windows*K, H, W).

    Each window consumes the last L predicted snapshots of the previous one;
    window_time_step is the normalized time advance of the grid's t channel
    per window.
    """
    model.eval()
    cfg = model.config
    vt = Tensor(v)
    hist = Tensor(u_init)
    if mask is not None:
        hist = hadamard(hist, _mask_tensor(mask, cfg.L))
    preds = []
    for w in range(n_windows):
        g = grid.copy()
        g[:, 0] += w * window_time_step
        pred = model(vt, hist, Tensor(g))
        preds.append(pred.data)
        if w + 1 < n_windows:
            stacked = np.concatenate([hist.data, pred.data], axis=1)[:, -cfg.L :]
            if mask is not None:
                stacked = stacked * mask[:, None]
            hist = Tensor(stacked.copy())
    return np.concatenate(preds, axis=1)


def rollout(model: TNOModel, v: Tensor, u_init: Tensor, grid: Tensor,
            n_windows: int, window_time_step: float = 0.0) -> np.ndarray:
    """Single-sample rollout; returns (n_windows*K, H, W)."""
    out = rollout_batch(model, _np3(v)[None], _np3(u_init)[None], _np3(grid)[None],
                        n_windows, window_time_step)
    return out[0]


def _np3(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def train_run(plan: TrainPlan, config: TNOConfig, dataset: Dataset,
              out_dir=None, quiet: bool = True, restore_best: bool = False):
    """Teacher forcing then fine-tuning; returns (model, log, checkpoints).

    Saves the checkpoint with the lowest validation free-rollout loss plus
    the final checkpoint when out_dir is given; restore_best additionally
    loads those best-validation weights back into the returned model (the
    deployment condition). Fully determined by (plan, config, dataset bits).
    """
    if config.input_channels != dataset.input_channels:
        raise ValueError(f"model expects {config.input_channels} input channels, "
                         f"dataset provides {dataset.input_channels}")
    t_count = dataset.manifest["config"]["T"]
    frac = dataset.manifest["config"]["train_time_fraction"]
    t_hi = max(int(round(t_count * frac)), config.L + plan.rollout_windows_per_sample * config.K + 1)
    k_total = plan.rollout_windows_per_sample * config.K
    stride = plan.window_stride or k_total
    train_samples = dataset.bundles("train", config.L, k_total, stride, t_hi=t_hi)
    val_samples = dataset.bundles("val", config.L, k_total, stride, t_hi=t_hi)

    seed_seq = np.random.SeedSequence(plan.seed)
    init_seed, shuffle_seed = seed_seq.spawn(2)
    model = TNOModel(config, init_seed=int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seed)
    opt = AdamState(model.parameters(), weight_decay=plan.weight_decay)
    sched = plan.build_schedule()
    log = TrainLog()
    norm_info = _norm_info(dataset)

    best_val = np.inf
    best_state = None
    best_epoch = -1
    total_epochs = plan.tf_epochs + plan.ft_epochs
    for epoch in range(total_epochs):
        phase = "teacher_forcing" if epoch < plan.tf_epochs else "finetune"
        lr = sched.lr_at(epoch)
        start = time.perf_counter()
        if phase == "teacher_forcing":
            train_loss = teacher_forcing_epoch(model, train_samples, dataset, plan, opt, lr, rng)
        else:
            train_loss = finetune_epoch(model, train_samples, dataset, plan, opt, lr, rng)
        val_loss = evaluate_loss(model, val_samples, dataset, plan) if val_samples else float("nan")
        seconds = time.perf_counter() - start
        log.add(epoch=epoch, phase=phase, train_loss=train_loss, val_loss=val_loss,
                lr=lr, seconds=seconds)
        if not quiet:
            print(f"epoch {epoch:3d} [{phase:15s}] train {train_loss:.6f} val {val_loss:.6f} lr {lr:.2e}")
        if val_samples and val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = _snapshot(model)

    checkpoints = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint_final", model, total_epochs - 1, norm_info)
        checkpoints["final"] = out_dir / "checkpoint_final"
        if best_state is not None:
            current = _snapshot(model)
            _restore(model, best_state)
            save_checkpoint(out_dir / "checkpoint_best", model, best_epoch, norm_info)
            _restore(model, current)
            checkpoints["best"] = out_dir / "checkpoint_best"
        log.write_csv(out_dir / "train_log.csv")
    if restore_best and best_state is not None:
        _restore(model, best_state)
    return model, log, checkpoints


def _norm_info(dataset: Dataset) -> dict:
    info = dict(dataset.manifest["norm"])
    info["dt"] = dataset.dt
    info["t_span"] = dataset.t_span
    return info


def _snapshot(model) -> dict:
    return {
        "params": {k: p.data.copy() for k, p in model.named_parameters()},
        "buffers": {k: b.copy() for k, b in model.named_buffers()},
    }


def _restore(model, state: dict):
    for k, p in model.named_parameters():
        p.data = state["params"][k].copy()
    for k, b in model.named_buffers():
        b[...] = state["buffers"][k]
