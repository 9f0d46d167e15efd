"""Synthetic ground truth: random coefficient fields, finite-difference
solvers for 2D diffusion and advection-diffusion, per-pixel normalization,
(L, K) window bundling, masks and factor-2 resampling.

Solvers integrate in float64 on the unit square with node coordinates
x_i = i*dx; trajectories are thinned to the data timestep by the dataset
builder. The diffusion update is in conservative flux form, advection is
first-order upwind written as a convex combination so a unit CFL step is an
exact grid shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import resize_bilinear
from .tensorio import load_tensor, read_json, save_tensor, write_json

STD_FLOOR = 1e-6


@dataclass
class CoefficientField:
    """Strictly positive diffusivity field on the solver grid."""

    values: np.ndarray        # (H, W)
    length_scale: float
    seed: int

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise ValueError("coefficient field must be strictly positive")


@dataclass
class Trajectory:
    u: np.ndarray             # (T, H, W)
    dt: float
    dx: float
    dy: float
    coeff: np.ndarray         # (H, W) raw diffusivity values
    scalar_param: float | None = None
    bc: str = "periodic"

    @property
    def t_span(self) -> float:
        return (self.u.shape[0] - 1) * self.dt


@dataclass
class BundleSample:
    """One training window in raw physical units."""

    U_hist: np.ndarray        # (L, H, W)
    v: np.ndarray             # (Cv, H, W)
    grid: np.ndarray          # (3, H, W) normalized (t, x, y)
    U_fut: np.ndarray         # (K, H, W)
    mask: np.ndarray          # (H, W) in {0, 1}
    t0: float


@dataclass
class NormStats:
    """Per-pixel z-score statistics fitted on the training split."""

    mean: np.ndarray          # (H, W)
    std: np.ndarray           # (H, W), floored at STD_FLOOR


# ---------------------------------------------------------------------------
# random fields

def grf_sample(h: int, w: int, length_scale: float, kappa_min: float,
               kappa_max: float, seed: int) -> CoefficientField:
    """Smooth periodic random field mapped affinely into [kappa_min, kappa_max].

    Spectral synthesis: white noise filtered by a Gaussian transfer function
    exp(-|k|^2 l^2 / 4), which gives covariance exp(-r^2 / (2 l^2)).
    """
    if not kappa_max > kappa_min > 0:
        raise ValueError("need kappa_max > kappa_min > 0")
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(h, w))
    kx = 2.0 * np.pi * np.fft.fftfreq(h, d=1.0 / h)
    ky = 2.0 * np.pi * np.fft.fftfreq(w, d=1.0 / w)
    k2 = kx[:, None] ** 2 + ky[None, :] ** 2
    filt = np.exp(-k2 * length_scale**2 / 4.0)
    f = np.fft.ifft2(np.fft.fft2(noise) * filt).real
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        vals = np.full((h, w), 0.5 * (kappa_min + kappa_max))
    else:
        vals = kappa_min + (f - lo) * ((kappa_max - kappa_min) / (hi - lo))
    return CoefficientField(values=vals, length_scale=length_scale, seed=seed)


# ---------------------------------------------------------------------------
# solvers

def _coeff_values(coeff) -> np.ndarray:
    return coeff.values if isinstance(coeff, CoefficientField) else np.asarray(coeff, dtype=np.float64)


def heat_stability_limit(kappa_max: float, dx: float, dy: float) -> float:
    return dx**2 * dy**2 / (2.0 * kappa_max * (dx**2 + dy**2))


def _diffusion_increment(u, kap, dx, dy, bc):
    """dt-free conservative flux divergence of kappa * grad(u)."""
    if bc == "periodic":
        u_xp, u_xm = np.roll(u, -1, 0), np.roll(u, 1, 0)
        u_yp, u_ym = np.roll(u, -1, 1), np.roll(u, 1, 1)
        k_xp, k_xm = np.roll(kap, -1, 0), np.roll(kap, 1, 0)
        k_yp, k_ym = np.roll(kap, -1, 1), np.roll(kap, 1, 1)
    else:  # dirichlet_zero: ghost u = 0, ghost kappa mirrors the edge
        u_xp = np.vstack([u[1:], np.zeros((1, u.shape[1]))])
        u_xm = np.vstack([np.zeros((1, u.shape[1])), u[:-1]])
        u_yp = np.hstack([u[:, 1:], np.zeros((u.shape[0], 1))])
        u_ym = np.hstack([np.zeros((u.shape[0], 1)), u[:, :-1]])
        k_xp = np.vstack([kap[1:], kap[-1:]])
        k_xm = np.vstack([kap[:1], kap[:-1]])
        k_yp = np.hstack([kap[:, 1:], kap[:, -1:]])
        k_ym = np.hstack([kap[:, :1], kap[:, :-1]])
    fx_p = 0.5 * (kap + k_xp) * (u_xp - u)
    fx_m = 0.5 * (kap + k_xm) * (u - u_xm)
    fy_p = 0.5 * (kap + k_yp) * (u_yp - u)
    fy_m = 0.5 * (kap + k_ym) * (u - u_ym)
    return (fx_p - fx_m) / dx**2 + (fy_p - fy_m) / dy**2


def solve_heat2d(u0: np.ndarray, coeff, dt: float, steps: int, bc: str = "periodic") -> Trajectory:
    """Explicit diffusion u_t = div(kappa grad u); rejects unstable dt."""
    if bc not in ("periodic", "dirichlet_zero"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    u0 = np.asarray(u0, dtype=np.float64)
    h, w = u0.shape
    dx, dy = 1.0 / h, 1.0 / w
    kap = _coeff_values(coeff)
    kmax = float(kap.max())
    if kmax > 0:
        limit = heat_stability_limit(kmax, dx, dy)
        if dt > limit * (1.0 + 1e-9):
            raise ValueError(f"unstable timestep: dt={dt} exceeds stability limit {limit:.3e}")
    u = u0.copy()
    out = np.empty((steps + 1, h, w), dtype=np.float64)
    out[0] = u
    for n in range(steps):
        u = u + dt * _diffusion_increment(u, kap, dx, dy, bc)
        out[n + 1] = u
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("solver produced non-finite values")
    return Trajectory(u=out, dt=dt, dx=dx, dy=dy,
                      coeff=kap if not isinstance(coeff, CoefficientField) else coeff.values, bc=bc)


def solve_advdiff2d(u0: np.ndarray, coeff, velocity: tuple[float, float],
                    dt: float, steps: int) -> Trajectory:
    """Periodic upwind advection plus conservative diffusion.

    Stability needs dt*(|vx|/dx + |vy|/dy) plus the diffusion contribution
    bounded by 1; at exactly unit advection CFL the update degenerates to a
    grid shift.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    h, w = u0.shape
    dx, dy = 1.0 / h, 1.0 / w
    vx, vy = float(velocity[0]), float(velocity[1])
    kap = _coeff_values(coeff)
    kmax = float(kap.max())
    cx = abs(vx) * dt / dx
    cy = abs(vy) * dt / dy
    # the scheme is operator-split, so each substep carries its own bound:
    # the upwind convex combination needs cx + cy <= 1, the explicit
    # diffusion substep the usual heat limit
    if cx + cy > 1.0 + 1e-9:
        raise ValueError(f"unstable timestep: advective CFL {cx + cy:.4f} exceeds 1")
    if kmax > 0 and dt > heat_stability_limit(kmax, dx, dy) * (1.0 + 1e-9):
        raise ValueError(
            f"unstable timestep: dt={dt} exceeds diffusion limit {heat_stability_limit(kmax, dx, dy):.3e}")
    roll_x = 1 if vx >= 0 else -1
    roll_y = 1 if vy >= 0 else -1
    u = u0.copy()
    out = np.empty((steps + 1, h, w), dtype=np.float64)
    out[0] = u
    for n in range(steps):
        if cx or cy:
            u = (1.0 - cx - cy) * u + cx * np.roll(u, roll_x, 0) + cy * np.roll(u, roll_y, 1)
        if kmax > 0:
            u = u + dt * _diffusion_increment(u, kap, dx, dy, "periodic")
        out[n + 1] = u
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("solver produced non-finite values")
    return Trajectory(u=out, dt=dt, dx=dx, dy=dy,
                      coeff=kap if not isinstance(coeff, CoefficientField) else coeff.values,
                      scalar_param=float(np.hypot(vx, vy)))


def thin_trajectory(traj: Trajectory, every: int) -> Trajectory:
    """Keep every n-th snapshot; the data timestep becomes n * solver dt."""
    return Trajectory(u=traj.u[::every].copy(), dt=traj.dt * every, dx=traj.dx, dy=traj.dy,
                      coeff=traj.coeff, scalar_param=traj.scalar_param, bc=traj.bc)


# ---------------------------------------------------------------------------
# normalization

def znorm_fit(train_trajectories) -> NormStats:
    stacked = np.concatenate([np.asarray(t.u, dtype=np.float64) for t in train_trajectories], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def znorm_apply(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (x - stats.mean) / stats.std


def znorm_invert(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return x * stats.std + stats.mean


# ---------------------------------------------------------------------------
# bundling, masks, resampling

def normalized_grid(h: int, w: int, t_norm: float) -> np.ndarray:
    """(3,H,W) channels: constant normalized time, then x and y in [-1, 1)."""
    g = np.empty((3, h, w), dtype=np.float64)
    g[0] = t_norm
    g[1] = (2.0 * np.arange(h) / h - 1.0)[:, None]
    g[2] = (2.0 * np.arange(w) / w - 1.0)[None, :]
    return g


def make_bundles(traj: Trajectory, L: int, K: int, stride: int,
                 mask: np.ndarray | None = None,
                 t_span: float | None = None,
                 v_channels: np.ndarray | None = None,
                 t_lo: int = 0, t_hi: int | None = None) -> list[BundleSample]:
    """Slice a trajectory into history/future windows.

    The history is the L consecutive snapshots ending at t0 inclusive; the
    future is the K snapshots after t0. Window starts advance by stride.
    t_lo/t_hi bound the snapshot indices considered (t_hi exclusive).
    """
    u = traj.u
    t_count = u.shape[0] if t_hi is None else min(t_hi, u.shape[0])
    usable = t_count - t_lo
    if usable < L + K:
        raise ValueError(f"trajectory window too short: {usable} snapshots, need at least {L + K}")
    h, w = u.shape[1:]
    if mask is None:
        mask = np.ones((h, w), dtype=np.float64)
    if t_span is None:
        t_span = traj.t_span
    if v_channels is None:
        v_channels = traj.coeff[None]
    count = (usable - L - K) // stride + 1
    out = []
    for i in range(count):
        start = t_lo + i * stride
        t0_idx = start + L - 1
        t0 = t0_idx * traj.dt
        grid = normalized_grid(h, w, 2.0 * t0 / t_span - 1.0)
        out.append(BundleSample(
            U_hist=u[start : start + L].copy(),
            v=np.asarray(v_channels, dtype=np.float64).copy(),
            grid=grid,
            U_fut=u[t0_idx + 1 : t0_idx + 1 + K].copy(),
            mask=mask,
            t0=t0,
        ))
    return out


def make_mask(h: int, w: int, kind: str = "full", fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    if kind == "full":
        return np.ones((h, w), dtype=np.float64)
    if kind == "half_domain":
        m = np.zeros((h, w), dtype=np.float64)
        m[:, : w // 2] = 1.0
        return m
    if kind == "random_holes":
        if not 0.0 <= fraction <= 0.5:
            raise ValueError("hole fraction must be in [0, 0.5]")
        rng = np.random.default_rng(seed)
        n_holes = int(round(fraction * h * w))
        m = np.ones(h * w, dtype=np.float64)
        holes = rng.choice(h * w, size=n_holes, replace=False)
        m[holes] = 0.0
        return m.reshape(h, w)
    raise ValueError(f"unknown mask kind {kind!r}")


def block_mean_2x(field: np.ndarray) -> np.ndarray:
    """2x2 block mean of a (..., H, W) array with even extents."""
    h, w = field.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"block mean needs even extents, got {h}x{w}")
    shaped = field.reshape(field.shape[:-2] + (h // 2, 2, w // 2, 2))
    return shaped.mean(axis=(-3, -1))


def resample_grid(traj: Trajectory, factor: str) -> Trajectory:
    """Factor-2 resampling: '2-down' is a 2x2 block mean, '2-up' is bilinear."""
    if factor == "2-down":
        u = block_mean_2x(traj.u)
        coeff = block_mean_2x(traj.coeff)
        scale = 2.0
    elif factor == "2-up":
        t, h, w = traj.u.shape
        u = resize_bilinear(traj.u, 2 * h, 2 * w)
        coeff = resize_bilinear(traj.coeff, 2 * h, 2 * w)
        scale = 0.5
    else:
        raise ValueError(f"unknown resample factor {factor!r}, expected '2-up' or '2-down'")
    return Trajectory(u=u, dt=traj.dt, dx=traj.dx * scale, dy=traj.dy * scale,
                      coeff=coeff, scalar_param=traj.scalar_param, bc=traj.bc)


# ---------------------------------------------------------------------------
# dataset: generation, storage, batching

DEFAULT_DATASET = {
    "kind": "heat",
    "H": 32,
    "W": 32,
    "T": 64,
    "n_train": 200,
    "n_val": 20,
    "n_test": 20,
    "dt_solver": 0.025,
    "snapshot_every": 10,
    "kappa_min": 1e-3,
    "kappa_max": 4e-3,
    "kappa_length_scale": 0.25,
    "ic_min": 0.2,
    "ic_max": 1.2,
    "ic_length_scale": 0.2,
    "bc": "periodic",
    "mask": {"kind": "full", "fraction": 0.1, "seed": 0},
    "train_time_fraction": 0.5,
    "velocities": None,
    "velocity_angle_deg": 30.0,
    "solver_supersample": 1,
    "obs_noise_sigma": 0.0,
    "seed": 0,
}


def _dataset_config(overrides: dict | None) -> dict:
    cfg = dict(DEFAULT_DATASET)
    if overrides:
        unknown = set(overrides) - set(cfg)
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        cfg.update(overrides)
    if cfg["kind"] not in ("heat", "advdiff"):
        raise ValueError(f"unknown dataset kind {cfg['kind']!r}")
    if cfg["kind"] == "advdiff" and not cfg["velocities"]:
        cfg["velocities"] = {"train": [1.0], "val": [1.0], "test": [1.0]}
    return cfg


def _simulate_one(cfg: dict, coeff_seed: int, ic_seed: int, velocity: float | None,
                  noise_seed: int = 0) -> Trajectory:
    ss = int(cfg["solver_supersample"])
    h, w, t_snap = cfg["H"] * ss, cfg["W"] * ss, cfg["T"]
    coeff = grf_sample(h, w, cfg["kappa_length_scale"], cfg["kappa_min"], cfg["kappa_max"], coeff_seed)
    ic = grf_sample(h, w, cfg["ic_length_scale"], 1.0, 2.0, ic_seed)
    u0 = cfg["ic_min"] + (ic.values - 1.0) * (cfg["ic_max"] - cfg["ic_min"])
    steps = (t_snap - 1) * cfg["snapshot_every"]
    if cfg["kind"] == "heat":
        traj = solve_heat2d(u0, coeff, cfg["dt_solver"], steps, bc=cfg["bc"])
    else:
        ang = np.deg2rad(cfg["velocity_angle_deg"])
        vel = (velocity * np.cos(ang), velocity * np.sin(ang))
        traj = solve_advdiff2d(u0, coeff, vel, cfg["dt_solver"], steps)
        traj.scalar_param = velocity
    traj = thin_trajectory(traj, cfg["snapshot_every"])
    # ground truth may be integrated on a finer grid (less upwind smearing)
    # and block-averaged down to the dataset resolution
    for _ in range(ss.bit_length() - 1):
        traj = resample_grid(traj, "2-down")
    if cfg["obs_noise_sigma"] > 0:
        # observational noise on the stored snapshots, weather-station style;
        # the underlying solver fields stay exact
        rng = np.random.default_rng(noise_seed)
        traj.u = traj.u + rng.normal(0.0, cfg["obs_noise_sigma"], size=traj.u.shape)
    return traj


def generate_dataset(out_dir, overrides: dict | None = None, threads: int = 1) -> "Dataset":
    """Simulate, split, fit normalization on train only, and write to disk."""
    cfg = _dataset_config(overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"train": cfg["n_train"], "val": cfg["n_val"], "test": cfg["n_test"]}
    total = sum(counts.values())
    seed_rng = np.random.default_rng(cfg["seed"])
    traj_seeds = seed_rng.integers(0, 2**62, size=(total, 3))

    jobs = []
    idx = 0
    for split in ("train", "val", "test"):
        vels = (cfg["velocities"] or {}).get(split) if cfg["velocities"] else None
        for j in range(counts[split]):
            vel = vels[j % len(vels)] if vels else None
            jobs.append((split, idx, int(traj_seeds[idx, 0]), int(traj_seeds[idx, 1]),
                         int(traj_seeds[idx, 2]), vel))
            idx += 1

    def run(job):
        split, i, cs, ics, ns, vel = job
        return split, i, _simulate_one(cfg, cs, ics, vel, noise_seed=ns)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    trajectories = {"train": [], "val": [], "test": []}
    entries = {"train": [], "val": [], "test": []}
    for split, i, traj in sorted(results, key=lambda r: r[1]):
        save_tensor(out_dir / f"traj_{i:04d}.u.tnot", traj.u.astype(np.float32))
        save_tensor(out_dir / f"traj_{i:04d}.kappa.tnot", traj.coeff.astype(np.float32))
        entries[split].append({"id": i, "scalar_param": traj.scalar_param})
        trajectories[split].append(traj)

    mask = make_mask(cfg["H"], cfg["W"], **cfg["mask"])
    save_tensor(out_dir / "mask.tnot", mask)
    stats = znorm_fit(trajectories["train"])
    save_tensor(out_dir / "norm_mean.tnot", stats.mean)
    save_tensor(out_dir / "norm_std.tnot", stats.std)
    kappas = np.stack([t.coeff for t in trajectories["train"]])
    v_mean = float(kappas.mean())
    v_std = float(max(kappas.std(), STD_FLOOR))
    params = [t.scalar_param for t in trajectories["train"] if t.scalar_param is not None]
    dt_data = cfg["dt_solver"] * cfg["snapshot_every"]
    manifest = {
        "format": "tno-dataset-v1",
        "config": cfg,
        "dt": dt_data,
        "t_span": (cfg["T"] - 1) * dt_data,
        "splits": entries,
        "norm": {
            "mean_file": "norm_mean.tnot",
            "std_file": "norm_std.tnot",
            "v_mean": v_mean,
            "v_std": v_std,
            "param_min": min(params) if params else None,
            "param_max": max(params) if params else None,
        },
        "mask_file": "mask.tnot",
    }
    write_json(out_dir / "manifest.json", manifest)
    # reload from disk so generate-then-use and load-then-use see identical bits
    return load_dataset(out_dir)


def load_dataset(path) -> "Dataset":
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    cfg = manifest["config"]
    trajectories = {"train": [], "val": [], "test": []}
    for split, items in manifest["splits"].items():
        for item in items:
            u = load_tensor(path / f"traj_{item['id']:04d}.u.tnot").astype(np.float64)
            kap = load_tensor(path / f"traj_{item['id']:04d}.kappa.tnot").astype(np.float64)
            trajectories[split].append(Trajectory(
                u=u, dt=manifest["dt"], dx=1.0 / cfg["H"], dy=1.0 / cfg["W"],
                coeff=kap, scalar_param=item["scalar_param"], bc=cfg["bc"],
            ))
    mask = load_tensor(path / manifest["mask_file"]).astype(np.float64)
    stats = NormStats(
        mean=load_tensor(path / manifest["norm"]["mean_file"]).astype(np.float64),
        std=load_tensor(path / manifest["norm"]["std_file"]).astype(np.float64),
    )
    return Dataset(path, manifest, trajectories, mask, stats)


class Dataset:
    """In-memory view of a generated dataset with normalization helpers."""

    def __init__(self, path, manifest, trajectories, mask, stats):
        self.path = Path(path) if path is not None else None
        self.manifest = manifest
        self.trajectories = trajectories
        self.mask = mask
        self.stats = stats
        self.dt = manifest["dt"]
        self.t_span = manifest["t_span"]
        # times are normalized over the span the training windows cover, so a
        # tanh trunk saturates (rather than extrapolates) beyond it
        self.t_norm_span = self.t_span * manifest["config"]["train_time_fraction"]
        self.v_mean = manifest["norm"]["v_mean"]
        self.v_std = manifest["norm"]["v_std"]
        self.param_min = manifest["norm"]["param_min"]
        self.param_max = manifest["norm"]["param_max"]

    @property
    def has_param_channel(self) -> bool:
        return self.param_min is not None

    @property
    def input_channels(self) -> int:
        return 2 if self.has_param_channel else 1

    def norm_time(self, t: float):
        return 2.0 * t / self.t_norm_span - 1.0

    def norm_param(self, value: float) -> float:
        lo, hi = self.param_min, self.param_max
        if hi is None or hi == lo:
            return 0.0
        return 2.0 * (value - lo) / (hi - lo) - 1.0

    def v_channels(self, traj: Trajectory) -> np.ndarray:
        chans = [(traj.coeff - self.v_mean) / self.v_std]
        if self.has_param_channel:
            val = self.norm_param(traj.scalar_param if traj.scalar_param is not None else self.param_min)
            chans.append(np.full_like(traj.coeff, val))
        return np.stack(chans)

    def bundles(self, split: str, L: int, K: int, stride: int,
                t_lo: int = 0, t_hi: int | None = None) -> list[BundleSample]:
        out = []
        for traj in self.trajectories[split]:
            out.extend(make_bundles(
                traj, L, K, stride, mask=self.mask, t_span=self.t_norm_span,
                v_channels=self.v_channels(traj), t_lo=t_lo, t_hi=t_hi,
            ))
        return out

    def collate(self, samples: list[BundleSample], dtype=np.float32) -> dict:
        """Stack samples into normalized batch arrays; masked pixels zero-filled."""
        mask = np.stack([s.mask for s in samples]).astype(dtype)
        hist = np.stack([znorm_apply(s.U_hist, self.stats) for s in samples]).astype(dtype)
        hist *= mask[:, None]
        fut = np.stack([znorm_apply(s.U_fut, self.stats) for s in samples]).astype(dtype)
        v = np.stack([s.v for s in samples]).astype(dtype)
        grid = np.stack([s.grid for s in samples]).astype(dtype)
        t0 = np.array([s.t0 for s in samples], dtype=np.float64)
        return {"v": v, "hist": hist, "fut": fut, "grid": grid, "mask": mask, "t0": t0}

    def resampled(self, factor: str) -> "Dataset":
        """A derived dataset at half or double resolution (same normalization,
        resampled per the factor; masks are repeated/merged exactly)."""
        trajs = {k: [resample_grid(t, factor) for t in v] for k, v in self.trajectories.items()}
        h, w = self.stats.mean.shape
        if factor == "2-up":
            mask = np.kron(self.mask, np.ones((2, 2)))
            mean = resize_bilinear(self.stats.mean, 2 * h, 2 * w)
            std = np.maximum(resize_bilinear(self.stats.std, 2 * h, 2 * w), STD_FLOOR)
        else:
            mask = (block_mean_2x(self.mask) >= 0.999).astype(np.float64)
            mean = block_mean_2x(self.stats.mean)
            std = np.maximum(block_mean_2x(self.stats.std), STD_FLOOR)
        manifest = dict(self.manifest)
        return Dataset(None, manifest, trajs, mask, NormStats(mean=mean, std=std))
