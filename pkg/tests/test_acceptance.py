"""End-to-end acceptance checks with stated tolerances and runtime budgets.

Each criterion prints one PASS/FAIL line (run with -s to see them inline).
The training-based checks share module-scoped fixtures; everything is seeded
and single-process.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import check_grads
from tno import nn
from tno.cli import main as cli_main
from tno.data import (generate_dataset, grf_sample, heat_stability_limit, load_dataset,
                      solve_advdiff2d, solve_heat2d)
from tno.model import TNOConfig, TNOModel
from tno.tensor import Tape, Tensor, backward, masked_mse, tsum
from tno.training import TrainPlan, train_run
from tno.evaluation import error_accumulation_curve, extrapolation_start, super_resolution_eval

from test_nn import adaptive_pool_ref, bilinear_ref, conv2d_ref, conv_transpose2d_ref


def report(name: str, ok: bool, detail: str):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def _full_model_loss(model, arrays):
    v, uh, grid, target, mask = arrays
    with Tape() as tape:
        out = model(Tensor(v, dtype="f64"), Tensor(uh, dtype="f64"), Tensor(grid, dtype="f64"))
        loss = masked_mse(out, Tensor(target, dtype="f64"), Tensor(mask, dtype="f64"))
    return loss, tape


def _fd_param(model, arrays, param, idx, h=1e-5):
    flat = param.data.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    up, _ = _full_model_loss(model, arrays)
    flat[idx] = orig - h
    down, _ = _full_model_loss(model, arrays)
    flat[idx] = orig
    return (up.item() - down.item()) / (2.0 * h)


def test_acceptance_gradient_correctness():
    start = time.perf_counter()
    # per-layer checks over 20 seeds on small inputs
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2,))
        check_grads(lambda ts: tsum(nn.conv2d(ts[0], ts[1], ts[2], 2, 1)
                                    * nn.conv2d(ts[0], ts[1], ts[2], 2, 1)), [x, w, b])
        wt = rng.normal(size=(2, 2, 4, 4))
        bt = rng.normal(size=(2,))
        check_grads(lambda ts: tsum(nn.conv_transpose2d(ts[0], ts[1], ts[2], 2, 1)
                                    * nn.conv_transpose2d(ts[0], ts[1], ts[2], 2, 1)), [x, wt, bt])
        gamma = rng.normal(size=(2,)) + 1.5
        beta = rng.normal(size=(2,))
        check_grads(lambda ts: tsum(nn.batch_norm2d(ts[0], ts[1], ts[2], np.zeros(2), np.ones(2),
                                                    training=True)
                                    * nn.batch_norm2d(ts[0], ts[1], ts[2], np.zeros(2), np.ones(2),
                                                      training=True)), [x, gamma, beta])
        check_grads(lambda ts: tsum(nn.adaptive_avg_pool2d(ts[0], 3)
                                    * nn.adaptive_avg_pool2d(ts[0], 3)), [x])
        check_grads(lambda ts: tsum(nn.bilinear_upsample2d(ts[0], 6, 7)
                                    * nn.bilinear_upsample2d(ts[0], 6, 7)), [x])
        for kind in ("silu", "tanh", "sigmoid"):
            check_grads(lambda ts, k=kind: tsum(nn.activation(ts[0], k)
                                                * nn.activation(ts[0], k)), [x])

    # full TNO on a 4x4 grid in f64: every parameter on seed 0, random
    # coordinates on the remaining seeds
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        cfg = TNOConfig(L=1, K=2, p=2, S=8, unet_base_channels=1, trunk_hidden=[8],
                        decoder_hidden=[4], input_channels=1, dtype="f64")
        model = TNOModel(cfg, init_seed=seed)
        model.train()
        mask = np.ones((2, 2, 4, 4))
        mask[0, 0, 1, 2] = 0.0
        arrays = [rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4)),
                  rng.uniform(-1, 1, size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 4, 4)), mask]
        loss, tape = _full_model_loss(model, arrays)
        backward(loss, tape)
        grads = {name: p.grad.copy() for name, p in model.named_parameters()}
        for name, p in model.named_parameters():
            size = p.data.size
            idxs = range(size) if seed == 0 else rng.choice(size, size=min(2, size), replace=False)
            for idx in idxs:
                num = _fd_param(model, arrays, p, int(idx))
                ana = grads[name].reshape(-1)[int(idx)]
                err = abs(ana - num) / max(abs(num), abs(ana), 1e-3)
                worst = max(worst, err)
                assert err < 1e-4, f"{name}[{idx}]: analytic {ana:.3e} vs numeric {num:.3e}"
        model.zero_grad()
    elapsed = time.perf_counter() - start
    report("gradient-correctness", elapsed < 60.0,
           f"worst full-model rel err {worst:.2e} <= 1e-4, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# criterion 2: kernel oracles


def _norm_rel(got, ref):
    scale = np.abs(ref).max()
    return float(np.abs(got - ref).max() / (scale if scale > 0 else 1.0))


def test_acceptance_kernel_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {"conv2d": 0.0, "conv_transpose2d": 0.0, "pool": 0.0, "bilinear": 0.0}
    checked = 0
    while checked < 50:
        bs = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 4]))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        h = int(rng.integers(4, 10))
        w = int(rng.integers(4, 10))
        if h + 2 * p < k or w + 2 * p < k or (h - 1) * s - 2 * p + k < 1:
            continue
        x = rng.normal(size=(bs, cin, h, w)).astype(np.float32)
        wc = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
        wt = rng.normal(size=(cin, cout, k, k)).astype(np.float32)
        b = rng.normal(size=(cout,)).astype(np.float32)
        got = nn.conv2d(Tensor(x), Tensor(wc), Tensor(b), s, p).data
        ref = conv2d_ref(x.astype(np.float64), wc.astype(np.float64), b.astype(np.float64), s, p)
        worst["conv2d"] = max(worst["conv2d"], _norm_rel(got, ref))
        got = nn.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), s, p).data
        ref = conv_transpose2d_ref(x.astype(np.float64), wt.astype(np.float64),
                                   b.astype(np.float64), s, p)
        worst["conv_transpose2d"] = max(worst["conv_transpose2d"], _norm_rel(got, ref))
        pool_s = int(rng.integers(1, 9))
        got = nn.adaptive_avg_pool2d(Tensor(x), pool_s).data
        worst["pool"] = max(worst["pool"], _norm_rel(got, adaptive_pool_ref(x.astype(np.float64), pool_s)))
        ho, wo = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        got = nn.bilinear_upsample2d(Tensor(x), ho, wo).data
        worst["bilinear"] = max(worst["bilinear"], _norm_rel(got, bilinear_ref(x.astype(np.float64), ho, wo)))
        checked += 1
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-6 for v in worst.values()) and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("kernel-oracles", ok, f"50 shapes each, worst rel: {detail}; {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# criterion 3: solver physics


def test_acceptance_solver_physics():
    start = time.perf_counter()
    # mass conservation with heterogeneous diffusivity
    rng = np.random.default_rng(0)
    u0 = rng.normal(size=(32, 32)) + 2.0
    kap = grf_sample(32, 32, 0.25, 1e-3, 4e-3, seed=1).values
    dt = 0.5 * heat_stability_limit(kap.max(), 1 / 32, 1 / 32)
    traj = solve_heat2d(u0, kap, dt, 100)
    sums = traj.u.sum(axis=(1, 2))
    drift = float((np.abs(np.diff(sums)) / np.abs(sums[:-1])).max())

    # analytic single-mode decay at the half-amplitude time
    h, kappa = 64, 2e-3
    xs = np.arange(h) / h
    mode = np.sin(2 * np.pi * xs)[:, None] * np.sin(2 * np.pi * xs)[None, :]
    dt2 = 0.2 * heat_stability_limit(kappa, 1 / h, 1 / h)
    t_half = np.log(2.0) / (8 * np.pi**2 * kappa)
    steps = int(round(t_half / dt2))
    traj2 = solve_heat2d(mode, np.full((h, h), kappa), dt2, steps)
    amp = traj2.u[-1][h // 4, h // 4]
    expected = np.exp(-8 * np.pi**2 * kappa * steps * dt2)
    decay_err = abs(amp - expected) / expected

    # unit-CFL advection is an exact grid shift
    u0s = rng.normal(size=(16, 16))
    v = 2.0
    traj3 = solve_advdiff2d(u0s, np.zeros((16, 16)), (v, 0.0), (1 / 16) / v, 8)
    shift_exact = all(np.array_equal(traj3.u[n], np.roll(u0s, n, axis=0)) for n in range(9))

    # advection-diffusion conservation
    traj4 = solve_advdiff2d(u0, kap, (0.5, 0.25), min(dt, 0.004), 100)
    sums4 = traj4.u.sum(axis=(1, 2))
    drift4 = float((np.abs(np.diff(sums4)) / np.abs(sums4[:-1])).max())

    elapsed = time.perf_counter() - start
    ok = drift < 1e-10 and drift4 < 1e-10 and decay_err < 0.01 and shift_exact and elapsed < 60.0
    report("solver-physics", ok,
           f"mass drift {drift:.1e}/{drift4:.1e} < 1e-10, decay err {decay_err:.3%} < 1%, "
           f"CFL=1 shift exact: {shift_exact}; {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# criteria 4, 6, 7: convergence, super-resolution, rollout stability


CONV_DATASET = {"n_train": 48, "n_val": 8, "n_test": 8, "T": 64, "seed": 0}
CONV_PLAN = dict(tf_epochs=15, ft_epochs=7, batch_size=16, lr0=1e-3, weight_decay=1e-3)


@pytest.fixture(scope="module")
def convergence_runs(tmp_path_factory):
    path = tmp_path_factory.mktemp("accept") / "heat48"
    generate_dataset(path, CONV_DATASET)
    dataset = load_dataset(path)
    config = TNOConfig(L=1, K=4, p=20, S=16, unet_base_channels=32)
    t_lo = extrapolation_start(dataset)
    runs = []
    start = time.perf_counter()
    for seed in (0, 1, 2):
        model, _, _ = train_run(TrainPlan(seed=seed, **CONV_PLAN), config, dataset,
                                restore_best=True)
        table = error_accumulation_curve(model, dataset, n_windows=2, t_lo=t_lo,
                                         run_id=f"full-seed{seed}")
        rels = [r["rel_l2"] for r in table.rows]
        runs.append({"seed": seed, "model": model, "rel_l2": float(np.mean(rels)),
                     "per_lead": rels})
    elapsed = time.perf_counter() - start
    return {"dataset": dataset, "runs": runs, "seconds": elapsed, "t_lo": t_lo}


def test_acceptance_convergence(convergence_runs):
    rels = sorted(r["rel_l2"] for r in convergence_runs["runs"])
    median = rels[1]
    elapsed = convergence_runs["seconds"]
    ok = median <= 0.10 and elapsed <= 600.0
    report("convergence", ok,
           f"median extrapolation rel_l2 {median:.4f} <= 0.10 over seeds "
           f"{[f'{r:.4f}' for r in rels]}; {elapsed:.0f}s <= 600s")


def _median_run(convergence_runs):
    runs = sorted(convergence_runs["runs"], key=lambda r: r["rel_l2"])
    return runs[1]


def test_acceptance_super_resolution(convergence_runs):
    start = time.perf_counter()
    run = _median_run(convergence_runs)
    dataset = convergence_runs["dataset"]
    fine = dataset.resampled("2-up")
    table = super_resolution_eval(run["model"], fine, n_windows=2,
                                  t_lo=convergence_runs["t_lo"], run_id="sr")
    fine_rel = float(np.mean([r["rel_l2"] for r in table.rows]))
    ratio = fine_rel / run["rel_l2"]
    elapsed = time.perf_counter() - start
    ok = ratio <= 1.25 and elapsed < 120.0
    report("zero-shot-super-resolution", ok,
           f"64x64 rel_l2 {fine_rel:.4f} vs 32x32 {run['rel_l2']:.4f}, ratio {ratio:.3f} <= 1.25; "
           f"{elapsed:.0f}s < 120s")


def test_acceptance_rollout_stability(convergence_runs):
    run = _median_run(convergence_runs)
    first, last = run["per_lead"][0], run["per_lead"][-1]
    ratio = last / first
    report("rollout-stability", ratio < 3.0,
           f"last-snapshot rel_l2 {last:.4f} vs first {first:.4f}, ratio {ratio:.2f} < 3")


# ---------------------------------------------------------------------------
# criterion 5: ablation ordering


ABLATION_DATASET = {
    "kind": "advdiff", "n_train": 24, "n_val": 4, "n_test": 8, "T": 64,
    "H": 32, "W": 32, "dt_solver": 0.0227, "snapshot_every": 11,
    "velocity_angle_deg": 0.0, "solver_supersample": 2,
    "kappa_min": 2e-4, "kappa_max": 1e-3, "ic_length_scale": 0.35,
    "obs_noise_sigma": 0.10,
    "velocities": {"train": [0.15, 0.28], "val": [0.215], "test": [0.215]}, "seed": 2,
}
ABLATION_PLAN = dict(tf_epochs=30, ft_epochs=15, batch_size=8, lr0=2e-3)
ABLATION_VARIANTS = ("no_tbranch", "no_unet", "one_step", "deeponet_onestep",
                     "deeponet_multistep")


def test_acceptance_ablation_ordering(tmp_path_factory):
    from tno.evaluation import ablation_suite

    start = time.perf_counter()
    path = tmp_path_factory.mktemp("accept_abl") / "advdiff"
    generate_dataset(path, ABLATION_DATASET)
    dataset = load_dataset(path)
    base = TNOConfig(L=1, K=4, p=16, S=16, unet_base_channels=16, input_channels=2)
    coarse_res = dataset.mask.shape[0]
    scores = {v: [] for v in ("full",) + ABLATION_VARIANTS}
    fine_ratios = {v: [] for v in scores}
    for seed in range(5):
        plan = TrainPlan(seed=seed, **ABLATION_PLAN)
        table = ablation_suite(dataset, base, plan, variants=tuple(scores),
                               n_windows=2, include_fine=True)
        assert not table.metadata["failures"], table.metadata["failures"]
        for variant in scores:
            coarse = table.mean_over("rel_l2", {"variant": variant, "resolution": coarse_res})
            fine = table.mean_over("rel_l2", {"variant": variant, "resolution": 2 * coarse_res})
            scores[variant].append(coarse)
            fine_ratios[variant].append(fine / coarse)
    full = np.array(scores["full"])
    wins = {v: int((full <= np.array(scores[v])).sum()) for v in ABLATION_VARIANTS}
    tb_ratio = float(np.mean(np.array(scores["no_tbranch"]) / full))
    elapsed = time.perf_counter() - start
    print("\nfine/coarse degradation ratios per variant (mean over seeds):")
    for variant, ratios in fine_ratios.items():
        print(f"  {variant:22s} {np.mean(ratios):.3f}")
    ok = all(w >= 4 for w in wins.values()) and tb_ratio >= 1.3 and elapsed <= 3600.0
    detail = ", ".join(f"{v}:{w}/5" for v, w in wins.items())
    report("ablation-ordering", ok,
           f"full wins {detail}; no_tbranch/full ratio {tb_ratio:.2f} >= 1.3; "
           f"{elapsed:.0f}s <= 3600s")


# ---------------------------------------------------------------------------
# criterion 8: determinism of the CLI train path


def _digest_tree(root: Path) -> dict:
    out = {}
    for f in sorted(root.rglob("*")):
        if f.is_file():
            out[str(f.relative_to(root))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_acceptance_determinism(tmp_path):
    cfg = {
        "seed": 3,
        "dataset": {"H": 16, "W": 16, "T": 16, "n_train": 4, "n_val": 2, "n_test": 2, "seed": 9},
        "model": {"L": 1, "K": 2, "p": 4, "S": 8, "unet_base_channels": 2, "trunk_hidden": [8]},
        "train": {"tf_epochs": 2, "ft_epochs": 1, "batch_size": 4},
    }
    digests = []
    for attempt in ("a", "b"):
        out = tmp_path / attempt
        cfg_path = tmp_path / f"cfg_{attempt}.json"
        cfg_path.write_text(json.dumps(dict(cfg, out_dir=str(out))))
        assert cli_main(["generate", "--config", str(cfg_path)]) == 0
        assert cli_main(["train", "--config", str(cfg_path)]) == 0
        assert cli_main(["eval", "--config", str(cfg_path)]) == 0
        tree = {}
        for sub in ("checkpoint_best", "checkpoint_final"):
            tree.update({f"{sub}/{k}": v for k, v in _digest_tree(out / sub).items()})
        tree["metrics.csv"] = hashlib.sha256((out / "metrics.csv").read_bytes()).hexdigest()
        digests.append(tree)
    ok = digests[0] == digests[1]
    report("determinism", ok,
           f"{len(digests[0])} files byte-identical across reruns" if ok else "digest mismatch")
