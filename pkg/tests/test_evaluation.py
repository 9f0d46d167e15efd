"""Metrics against reduction oracles, rollout curves, the ablation runner."""

import numpy as np
import pytest

import tno.evaluation as ev
from tno.data import generate_dataset, load_dataset
from tno.evaluation import (CSV_HEADER, MetricsTable, ablation_suite, error_accumulation_curve,
                            extrapolation_start, mae, region_mae, relative_l2, rmse,
                            super_resolution_eval, support_region)
from tno.model import TNOConfig, TNOModel, VARIANTS
from tno.training import TrainPlan


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("eval_ds") / "heat"
    generate_dataset(path, {"n_train": 4, "n_val": 2, "n_test": 3, "T": 24,
                            "H": 16, "W": 16, "seed": 31})
    return load_dataset(path)


def rand_pair(seed=0, shape=(6, 6)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape), rng.normal(size=shape)


class TestPointMetrics:
    def test_zero_for_perfect_prediction(self):
        x, _ = rand_pair()
        m = np.ones_like(x)
        assert mae(x, x, m) == 0.0
        assert rmse(x, x, m) == 0.0
        assert relative_l2(x, x + 0.0, m) == 0.0

    def test_constant_offset(self):
        x, _ = rand_pair(1)
        m = np.ones_like(x)
        assert np.isclose(mae(x + 0.5, x, m), 0.5)
        assert np.isclose(rmse(x + 0.5, x, m), 0.5)

    def test_scaled_target_relative_error(self):
        x, _ = rand_pair(2)
        x = x + 3.0
        m = np.ones_like(x)
        eps = 0.01
        assert np.isclose(relative_l2((1 + eps) * x, x, m), eps)

    def test_matches_direct_reduction(self):
        pred, target = rand_pair(3)
        mask = (np.random.default_rng(4).uniform(size=pred.shape) > 0.3).astype(float)
        sel = mask == 1
        assert abs(mae(pred, target, mask) - np.abs(pred - target)[sel].mean()) < 1e-7
        assert abs(rmse(pred, target, mask) - np.sqrt(((pred - target)[sel] ** 2).mean())) < 1e-7
        ref = np.linalg.norm((pred - target)[sel]) / np.linalg.norm(target[sel])
        assert abs(relative_l2(pred, target, mask) - ref) < 1e-7

    def test_mae_never_exceeds_rmse(self):
        for seed in range(10):
            pred, target = rand_pair(seed)
            mask = (np.random.default_rng(seed + 100).uniform(size=pred.shape) > 0.2).astype(float)
            assert mae(pred, target, mask) <= rmse(pred, target, mask) + 1e-12

    def test_empty_mask_rejected(self):
        x, y = rand_pair(5)
        with pytest.raises(ValueError):
            mae(x, y, np.zeros_like(x))

    def test_zero_norm_target_rejected(self):
        x, _ = rand_pair(6)
        with pytest.raises(ValueError):
            relative_l2(x, np.zeros_like(x), np.ones_like(x))

    def test_scale_invariance_exact_for_power_of_two(self):
        pred, target = rand_pair(7)
        target = target + 2.0
        m = np.ones_like(pred)
        assert relative_l2(4.0 * pred, 4.0 * target, m) == relative_l2(pred, target, m)

    def test_scale_invariance_close_for_general_scale(self):
        pred, target = rand_pair(8)
        target = target + 2.0
        m = np.ones_like(pred)
        a = relative_l2(3.7 * pred, 3.7 * target, m)
        b = relative_l2(pred, target, m)
        assert np.isclose(a, b, rtol=1e-12)


class TestRegionMae:
    def test_full_region_equals_mae(self):
        pred, target = rand_pair(9)
        m = np.ones_like(pred)
        assert region_mae(pred, target, m) == mae(pred, target, m)

    def test_restriction_semantics(self):
        target = np.zeros((4, 4))
        target[1:3, 1:3] = 1.0
        pred = target.copy()
        pred[0, 0] = 99.0  # wrong outside the region only
        region = support_region(target, 0.01)
        assert region_mae(pred, target, region) == 0.0

    def test_support_threshold_matches_brute_filter(self):
        rng = np.random.default_rng(10)
        target = rng.normal(size=(8, 8)) * (rng.uniform(size=(8, 8)) > 0.5)
        pred = target + rng.normal(size=(8, 8)) * 0.1
        region = support_region(target, 0.01)
        sel = np.abs(target) > 0.01
        assert np.array_equal(region == 1, sel)
        assert np.isclose(region_mae(pred, target, region), np.abs(pred - target)[sel].mean())


class TestMetricsTable:
    def fill(self, table, n=4):
        for j in range(n):
            table.add_row("run", "full", 32, j, 0.25 * (j + 1), 0.1 + j, 0.2 + j, 0.05)

    def test_csv_header_exact(self, tmp_path):
        t = MetricsTable()
        self.fill(t)
        t.write_csv(tmp_path / "m.csv")
        first = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert first == "run_id,variant,resolution,snapshot_index,lead_time,mae,rmse,rel_l2"
        assert CSV_HEADER == first.split(",")

    def test_roundtrip(self, tmp_path):
        t = MetricsTable()
        self.fill(t)
        t.write_csv(tmp_path / "m.csv")
        back = MetricsTable.read_csv(tmp_path / "m.csv")
        assert back.rows == t.rows

    def test_negative_metric_rejected(self):
        t = MetricsTable()
        with pytest.raises(ValueError):
            t.add_row("r", "full", 32, 0, 0.25, -1.0, 0.1, 0.1)

    def test_mae_above_rmse_rejected(self):
        t = MetricsTable()
        with pytest.raises(ValueError):
            t.add_row("r", "full", 32, 0, 0.25, 0.5, 0.2, 0.1)

    def test_write_deterministic(self, tmp_path):
        t = MetricsTable()
        self.fill(t)
        t.write_csv(tmp_path / "a.csv")
        t.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestCurves:
    def make_model(self, dataset, **kw):
        cfg = dict(L=1, K=2, p=6, S=8, unet_base_channels=4, trunk_hidden=[12],
                   input_channels=dataset.input_channels)
        cfg.update(kw)
        return TNOModel(TNOConfig(**cfg), init_seed=1).eval()

    def test_row_count_and_lead_times(self, dataset):
        model = self.make_model(dataset)
        table = error_accumulation_curve(model, dataset, n_windows=2, run_id="x")
        assert len(table.rows) == 4
        assert [r["snapshot_index"] for r in table.rows] == [0, 1, 2, 3]
        assert np.allclose([r["lead_time"] for r in table.rows],
                           [dataset.dt * (i + 1) for i in range(4)])

    def test_perfect_oracle_gives_zero(self, dataset):
        """Ground truth fed back as the prediction zeroes every metric up to
        the f32 normalize/denormalize roundtrip."""
        model = self.make_model(dataset)
        table = error_accumulation_curve(model, dataset, n_windows=2, run_id="oracle",
                                         predictor=lambda batch: batch["fut"].copy())
        for r in table.rows:
            assert r["mae"] < 1e-5 and r["rmse"] < 1e-5 and r["rel_l2"] < 1e-5

    def test_determinism_bitwise(self, dataset):
        model = self.make_model(dataset)
        t1 = error_accumulation_curve(model, dataset, n_windows=2, run_id="x")
        t2 = error_accumulation_curve(model, dataset, n_windows=2, run_id="x")
        assert t1.rows == t2.rows

    def test_super_resolution_consistency_at_train_grid(self, dataset):
        model = self.make_model(dataset)
        a = error_accumulation_curve(model, dataset, n_windows=2, run_id="x")
        b = super_resolution_eval(model, dataset, n_windows=2, run_id="x")
        assert a.rows == b.rows

    def test_super_resolution_grid_smaller_than_pool_rejected(self, dataset):
        model = self.make_model(dataset, S=32)
        with pytest.raises(ValueError):
            super_resolution_eval(model, dataset, n_windows=2)

    def test_fine_rows_carry_fine_resolution(self, dataset):
        model = self.make_model(dataset)
        fine = dataset.resampled("2-up")
        table = super_resolution_eval(model, fine, n_windows=1, run_id="x")
        assert all(r["resolution"] == 32 for r in table.rows)

    def test_extrapolation_start(self, dataset):
        assert extrapolation_start(dataset) == 12


class TestAblationSuite:
    def test_all_variants_present_and_failure_tolerated(self, dataset, monkeypatch, tmp_path):
        base = TNOConfig(L=1, K=2, p=4, S=8, unet_base_channels=2, trunk_hidden=[8],
                         input_channels=1)
        plan = TrainPlan(tf_epochs=1, ft_epochs=1, batch_size=4, seed=0)

        real_train = ev.train_run

        def flaky_train(plan, config, dataset, out_dir=None, quiet=True):
            if config.variant == "no_unet":
                raise RuntimeError("injected failure")
            return real_train(plan, config, dataset, out_dir=out_dir, quiet=quiet)

        monkeypatch.setattr(ev, "train_run", flaky_train)
        table = ablation_suite(dataset, base, plan, n_windows=2, include_fine=False,
                               out_dir=tmp_path)
        seen = {r["variant"] for r in table.rows}
        assert seen == set(VARIANTS) - {"no_unet"}
        assert "no_unet" in table.metadata["failures"]
        assert "injected failure" in table.metadata["failures"]["no_unet"]

    def test_metadata_counts(self, dataset):
        base = TNOConfig(L=1, K=2, p=4, S=8, unet_base_channels=2, trunk_hidden=[8],
                         input_channels=1)
        plan = TrainPlan(tf_epochs=1, ft_epochs=0, batch_size=4, seed=1)
        table = ablation_suite(dataset, base, plan, variants=("full",), include_fine=True)
        assert table.metadata["n_test_trajectories"] == 3
        res = {r["resolution"] for r in table.rows}
        assert res == {16, 32}
