import numpy as np
import pytest

from stpretrain.config import tiny_config
from stpretrain.data import SyntheticSpec, generate_synthetic
from stpretrain.features import time_features
from stpretrain.model import PretrainModel
from stpretrain.params import ParamBank
from stpretrain.train import (NormStats, NumericalError, Optimizer, load_checkpoint, make_batch,
                              pretrain, save_checkpoint, split_bounds, window_starts,
                              zscore_fit_apply)


def small_data(seed=0):
    ds, labels = generate_synthetic(SyntheticSpec(regions=4, steps=120, features=2, clusters=2,
                                                  slots_per_day=24, seed=seed))
    return ds, labels


def small_config(**kw):
    base = dict(epochs=2, batch_size=8, stride=4, optimizer="adam", lr=0.003)
    base.update(kw)
    return tiny_config(**base)


class TestNormalisation:
    def test_hand_values(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
        stats = NormStats.fit(x)
        assert stats.mean[0] == pytest.approx(2.0)
        assert stats.std[0] == pytest.approx(np.sqrt(2 / 3))
        assert np.allclose(stats.apply(x).ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).normal(size=(3, 10, 2))
        a, _ = zscore_fit_apply(x)
        b, _ = zscore_fit_apply(x + 7.5)
        assert np.allclose(a, b, atol=1e-12)

    def test_inverse(self):
        x = np.random.default_rng(1).normal(size=(3, 10, 2)) * 5 + 3
        stats = NormStats.fit(x)
        assert np.max(np.abs(stats.inverse(stats.apply(x)) - x)) < 1e-10

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="zero-variance"):
            NormStats.fit(np.ones((2, 5, 1)))

    def test_fit_on_train_only(self):
        x = np.arange(10.0).reshape(1, 10, 1)
        train_norm, test_norm, stats = zscore_fit_apply(x[:, :5], x[:, 5:])
        assert stats.mean[0] == 2.0 and test_norm.min() > train_norm.max()


class TestWindows:
    def test_split_ratio(self):
        assert split_bounds(100) == ((0, 60), (60, 80), (80, 100))

    def test_starts(self):
        assert window_starts(0, 10, 4, 3).tolist() == [0, 3, 6]
        assert window_starts(0, 10, 4, 1, tail=2).tolist() == [0, 1, 2, 3, 4]
        assert window_starts(0, 3, 4, 1).size == 0

    def test_batch_layout(self):
        x = np.arange(2 * 10 * 1, dtype=float).reshape(2, 10, 1)
        b = make_batch(x, time_features(10, 5), [1, 4], 3)
        assert b.x.shape == (2, 2, 3, 1)
        assert b.x[1, 0, :, 0].tolist() == [4.0, 5.0, 6.0]
        assert b.tod.shape == (2, 3)


class TestOptimizer:
    def bank(self, value):
        bank = ParamBank()
        bank.add("theta", (1,), None, np.random.default_rng(0)).data[:] = value
        return bank

    def test_sgd(self):
        bank = self.bank(1.0)
        Optimizer("sgd", 0.1).step(bank, {"theta": np.array([2.0])})
        assert bank["theta"].data[0] == pytest.approx(0.8)

    def test_zero_gradient(self):
        bank = self.bank(1.0)
        Optimizer("sgd", 0.1).step(bank, {"theta": np.array([0.0])})
        assert bank["theta"].data[0] == 1.0

    @pytest.mark.parametrize("g", [1e-3, 1.0, 1e3])
    def test_adam_first_step_scale_free(self, g):
        bank = self.bank(0.0)
        Optimizer("adam", 0.01).step(bank, {"theta": np.array([g])})
        assert abs(bank["theta"].data[0]) == pytest.approx(0.01, rel=1e-4)

    def test_clipping(self):
        bank = self.bank(0.0)
        norm = Optimizer("sgd", 1.0, clip_norm=1.0).step(bank, {"theta": np.array([10.0])})
        assert norm == 10.0 and bank["theta"].data[0] == pytest.approx(-1.0)

    def test_nonfinite_gradient(self):
        with pytest.raises(NumericalError):
            Optimizer("sgd", 0.1).step(self.bank(1.0), {"theta": np.array([np.nan])})

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Optimizer("rmsprop")


class TestPretrain:
    def test_zero_rate_leaves_parameters(self):
        ds, _ = small_data()
        cfg = small_config(epochs=1, lr=0.0, optimizer="sgd")
        model = PretrainModel(cfg, ds.regions, ds.features)
        before = model.bank.state()
        res = pretrain(ds.values, ds.time_features(), cfg, model=model)
        assert len(res.trace) == 1
        for name, arr in res.model.bank.state().items():
            assert np.array_equal(arr, before[name])

    def test_zero_epochs(self):
        ds, _ = small_data()
        res = pretrain(ds.values, ds.time_features(), small_config(epochs=0))
        assert res.trace == [] and res.best_epoch == 0

    def test_deterministic_trace(self):
        ds, _ = small_data()
        cfg = small_config(epochs=3)
        a = pretrain(ds.values, ds.time_features(), cfg)
        b = pretrain(ds.values, ds.time_features(), cfg)
        assert [vars(r) for r in a.trace] == [vars(r) for r in b.trace]

    def test_seed_changes_trace(self):
        ds, _ = small_data()
        a = pretrain(ds.values, ds.time_features(), small_config(seed=0))
        b = pretrain(ds.values, ds.time_features(), small_config(seed=1))
        assert a.trace[0].total != b.trace[0].total

    def test_trace_finite_and_schedule(self):
        ds, _ = small_data()
        res = pretrain(ds.values, ds.time_features(), small_config(epochs=4))
        assert all(np.isfinite([r.recon, r.kl, r.total, r.val_recon]).all() for r in res.trace)
        assert [r.adaptive_ratio for r in res.trace] == [0.25, 0.5, 0.75, 1.0]

    def test_random_mode_has_no_adaptive_ratio(self):
        ds, _ = small_data()
        res = pretrain(ds.values, ds.time_features(), small_config(mask_mode="random"))
        assert all(r.adaptive_ratio == 0.0 for r in res.trace)

    def test_mask_log_receives_plans(self):
        ds, _ = small_data()
        seen = []
        pretrain(ds.values, ds.time_features(), small_config(epochs=1),
                 mask_log=lambda starts, plans: seen.extend(zip(starts, plans)))
        assert seen and all(p.masked_count == round(4 * 4 * 0.25) for _, p in seen)

    def test_nonfinite_input_reported(self):
        ds, _ = small_data()
        values = ds.values.copy()
        values[0, 3, 0] = np.inf
        with pytest.raises((NumericalError, ValueError)):
            pretrain(values, ds.time_features(), small_config(epochs=1))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        ds, _ = small_data()
        res = pretrain(ds.values, ds.time_features(), small_config())
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, res)
        back = load_checkpoint(path)
        for name, arr in res.model.bank.state().items():
            assert np.array_equal(back.model.bank[name].data, arr)
        assert np.array_equal(back.stats.mean, res.stats.mean)
        assert [vars(r) for r in back.trace] == [vars(r) for r in res.trace]
        x = res.stats.apply(ds.values)
        batch = make_batch(x, ds.time_features(), [0, 8], 4)
        mask = np.ones((2, 4, 4))
        assert np.array_equal(res.model.forward(batch, mask).y_hat.data,
                              back.model.forward(batch, mask).y_hat.data)
        assert back.model.config == res.model.config

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        import zipfile
        path = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", '{"format": "other", "version": 1}')
        with pytest.raises(ValueError):
            load_checkpoint(path)
