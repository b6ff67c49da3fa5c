import numpy as np
import pytest

from stpretrain.data import (HEADER, Dataset, DatasetFormatError, SyntheticSpec, cluster_signals,
                             generate_synthetic, read_dataset, read_labels, write_dataset,
                             write_labels)


def small_ds():
    return Dataset(np.random.default_rng(0).normal(size=(3, 10, 2)), 48, 2)


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        ds = small_ds()
        write_dataset(tmp_path / "d.bin", ds)
        back = read_dataset(tmp_path / "d.bin")
        assert np.array_equal(back.values, ds.values)
        assert (back.slots_per_day, back.start_day_of_week) == (48, 2)

    def test_size(self, tmp_path):
        write_dataset(tmp_path / "d.bin", small_ds())
        assert (tmp_path / "d.bin").stat().st_size == HEADER.size + 3 * 10 * 2 * 8

    def test_truncated(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, small_ds())
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetFormatError, match="truncated"):
            read_dataset(path)

    def test_short_header(self, tmp_path):
        (tmp_path / "d.bin").write_bytes(b"STDS")
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / "d.bin")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, small_ds())
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(DatasetFormatError, match="magic"):
            read_dataset(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, small_ds())
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "none.bin")

    @pytest.mark.parametrize("spd", [0, 7])
    def test_slots_must_divide_day(self, spd):
        with pytest.raises(DatasetFormatError):
            Dataset(np.zeros((1, 2, 1)), spd)

    def test_labels_round_trip(self, tmp_path):
        labels = np.array([2, 0, 1, 1])
        write_labels(tmp_path / "l.txt", labels)
        assert read_labels(tmp_path / "l.txt").tolist() == [2, 0, 1, 1]


class TestSynthetic:
    def test_shapes_and_balance(self):
        ds, labels = generate_synthetic(SyntheticSpec())
        assert ds.values.shape == (30, 2880, 2)
        assert np.bincount(labels).tolist() == [10, 10, 10]

    def test_reproducible(self):
        a, la = generate_synthetic(SyntheticSpec(regions=6, steps=100, seed=3))
        b, lb = generate_synthetic(SyntheticSpec(regions=6, steps=100, seed=3))
        assert np.array_equal(a.values, b.values) and np.array_equal(la, lb)

    def test_seed_matters(self):
        a, _ = generate_synthetic(SyntheticSpec(regions=6, steps=100, seed=3))
        b, _ = generate_synthetic(SyntheticSpec(regions=6, steps=100, seed=4))
        assert not np.array_equal(a.values, b.values)

    def test_noise_free_members_identical(self):
        ds, labels = generate_synthetic(SyntheticSpec(regions=9, steps=200, noise=0.0))
        for k in range(3):
            members = ds.values[labels == k]
            assert np.array_equal(members, np.broadcast_to(members[0], members.shape))
        assert not np.array_equal(ds.values[labels == 0][0], ds.values[labels == 1][0])

    def test_more_clusters_than_regions(self):
        with pytest.raises(ValueError, match="exceeds"):
            generate_synthetic(SyntheticSpec(regions=2, clusters=3))

    def test_per_cluster_lists_checked(self):
        with pytest.raises(ValueError):
            SyntheticSpec(periods=[48.0]).validate()

    def test_coupled_lag_peak(self):
        spec = SyntheticSpec(regions=3, steps=6000, features=1, seasonal=0.0, lag=5, seed=1)
        sig = cluster_signals(spec)[:, :, 0]
        a, b = sig[0], sig[1]

        def corr(k):
            x, y = (a[k:], b[:len(b) - k]) if k >= 0 else (a[:k], b[-k:])
            return np.corrcoef(x, y)[0, 1]

        lags = list(range(-10, 11))
        assert lags[int(np.argmax([corr(k) for k in lags]))] == 5

    def test_time_features(self):
        ds, _ = generate_synthetic(SyntheticSpec(regions=3, steps=100))
        tf = ds.time_features()
        assert tf.tod[1] - tf.tod[0] == pytest.approx(1 / 48)
        assert tf.dow[0] == 0 and tf.dow[48] == pytest.approx(1 / 7)

    def test_spec_yaml_round_trip(self, tmp_path):
        spec = SyntheticSpec(regions=8, clusters=2, noise=0.0, periods=[48.0, 12.0])
        (tmp_path / "s.yaml").write_text(spec.dump())
        assert SyntheticSpec.load(tmp_path / "s.yaml") == spec

    def test_unknown_yaml_key(self, tmp_path):
        (tmp_path / "s.yaml").write_text("regions: 4\nbogus: 1\n")
        with pytest.raises(ValueError, match="bogus"):
            SyntheticSpec.load(tmp_path / "s.yaml")
