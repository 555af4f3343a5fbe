"""Synthetic corpora and their CSV round trip."""

import os

import numpy as np
import pytest

from quantnet.data import (
    batch_indices,
    load_dataset,
    make_dataset,
    make_image_dataset,
    one_hot,
    save_dataset,
)
from quantnet.errors import DataError


class TestGeneration:
    def test_shapes_labels_and_meta(self):
        data = make_dataset(classes=3, channels=2, length=16,
                            train=40, val=10, test=20, seed=5)
        assert data["X_train"].shape == (40, 2, 16)
        assert data["X_train"].dtype == np.float32
        assert data["y_train"].dtype == np.int64
        assert data["X_val"].shape == (10, 2, 16)
        assert data["X_test"].shape == (20, 2, 16)
        assert set(np.unique(data["y_train"])) <= {0, 1, 2}
        assert data["meta"]["kind"] == "sequence"
        assert data["meta"]["classes"] == 3

    def test_same_seed_is_identical_different_seed_is_not(self):
        a = make_dataset(classes=3, channels=2, length=16, train=30, val=10,
                         test=10, seed=9)
        b = make_dataset(classes=3, channels=2, length=16, train=30, val=10,
                         test=10, seed=9)
        c = make_dataset(classes=3, channels=2, length=16, train=30, val=10,
                         test=10, seed=10)
        assert np.array_equal(a["X_train"], b["X_train"])
        assert np.array_equal(a["y_test"], b["y_test"])
        assert not np.array_equal(a["X_train"], c["X_train"])

    def test_classes_are_separable_by_template_correlation(self):
        """A nearest-template classifier should do far better than chance,
        otherwise the training tests upstream mean nothing."""
        data = make_dataset(classes=3, channels=4, length=32, train=60,
                            val=10, test=90, seed=11, shift_max=0,
                            amp_jitter=0.1, noise_std=0.2)
        X, y = data["X_test"], data["y_test"]
        means = np.stack([X[y == k].mean(axis=0) for k in range(3)])
        flat = X.reshape(len(X), -1)
        tpl = means.reshape(3, -1)
        scores = flat @ tpl.T
        acc = float((scores.argmax(axis=1) == y).mean())
        assert acc > 0.8

    def test_image_variant_shapes(self):
        data = make_image_dataset(classes=2, channels=1, side=8, train=12,
                                  val=4, test=4, seed=1)
        assert data["X_train"].shape == (12, 1, 8, 8)
        assert data["meta"]["kind"] == "image"

    def test_degenerate_parameters_are_rejected(self):
        with pytest.raises(DataError, match=">=2 classes"):
            make_dataset(classes=1)
        with pytest.raises(DataError):
            make_image_dataset(classes=1)


class TestOneHot:
    def test_rows_are_unit_indicators(self):
        out = one_hot([0, 2, 1], 3)
        assert out.dtype == np.float32
        assert np.array_equal(out, [[1, 0, 0], [0, 0, 1], [0, 1, 0]])

    def test_out_of_range_labels_are_rejected(self):
        with pytest.raises(DataError, match="outside"):
            one_hot([0, 3], 3)
        with pytest.raises(DataError, match="outside"):
            one_hot([-1], 3)


class TestPersistence:
    def make(self):
        return make_dataset(classes=3, channels=2, length=8, train=15, val=5,
                            test=6, seed=21)

    def test_round_trip_is_bit_exact(self, tmp_path):
        data = self.make()
        save_dataset(str(tmp_path / "d"), data)
        back = load_dataset(str(tmp_path / "d"))
        for split in ("train", "val", "test"):
            assert np.array_equal(back[f"X_{split}"], data[f"X_{split}"])
            assert np.array_equal(back[f"y_{split}"], data[f"y_{split}"])
        assert back["meta"]["classes"] == 3
        assert back["meta"]["kind"] == "sequence"

    def test_image_round_trip_restores_spatial_shape(self, tmp_path):
        data = make_image_dataset(classes=2, channels=2, side=6, train=8,
                                  val=4, test=4, seed=3)
        save_dataset(str(tmp_path / "img"), data)
        back = load_dataset(str(tmp_path / "img"))
        assert back["X_train"].shape == data["X_train"].shape
        assert np.array_equal(back["X_test"], data["X_test"])

    def test_missing_directory_and_missing_split(self, tmp_path):
        with pytest.raises(DataError, match="missing meta.json"):
            load_dataset(str(tmp_path / "nowhere"))
        data = self.make()
        save_dataset(str(tmp_path / "d"), data)
        os.remove(tmp_path / "d" / "val.csv")
        with pytest.raises(DataError, match="missing val.csv"):
            load_dataset(str(tmp_path / "d"))

    def test_corrupt_value_reports_file_and_line(self, tmp_path):
        data = self.make()
        save_dataset(str(tmp_path / "d"), data)
        path = tmp_path / "d" / "test.csv"
        lines = path.read_text().splitlines()
        parts = lines[2].split(",")
        parts[3] = "spam"  # same field count, unparseable value
        lines[2] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"test\.csv:3: bad value"):
            load_dataset(str(tmp_path / "d"))

    def test_wrong_feature_count_is_rejected(self, tmp_path):
        data = self.make()
        save_dataset(str(tmp_path / "d"), data)
        path = tmp_path / "d" / "train.csv"
        lines = path.read_text().splitlines()
        lines[0] = lines[0] + ",0.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"train\.csv:1: row has 17"):
            load_dataset(str(tmp_path / "d"))

    def test_empty_split_is_rejected(self, tmp_path):
        data = self.make()
        save_dataset(str(tmp_path / "d"), data)
        (tmp_path / "d" / "val.csv").write_text("")
        with pytest.raises(DataError, match="no samples"):
            load_dataset(str(tmp_path / "d"))


class TestBatchIndices:
    def test_every_index_appears_exactly_once(self):
        rng = np.random.default_rng(0)
        batches = list(batch_indices(23, 5, rng))
        seen = np.concatenate(batches)
        assert sorted(seen.tolist()) == list(range(23))

    def test_trailing_singleton_is_merged(self):
        rng = np.random.default_rng(1)
        sizes = [len(b) for b in batch_indices(101, 10, rng)]
        assert sizes == [10] * 9 + [11]

    def test_small_remainders_stay_separate(self):
        rng = np.random.default_rng(2)
        sizes = [len(b) for b in batch_indices(22, 5, rng)]
        assert sizes == [5, 5, 5, 5, 2]

    def test_batch_larger_than_population(self):
        rng = np.random.default_rng(3)
        sizes = [len(b) for b in batch_indices(8, 50, rng)]
        assert sizes == [8]

    def test_order_depends_on_the_rng(self):
        a = np.concatenate(list(batch_indices(30, 7, np.random.default_rng(4))))
        b = np.concatenate(list(batch_indices(30, 7, np.random.default_rng(4))))
        c = np.concatenate(list(batch_indices(30, 7, np.random.default_rng(5))))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
