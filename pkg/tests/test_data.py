import struct

import numpy as np
import pytest

from infomaxvae import data


def idx_image_bytes(pixels):
    """Test-only IDX writer for (n, h, w) uint8 arrays."""
    arr = np.asarray(pixels, dtype=np.uint8)
    n, h, w = arr.shape
    return struct.pack(">IIII", data.IMAGE_MAGIC, n, h, w) + arr.tobytes()


def idx_label_bytes(labels):
    arr = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", data.LABEL_MAGIC, arr.size) + arr.tobytes()


class TestParseIdx:
    def test_minimal_fixture(self):
        blob = idx_image_bytes(np.array([[[0, 128], [255, 0]]]))
        ds = data.parse_idx(blob)
        assert ds.count == 1
        assert ds.input_dim == 4
        assert np.allclose(ds.examples[0], [0.0, 128 / 255, 1.0, 0.0])

    def test_wrong_magic_names_value(self):
        blob = struct.pack(">IIII", 2052, 1, 2, 2) + bytes(4)
        with pytest.raises(data.DataFormatError, match="2052"):
            data.parse_idx(blob)

    def test_truncated_payload(self):
        blob = idx_image_bytes(np.zeros((2, 2, 2)))[:-3]
        with pytest.raises(data.DataFormatError, match="bytes"):
            data.parse_idx(blob)

    def test_labels_parsed_and_count_checked(self):
        images = idx_image_bytes(np.zeros((3, 2, 2)))
        ds = data.parse_idx(images, idx_label_bytes([0, 1, 2]))
        assert ds.labels.tolist() == [0, 1, 2]
        with pytest.raises(data.DataFormatError, match="count"):
            data.parse_idx(images, idx_label_bytes([0, 1]))

    def test_label_magic_checked(self):
        images = idx_image_bytes(np.zeros((1, 2, 2)))
        bad = struct.pack(">II", 2051, 1) + bytes(1)
        with pytest.raises(data.DataFormatError, match="2051"):
            data.parse_idx(images, bad)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(5, 3, 3), dtype=np.uint8)
        ds = data.parse_idx(idx_image_bytes(raw), idx_label_bytes(rng.integers(0, 10, 5)))
        back = np.round(ds.examples * 255).astype(np.uint8).reshape(5, 3, 3)
        ds2 = data.parse_idx(idx_image_bytes(back))
        assert np.array_equal(ds.examples, ds2.examples)


class TestDatasetInvariants:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            data.Dataset(np.array([[1.5]]))

    def test_rejects_label_shape_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            data.Dataset(np.zeros((3, 2)), labels=np.array([0, 1]))


class TestBinarize:
    def test_all_zero_unchanged(self):
        ds = data.Dataset(np.zeros((2, 4)))
        out = data.binarize(ds, "threshold")
        assert np.array_equal(out.examples, np.zeros((2, 4)))

    def test_boundary_pixel_goes_to_one(self):
        ds = data.Dataset(np.array([[0.5, 0.4999]]))
        out = data.binarize(ds, "threshold")
        assert out.examples.tolist() == [[1.0, 0.0]]

    def test_stochastic_matches_bernoulli_rate(self):
        ds = data.Dataset(np.full((100_000, 1), 0.3))
        out = data.binarize(ds, "stochastic", seed=5)
        assert out.examples.mean() == pytest.approx(0.3, abs=0.01)

    def test_stochastic_deterministic_per_seed(self):
        ds = data.Dataset(np.random.default_rng(1).random((50, 4)))
        a = data.binarize(ds, "stochastic", seed=9)
        b = data.binarize(ds, "stochastic", seed=9)
        assert np.array_equal(a.examples, b.examples)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            data.binarize(data.Dataset(np.zeros((1, 1))), "fuzzy")


class TestSubset:
    def make(self, n=100, classes=10):
        rng = np.random.default_rng(3)
        return data.Dataset(rng.random((n, 4)), labels=np.arange(n) % classes)

    def test_full_size_is_identity(self):
        ds = self.make()
        assert data.subset(ds, ds.count) is ds

    def test_stratified_balanced_classes_exact(self):
        ds = self.make(100, 10)
        out = data.subset(ds, 50, seed=2, stratified=True)
        _, counts = np.unique(out.labels, return_counts=True)
        assert counts.tolist() == [5] * 10

    def test_stratified_within_one_example(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=200)
        ds = data.Dataset(rng.random((200, 2)), labels=labels)
        out = data.subset(ds, 60, seed=1, stratified=True)
        for cls in range(3):
            expected = 60 * (labels == cls).sum() / 200
            got = (out.labels == cls).sum()
            assert abs(got - expected) <= 1

    def test_deterministic(self):
        ds = self.make()
        a = data.subset(ds, 30, seed=7)
        b = data.subset(ds, 30, seed=7)
        assert np.array_equal(a.examples, b.examples)

    def test_too_large_rejected(self):
        with pytest.raises(ValueError, match="requested"):
            data.subset(self.make(10), 11)


class TestBatchIterator:
    def test_epoch_covers_each_example_once(self):
        ds = data.Dataset(np.arange(12, dtype=np.float64).reshape(12, 1) / 11.0)
        it = data.BatchIterator(ds, batch_size=4, rng=np.random.default_rng(0))
        seen = np.concatenate([it.next_batch() for _ in range(3)])
        assert sorted(seen.ravel().tolist()) == sorted(ds.examples.ravel().tolist())

    def test_short_final_batch_dropped(self):
        ds = data.Dataset(np.linspace(0, 1, 10).reshape(10, 1))
        it = data.BatchIterator(ds, batch_size=4, rng=np.random.default_rng(0))
        it.next_batch()
        it.next_batch()
        assert it.epoch == 0
        it.next_batch()  # only 2 rows left; reshuffles instead
        assert it.epoch == 1

    def test_batch_size_floor(self):
        ds = data.Dataset(np.zeros((10, 1)))
        with pytest.raises(ValueError, match="at least 2"):
            data.BatchIterator(ds, batch_size=1, rng=np.random.default_rng(0))


def histogram_mi(x, z, bins=60):
    """Plug-in MI estimate from a 2-D histogram (oracle use only)."""
    joint, _, _ = np.histogram2d(x.ravel(), z.ravel(), bins=bins)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    pz = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (px @ pz)[mask])).sum())


class TestSynthGaussian:
    def test_zero_rho_zero_mi(self):
        _, _, mi = data.synth_correlated_gaussian(10, 0.0)
        assert mi == 0.0

    def test_analytic_value_cross_checked_by_histogram(self):
        x, z, mi = data.synth_correlated_gaussian(1_000_000, 0.8, seed=11)
        assert mi == pytest.approx(0.5108, abs=1e-4)
        assert histogram_mi(x, z) == pytest.approx(mi, abs=0.02)

    def test_empirical_correlation(self):
        x, z, _ = data.synth_correlated_gaussian(100_000, 0.6, seed=3)
        assert np.corrcoef(x.ravel(), z.ravel())[0, 1] == pytest.approx(0.6, abs=0.01)

    def test_rho_domain(self):
        with pytest.raises(ValueError, match="rho"):
            data.synth_correlated_gaussian(10, 1.0)


class TestHoldout:
    def test_last_fraction_untouched(self):
        ds = data.Dataset(np.linspace(0, 1, 20).reshape(20, 1))
        train, heldout = data.holdout_split(ds, fraction=0.1)
        assert train.count == 18
        assert heldout.count == 2
        assert np.array_equal(heldout.examples, ds.examples[18:])
