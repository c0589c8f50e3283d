import struct

import numpy as np
import numpy.testing as npt
import pytest

from mca.data import (
    BadMagicError, Dataset, MisalignedFileError, SyntheticSpec,
    TruncatedFileError, augment, gen_synthetic, load_cifar10, load_mnist,
    make_moment_dataset, write_cifar10_batch,
)


def write_idx_images(path, images):
    """Hand-rolled IDX writer used only as a test fixture."""
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    images = np.zeros((1, 28, 28), dtype=np.uint8)
    images[0, 3, 5] = 255
    images[0, 10, 10] = 128
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx_images(ip, images)
    write_idx_labels(lp, [7])
    return ip, lp


class TestMnist:
    def test_single_image_roundtrip(self, idx_pair):
        ds = load_mnist(*idx_pair)
        assert ds.images.shape == (1, 1, 28, 28)
        assert ds.labels[0] == 7
        assert ds.images[0, 0, 3, 5] == 1.0
        assert ds.images[0, 0, 10, 10] == pytest.approx(128 / 255)
        assert ds.images[0, 0, 0, 0] == 0.0

    def test_bad_magic(self, tmp_path, idx_pair):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 100)
        with pytest.raises(BadMagicError):
            load_mnist(bad, idx_pair[1])

    def test_truncated_pixels(self, tmp_path, idx_pair):
        trunc = tmp_path / "trunc.idx"
        trunc.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + b"\x00" * 100)
        with pytest.raises(TruncatedFileError):
            load_mnist(trunc, idx_pair[1])

    def test_count_mismatch(self, tmp_path, idx_pair):
        lp = tmp_path / "two.idx"
        write_idx_labels(lp, [1, 2])
        with pytest.raises(MisalignedFileError):
            load_mnist(idx_pair[0], lp)

    def test_trailing_bytes(self, tmp_path, idx_pair):
        raw = idx_pair[0].read_bytes() + b"\x00"
        bad = tmp_path / "trail.idx"
        bad.write_bytes(raw)
        with pytest.raises(MisalignedFileError):
            load_mnist(bad, idx_pair[1])


class TestCifar10:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.random((4, 3, 32, 32)).astype(np.float32)
        labels = np.array([0, 3, 9, 5])
        path = tmp_path / "batch.bin"
        write_cifar10_batch(path, images, labels)
        ds = load_cifar10(path)
        assert ds.images.shape == (4, 3, 32, 32)
        npt.assert_array_equal(ds.labels, labels)
        # quantization to uint8 bounds the roundtrip error
        assert np.abs(ds.images - images).max() <= 0.5 / 255 + 1e-7

    def test_multiple_batches_concatenate(self, tmp_path):
        rng = np.random.default_rng(1)
        paths = []
        for i in range(2):
            p = tmp_path / f"b{i}.bin"
            write_cifar10_batch(p, rng.random((3, 3, 32, 32)), [i, i, i])
            paths.append(p)
        ds = load_cifar10(paths)
        assert len(ds) == 6
        npt.assert_array_equal(ds.labels, [0, 0, 0, 1, 1, 1])

    def test_misaligned_rejected(self, tmp_path):
        p = tmp_path / "short.bin"
        p.write_bytes(b"\x00" * 3000)
        with pytest.raises(MisalignedFileError):
            load_cifar10(p)

    def test_label_out_of_range_rejected(self, tmp_path):
        rec = np.zeros(3073, dtype=np.uint8)
        rec[0] = 11
        p = tmp_path / "badlab.bin"
        p.write_bytes(rec.tobytes())
        with pytest.raises(Exception, match="out of range"):
            load_cifar10(p)


class TestDataset:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=np.int64), classes=10)

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 1, 2, 2)), np.array([10]), classes=10)

    def test_subset_deterministic(self):
        ds = make_moment_dataset(50, seed=0)
        a = ds.subset(10, seed=3)
        b = ds.subset(10, seed=3)
        npt.assert_array_equal(a.images, b.images)
        npt.assert_array_equal(a.labels, b.labels)


class TestAugment:
    def test_involution(self):
        rng = np.random.default_rng(2)
        x = rng.random((8, 3, 4, 4)).astype(np.float32)
        once = augment(x, 1.0, seed=0)
        npt.assert_array_equal(once, x[:, :, :, ::-1])
        npt.assert_array_equal(augment(once, 1.0, seed=5), x)

    def test_zero_probability_identity(self):
        x = np.random.default_rng(3).random((4, 1, 3, 3))
        assert augment(x, 0.0, seed=0) is x

    def test_deterministic(self):
        x = np.random.default_rng(4).random((16, 1, 3, 3))
        npt.assert_array_equal(augment(x, 0.5, seed=9), augment(x, 0.5, seed=9))

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            augment(np.zeros((1, 1, 2, 2)), 1.5, seed=0)


class TestGenSynthetic:
    def test_gaussian_statistics(self):
        spec = SyntheticSpec("gaussian", mu=2.0, sigma=0.5, count=200,
                             height=16, width=16, seed=0)
        x = gen_synthetic(spec)
        assert abs(x.mean() - 2.0) < 0.02
        assert abs(x.std() - 0.5) < 0.02

    def test_skew_sign(self):
        for d in (-1, 1):
            spec = SyntheticSpec("skewed", skew_direction=d, count=500,
                                 height=8, width=8, seed=1)
            x = gen_synthetic(spec).reshape(-1)
            m3 = np.mean((x - x.mean()) ** 3)
            assert np.sign(m3) == d

    def test_mixture_bimodal_variance(self):
        spec = SyntheticSpec("mixture", count=500, height=8, width=8, seed=2)
        x = gen_synthetic(spec).reshape(-1)
        # mixture of N(+-1.5, 1): variance = 1 + 1.5^2
        assert abs(x.var() - (1 + 1.5 ** 2)) < 0.1

    def test_seed_determinism(self):
        spec = SyntheticSpec("gaussian", count=3, seed=7)
        npt.assert_array_equal(gen_synthetic(spec), gen_synthetic(spec))

    def test_invalid_sigma_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec("gaussian", sigma=0.0)

    def test_unknown_distribution_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec("cauchy")


class TestMomentDataset:
    def test_shapes_and_range(self):
        ds = make_moment_dataset(64, seed=0)
        assert ds.images.shape == (64, 3, 32, 32)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.classes == 10

    def test_deterministic(self):
        a = make_moment_dataset(32, seed=5)
        b = make_moment_dataset(32, seed=5)
        npt.assert_array_equal(a.images, b.images)
        npt.assert_array_equal(a.labels, b.labels)

    def test_active_channel_has_distinct_statistics(self):
        ds = make_moment_dataset(500, seed=1, size=16)
        var = ds.images.var(axis=(2, 3))             # [N, C]
        x = ds.images
        mu = x.mean(axis=(2, 3))
        skew = ((x - mu[:, :, None, None]) ** 3).mean(axis=(2, 3))
        active = var.argmax(axis=1)
        # exactly one channel per sample is high-variance and skewed
        top = np.take_along_axis(var, active[:, None], 1)[:, 0]
        rest = np.sort(var, axis=1)[:, :-1]
        assert np.all(top > rest.max(axis=1) * 1.2)
        assert np.mean(np.take_along_axis(skew, active[:, None], 1) > 0) > 0.95

    def test_label_readable_from_active_channel_mean(self):
        ds = make_moment_dataset(2000, seed=2, size=16)
        var = ds.images.var(axis=(2, 3))
        active = var.argmax(axis=1)
        mean = np.take_along_axis(ds.images.mean(axis=(2, 3)),
                                  active[:, None], 1)[:, 0]
        # class means are monotone in the label, so the correlation is strong
        assert np.corrcoef(mean, ds.labels)[0, 1] > 0.9

    def test_too_few_classes_rejected(self):
        with pytest.raises(ValueError):
            make_moment_dataset(10, seed=0, classes=1)
