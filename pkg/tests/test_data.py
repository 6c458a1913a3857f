"""Dataset pipeline tests: IDX format, resize, encoding, partitions, EMD."""

import struct
from collections import Counter

import numpy as np
import pytest

from qfed.data import (
    DegenerateImageError,
    IdxFormatError,
    LabelDistribution,
    RawImage,
    amplitude_encode,
    emd,
    encode_dataset,
    label_distribution,
    load_idx,
    partition_cycle,
    partition_star,
    resize_bilinear,
    save_idx,
    synthesize_images,
)
from qfed.qsim import StateVector


def make_idx_pair(tmp_path, images, labels, rows=4, cols=4):
    """Write a small IDX pair from (n, rows*cols) uint8 pixel arrays."""
    img_path = tmp_path / "imgs.idx3-ubyte"
    lbl_path = tmp_path / "lbls.idx1-ubyte"
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            fh.write(bytes(img))
    with open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))
    return img_path, lbl_path


def encoded_dataset(n_per_class, n_classes=8, seed=0):
    samples, rejected = encode_dataset(
        synthesize_images(n_per_class, n_classes=n_classes, seed=seed)
    )
    assert rejected == 0
    return samples


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = [rng.integers(0, 256, size=16).astype(np.uint8) for _ in range(3)]
        img_path, lbl_path = make_idx_pair(tmp_path, imgs, [0, 1, 2])
        pairs = load_idx(img_path, lbl_path)
        assert len(pairs) == 3
        for (img, label), raw, expect_label in zip(pairs, imgs, [0, 1, 2]):
            assert label == expect_label
            np.testing.assert_allclose(img.pixels, raw / 255.0)

    def test_pixel_255_maps_to_one(self, tmp_path):
        img_path, lbl_path = make_idx_pair(tmp_path, [np.full(16, 255, np.uint8)], [5])
        (img, _), = load_idx(img_path, lbl_path)
        assert img.pixels.max() == 1.0

    def test_bad_images_magic(self, tmp_path):
        img_path, lbl_path = make_idx_pair(tmp_path, [np.zeros(16, np.uint8)], [0])
        buf = bytearray(img_path.read_bytes())
        buf[3] = 0x99
        img_path.write_bytes(bytes(buf))
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(img_path, lbl_path)

    def test_truncated_pixels(self, tmp_path):
        img_path, lbl_path = make_idx_pair(tmp_path, [np.zeros(16, np.uint8)], [0])
        img_path.write_bytes(img_path.read_bytes()[:-4])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(img_path, lbl_path)

    def test_count_mismatch(self, tmp_path):
        img_path, lbl_path = make_idx_pair(tmp_path, [np.zeros(16, np.uint8)], [0])
        other_img, _ = make_idx_pair(tmp_path / "..", [np.zeros(16, np.uint8)] * 2, [0, 1])
        with pytest.raises(IdxFormatError, match="count"):
            load_idx(other_img, lbl_path)

    def test_save_then_load(self, tmp_path):
        imgs = [
            RawImage(width=4, height=4, pixels=np.linspace(0, 1, 16)),
            RawImage(width=4, height=4, pixels=np.zeros(16)),
        ]
        save_idx(imgs, [3, 1], tmp_path / "i", tmp_path / "l")
        pairs = load_idx(tmp_path / "i", tmp_path / "l")
        assert [lab for _, lab in pairs] == [3, 1]
        np.testing.assert_allclose(
            pairs[0][0].pixels, np.round(np.linspace(0, 1, 16) * 255) / 255
        )


class TestResize:
    def test_constant_image_stays_constant(self):
        img = RawImage(width=3, height=2, pixels=np.full(6, 0.37))
        out = resize_bilinear(img, 7, 5)
        np.testing.assert_allclose(out.pixels, 0.37)

    def test_identity_resize(self):
        rng = np.random.default_rng(1)
        img = RawImage(width=2, height=2, pixels=rng.random(4))
        out = resize_bilinear(img, 2, 2)
        np.testing.assert_allclose(out.pixels, img.pixels)

    def test_corner_aligned_interpolation(self):
        img = RawImage(width=2, height=1, pixels=np.array([0.0, 1.0]))
        out = resize_bilinear(img, 3, 1)
        np.testing.assert_allclose(out.pixels, [0.0, 0.5, 1.0])

    def test_bad_target(self):
        img = RawImage(width=2, height=2, pixels=np.zeros(4))
        with pytest.raises(ValueError, match="positive"):
            resize_bilinear(img, 0, 3)


class TestAmplitudeEncode:
    def test_one_hot_pixel(self):
        px = np.zeros(256)
        px[17] = 0.6
        state = amplitude_encode(RawImage(width=16, height=16, pixels=px))
        np.testing.assert_allclose(state.amps, StateVector.basis(8, 17).amps)

    def test_constant_image_uniform_amplitudes(self):
        state = amplitude_encode(RawImage(width=16, height=16, pixels=np.full(256, 0.5)))
        np.testing.assert_allclose(state.amps, np.full(256, 1 / 16.0), atol=1e-15)

    def test_normalization(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            state = amplitude_encode(RawImage(width=16, height=16, pixels=rng.random(256)))
            assert abs(np.sum(np.abs(state.amps) ** 2) - 1.0) <= 1e-12

    def test_all_zero_rejected(self):
        with pytest.raises(DegenerateImageError):
            amplitude_encode(RawImage(width=16, height=16, pixels=np.zeros(256)))

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError, match="256"):
            amplitude_encode(RawImage(width=4, height=4, pixels=np.ones(16)))

    def test_encode_after_resize_valid(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            w, h = int(rng.integers(2, 30)), int(rng.integers(2, 30))
            img = RawImage(width=w, height=h, pixels=np.clip(rng.random(w * h) + 0.05, 0, 1))
            state = amplitude_encode(resize_bilinear(img, 16, 16))
            assert abs(np.sum(np.abs(state.amps) ** 2) - 1.0) <= 1e-12

    def test_encode_dataset_counts_rejects(self):
        pairs = [
            (RawImage(width=2, height=2, pixels=np.array([0.1, 0.2, 0.3, 0.4])), 0),
            (RawImage(width=2, height=2, pixels=np.zeros(4)), 1),
        ]
        samples, rejected = encode_dataset(pairs)
        assert len(samples) == 1 and rejected == 1


class TestEmd:
    def test_identical_is_zero(self):
        d = LabelDistribution(np.full(8, 1 / 8))
        assert emd(d, d) == 0.0

    def test_star_client_value(self):
        local = LabelDistribution([0.5, 0.5, 0, 0, 0, 0, 0, 0])
        global_d = LabelDistribution(np.full(8, 1 / 8))
        assert emd(local, global_d) == pytest.approx(1.5, abs=1e-12)

    def test_cycle4_client_value(self):
        local = LabelDistribution([0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0])
        global_d = LabelDistribution(np.full(8, 1 / 8))
        assert emd(local, global_d) == pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            emd(LabelDistribution([1.0]), LabelDistribution([0.5, 0.5]))

    def test_monotone_in_m_for_uniform_counts(self):
        samples = encoded_dataset(24)
        global_d = label_distribution(samples, 8)
        values = []
        for m in (2, 3, 4, 5, 6, 8):
            clients = partition_cycle(samples, 8, m, seed=7)
            values.append(emd(label_distribution(clients[0].samples, 8), global_d))
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
        assert values[0] == pytest.approx(1.5, abs=1e-9)
        assert values[-1] == pytest.approx(0.0, abs=1e-9)


class TestPartitions:
    def test_star_classes(self):
        samples = encoded_dataset(10)
        clients = partition_star(samples, 7, 0, seed=0)
        assert [c.client_id for c in clients] == list(range(1, 8))
        for c in clients:
            classes = sorted({s.label for s in c.samples})
            assert classes == [0, c.client_id]

    def test_star_two_nonzero_label_bins(self):
        samples = encoded_dataset(10)
        for c in partition_star(samples, 7, 0, seed=3):
            hist = Counter(s.label for s in c.samples)
            assert len(hist) == 2

    def test_star_partition_complete(self):
        samples = encoded_dataset(9)
        clients = partition_star(samples, 7, 0, seed=1)
        all_idx = sorted(i for c in clients for i in c.indices)
        assert all_idx == list(range(len(samples)))
        assert sum(len(c) for c in clients) == len(samples)

    def test_star_fixed_class_even_split_remainder_low_ids(self):
        samples = encoded_dataset(10)  # 10 zeros over 7 clients: 2,2,2,1,1,1,1
        clients = partition_star(samples, 7, 0, seed=2)
        zero_counts = [sum(1 for s in c.samples if s.label == 0) for c in clients]
        assert zero_counts == [2, 2, 2, 1, 1, 1, 1]

    def test_star_weights(self):
        samples = encoded_dataset(10)
        clients = partition_star(samples, 7, 0, seed=0)
        assert sum(c.weight_p for c in clients) == pytest.approx(1.0, abs=1e-9)
        for c in clients:
            assert c.weight_p == len(c) / len(samples)

    def test_star_missing_class(self):
        samples = [s for s in encoded_dataset(6) if s.label != 3]
        with pytest.raises(ValueError, match="class 3"):
            partition_star(samples, 7, 0, seed=0)

    def test_cycle_classes(self):
        samples = encoded_dataset(12)
        clients = partition_cycle(samples, 8, 2, seed=0)
        client3 = next(c for c in clients if c.client_id == 3)
        assert sorted({s.label for s in client3.samples}) == [3, 4]
        client7 = next(c for c in clients if c.client_id == 7)
        assert sorted({s.label for s in client7.samples}) == [0, 7]  # wraps mod 8

    def test_cycle_partition_complete_no_duplicates(self):
        samples = encoded_dataset(12)
        for m in (1, 2, 3, 5, 8):
            clients = partition_cycle(samples, 8, m, seed=4)
            all_idx = sorted(i for c in clients for i in c.indices)
            assert all_idx == list(range(len(samples)))

    def test_cycle_full_m_is_iid(self):
        samples = encoded_dataset(16)
        clients = partition_cycle(samples, 8, 8, seed=0)
        global_d = label_distribution(samples, 8)
        for c in clients:
            local = label_distribution(c.samples, 8)
            assert emd(local, global_d) == pytest.approx(0.0, abs=1e-9)

    def test_cycle_class_in_m_clients(self):
        samples = encoded_dataset(12)
        clients = partition_cycle(samples, 8, 3, seed=0)
        for k in range(8):
            owners = [c.client_id for c in clients if any(s.label == k for s in c.samples)]
            assert len(owners) == 3

    def test_cycle_invalid_m(self):
        samples = encoded_dataset(4)
        with pytest.raises(ValueError, match="m must be"):
            partition_cycle(samples, 8, 0, seed=0)
        with pytest.raises(ValueError, match="m must be"):
            partition_cycle(samples, 8, 9, seed=0)

    def test_partitions_deterministic(self):
        samples = encoded_dataset(8)
        a = partition_star(samples, 7, 0, seed=11)
        b = partition_star(samples, 7, 0, seed=11)
        assert [c.indices for c in a] == [c.indices for c in b]
        c1 = partition_cycle(samples, 8, 3, seed=11)
        c2 = partition_cycle(samples, 8, 3, seed=11)
        assert [c.indices for c in c1] == [c.indices for c in c2]


class TestSynthesizedImages:
    def test_deterministic(self):
        a = synthesize_images(4, seed=9)
        b = synthesize_images(4, seed=9)
        for (ia, la), (ib, lb) in zip(a, b):
            assert la == lb
            np.testing.assert_array_equal(ia.pixels, ib.pixels)

    def test_class_balance(self):
        pairs = synthesize_images(6)
        counts = Counter(lab for _, lab in pairs)
        assert all(counts[k] == 6 for k in range(8))
