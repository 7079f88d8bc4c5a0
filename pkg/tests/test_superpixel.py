from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mgcn.data import load_mnist
from mgcn.errors import ConfigError
from mgcn.superpixel import (
    Segmentation,
    build_hierarchy,
    enforce_connectivity,
    iou_matrix,
    node_features,
    slic,
)

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def digits():
    images, labels = load_mnist(DATA, "train", dtype=np.float64)
    return images


def n_pieces(labels, seg_id):
    _, n = ndimage.label(labels == seg_id)  # 4-connectivity by default
    return n


def all_connected(seg):
    return all(n_pieces(seg.labels, s) == 1 for s in range(seg.n_segments))


class TestSlic:
    def test_constant_image_gives_grid(self):
        seg = slic(np.full((8, 8), 0.3), 4)
        assert seg.n_segments == 4
        assert sorted(seg.counts) == [16, 16, 16, 16]
        for s in range(4):
            rows, cols = np.nonzero(seg.labels == s)
            assert rows.max() - rows.min() == 3 and cols.max() - cols.min() == 3

    def test_single_segment(self):
        seg = slic(np.random.default_rng(0).random((10, 7)), 1)
        assert seg.n_segments == 1
        assert (seg.labels == 0).all()

    def test_too_many_segments(self):
        with pytest.raises(ConfigError):
            slic(np.zeros((3, 3)), 10)

    @pytest.mark.parametrize("bad", [0, -1])
    def test_nonpositive_segments(self, bad):
        with pytest.raises(ConfigError):
            slic(np.zeros((3, 3)), bad)

    def test_bad_compactness(self):
        with pytest.raises(ConfigError):
            slic(np.zeros((4, 4)), 2, compactness=0)

    def test_mnist_digits_75(self, digits):
        for img in digits[:8]:
            seg = slic(img, 75)
            assert 50 <= seg.n_segments <= 75
            assert all_connected(seg)

    def test_deterministic(self, digits):
        a, b = slic(digits[3], 21), slic(digits[3], 21)
        assert np.array_equal(a.labels, b.labels)

    def test_rgb_input(self):
        img = np.random.default_rng(1).random((12, 12, 3))
        seg = slic(img, 9)
        assert seg.n_segments <= 9
        assert seg.counts.sum() == 144

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(2, 14),
        w=st.integers(2, 14),
        frac=st.floats(0.01, 1.0),
        seed=st.integers(0, 2**16),
    )
    def test_partition_and_bound(self, h, w, frac, seed):
        n = max(1, int(frac * h * w))
        img = np.random.default_rng(seed).random((h, w))
        seg = slic(img, n)
        assert seg.labels.shape == (h, w)
        assert seg.n_segments <= n
        assert set(np.unique(seg.labels)) == set(range(seg.n_segments))
        assert seg.counts.sum() == h * w
        assert np.array_equal(seg.counts, np.bincount(seg.labels.ravel()))
        assert all_connected(seg)


class TestConnectivity:
    def test_idempotent_up_to_relabel(self):
        labels = np.array([[0, 0, 1], [2, 2, 1], [2, 2, 1]])
        out = enforce_connectivity(Segmentation.from_labels(labels), min_size=1)
        # same partition: a bijection between old and new ids
        pairs = set(zip(labels.ravel(), out.labels.ravel()))
        assert len(pairs) == 3 == out.n_segments

    def test_stray_pixel_absorbed(self):
        labels = np.zeros((6, 6), dtype=int)
        labels[:, 3:] = 1
        labels[2, 1] = 1  # isolated fragment of segment 1 inside segment 0
        out = enforce_connectivity(Segmentation.from_labels(labels), min_size=4)
        assert out.n_segments == 2
        assert out.labels[2, 1] == out.labels[0, 0]

    def test_longest_boundary_wins(self):
        labels = np.array(
            [
                [0, 0, 0, 0],
                [0, 2, 2, 1],
                [1, 1, 1, 1],
            ]
        )
        # fragment {2} touches segment 0 on 3 edges and segment 1 on 3 edges -> tie -> lower id (0)
        out = enforce_connectivity(Segmentation.from_labels(labels), min_size=3)
        assert out.labels[1, 1] == out.labels[0, 0]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), k=st.integers(1, 6), min_size=st.integers(1, 6))
    def test_random_noise_flood_fill(self, seed, k, min_size):
        labels = np.random.default_rng(seed).integers(0, k, size=(9, 11))
        out = enforce_connectivity(Segmentation.from_labels(labels), min_size)
        assert all_connected(out)
        assert out.counts.sum() == 99
        if out.n_segments > 1:
            assert out.counts.min() >= min_size

    def test_cap_on_segment_count(self):
        labels = np.arange(16).reshape(4, 4)
        out = enforce_connectivity(Segmentation.from_labels(labels), min_size=1, max_segments=5)
        assert out.n_segments <= 5
        assert all_connected(out)


class TestFeatures:
    def test_constant_intensity(self):
        img = np.full((10, 10), 0.7)
        seg = slic(img, 6)
        means, _ = node_features(img, seg)
        np.testing.assert_allclose(means, 0.7, atol=1e-15)

    def test_single_segment_centroid(self):
        img = np.zeros((6, 10))
        means, cents = node_features(img, Segmentation.from_labels(np.zeros((6, 10), int)))
        np.testing.assert_allclose(cents, [[3.0 / 10, 5.0 / 10]])

    def test_scalar_accumulation_oracle(self):
        rng = np.random.default_rng(5)
        img = rng.random((9, 8, 3))
        seg = slic(img, 10)
        means, cents = node_features(img, seg)
        for s in range(seg.n_segments):
            acc, cy, cx, cnt = np.zeros(3), 0.0, 0.0, 0
            for r in range(9):
                for c in range(8):
                    if seg.labels[r, c] == s:
                        acc += img[r, c]
                        cy += r + 0.5
                        cx += c + 0.5
                        cnt += 1
            np.testing.assert_allclose(means[s], acc / cnt, atol=1e-12)
            np.testing.assert_allclose(cents[s], [cy / cnt / 9, cx / cnt / 9], atol=1e-12)

    def test_ranges(self, digits):
        means, cents = node_features(digits[0], slic(digits[0], 75))
        assert means.min() >= 0 and means.max() <= 1
        assert cents.min() >= 0 and cents.max() <= 1


class TestHierarchy:
    def test_mnist_recipe(self, digits):
        hier = build_hierarchy(digits[0], [75, 21, 7])
        assert hier.n_nodes <= 103
        assert hier.block_sizes() == [s.n_segments for s in hier.segmentations]
        assert sum(hier.block_sizes()) == hier.n_nodes
        expected = np.repeat(np.arange(3), hier.block_sizes())
        assert np.array_equal(hier.scale_ids, expected)
        assert hier.node_matrix().shape == (hier.n_nodes, 3)

    def test_single_node(self):
        hier = build_hierarchy(np.random.default_rng(0).random((5, 5)), [1])
        assert hier.n_nodes == 1
        assert iou_matrix(hier).shape == (1, 1)

    @pytest.mark.parametrize("scales", [[], [7, 21], [5, 5]])
    def test_bad_scales(self, scales):
        with pytest.raises(ConfigError):
            build_hierarchy(np.zeros((8, 8)), scales)

    def test_pixel_sets_sorted_and_partition(self, digits):
        hier = build_hierarchy(digits[1], [21, 7])
        offset = 0
        for seg in hier.segmentations:
            sets = hier.pixel_sets[offset : offset + seg.n_segments]
            allpix = np.concatenate(sets)
            assert np.array_equal(np.sort(allpix), np.arange(784))
            for s, idx in enumerate(sets):
                assert np.all(np.diff(idx) > 0)
                assert np.all(seg.labels.ravel()[idx] == s)
            offset += seg.n_segments


def _manual_hierarchy(label_maps):
    """Hierarchy built from fixed label maps via the same assembly code path."""
    from mgcn import superpixel as sp

    segs = [Segmentation.from_labels(np.asarray(m)) for m in label_maps]
    sets, ids = [], []
    for level, seg in enumerate(segs):
        for s in range(seg.n_segments):
            sets.append(np.flatnonzero(seg.labels.ravel() == s))
        ids.append(np.full(seg.n_segments, level))
    n = sum(s.n_segments for s in segs)
    return sp.SuperpixelHierarchy(
        segs[0].labels.shape, [s.n_segments for s in segs], segs, np.zeros((n, 1)), np.zeros((n, 2)),
        np.concatenate(ids), sets,
    )


class TestIoU:
    def test_identical_disjoint_and_half(self):
        fine = [[0, 0, 1, 1], [2, 2, 3, 3]]
        coarse = [[0, 0, 0, 0], [1, 1, 2, 2]]
        iou = iou_matrix(_manual_hierarchy([fine, coarse]))
        # fine 3 == coarse 2 (identical sets)
        assert iou[3, 4 + 2] == 1.0
        # fine 0 in coarse 0 (size 2 in size 4) -> 0.5
        assert iou[0, 4] == 0.5
        # fine 0 vs coarse 1: disjoint
        assert iou[0, 5] == 0.0
        # same scale exactly zero
        assert not iou[:4, :4].any() and not iou[4:, 4:].any()

    def test_pixel_counting_oracle(self, digits):
        hier = build_hierarchy(digits[2], [21, 7, 3])
        iou = iou_matrix(hier)
        n = hier.n_nodes
        assert np.array_equal(iou, iou.T)
        assert iou.min() >= 0 and iou.max() <= 1
        assert not iou.diagonal().any()
        for i in range(n):
            for j in range(n):
                if hier.scale_ids[i] == hier.scale_ids[j]:
                    assert iou[i, j] == 0.0
                else:
                    a, b = set(hier.pixel_sets[i]), set(hier.pixel_sets[j])
                    assert iou[i, j] == pytest.approx(len(a & b) / len(a | b), abs=1e-15)
