import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcn import graphbuild as gb
from mgcn.errors import ConfigError
from mgcn.superpixel import build_hierarchy


def random_symmetric(rng, n, density=0.6):
    a = rng.random((n, n)) * (rng.random((n, n)) < density)
    a = np.triu(a, 1)
    return a + a.T


class TestSpatial:
    def test_sigma_sqrt2_gives_inverse_e(self):
        s = 0.1
        a = gb.spatial_adjacency(np.array([[0.0, 0.0], [s * math.sqrt(2), 0.0]]), s)
        assert a[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)
        assert a[0, 0] == 0.0

    def test_coincident_nodes(self):
        a = gb.spatial_adjacency(np.array([[0.3, 0.4], [0.3, 0.4]]), 0.1)
        assert a[0, 1] == 1.0

    def test_single_node(self):
        a = gb.spatial_adjacency(np.array([[0.5, 0.5]]), 0.1)
        assert a.shape == (1, 1) and a[0, 0] == 0.0

    @pytest.mark.parametrize("sigma", [0.0, -0.1])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ConfigError):
            gb.spatial_adjacency(np.zeros((2, 2)), sigma)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), n=st.integers(1, 30), sigma=st.floats(0.01, 2.0))
    def test_range_and_symmetry(self, seed, n, sigma):
        a = gb.spatial_adjacency(np.random.default_rng(seed).random((n, 2)), sigma)
        assert np.array_equal(a, a.T)
        assert a.min() >= 0 and a.max() <= 1
        assert not a.diagonal().any()


class TestHierarchical:
    def test_single_scale_is_zero(self):
        hier = build_hierarchy(np.random.default_rng(0).random((12, 12)), [9])
        assert not gb.hierarchical_adjacency(hier).any()

    def test_block_structure(self):
        img = np.random.default_rng(1).random((28, 28))
        hier = build_hierarchy(img, [75, 21, 7])
        a = gb.hierarchical_adjacency(hier)
        same = hier.scale_ids[:, None] == hier.scale_ids[None, :]
        assert not (a * same).any()
        # every fine node overlaps at least one coarser node
        sizes = hier.block_sizes()
        assert (a[: sizes[0], sizes[0] :].sum(axis=1) > 0).all()
        assert np.array_equal(a, a.T)


class TestNormalize:
    def test_two_node(self):
        out = gb.normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(out, 0.5, atol=1e-15)

    def test_zero_gives_identity(self):
        assert np.array_equal(gb.normalize_adjacency(np.zeros((4, 4))), np.eye(4))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), n=st.integers(1, 50))
    def test_spectrum(self, seed, n):
        a = random_symmetric(np.random.default_rng(seed), n)
        out = gb.normalize_adjacency(a)
        np.testing.assert_allclose(out, out.T, atol=1e-14)
        ev = np.linalg.eigvalsh(out)
        assert ev.min() >= -1 - 1e-10 and ev.max() <= 1 + 1e-10

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        stack = np.stack([random_symmetric(rng, 6) for _ in range(3)])
        out = gb.normalize_adjacency(stack)
        for i in range(3):
            np.testing.assert_array_equal(out[i], gb.normalize_adjacency(stack[i]))


class TestKhop:
    def test_k1_is_propagation(self):
        rng = np.random.default_rng(0)
        a = gb.normalize_adjacency(random_symmetric(rng, 7))
        x = rng.random((7, 3))
        (block,) = gb.khop_basis(a, x, 1)
        assert np.array_equal(block.data, a @ x)

    def test_isolated_nodes(self):
        x = np.random.default_rng(1).random((5, 2))
        a = gb.normalize_adjacency(np.zeros((5, 5)))
        for block in gb.khop_basis(a, x, 4):
            np.testing.assert_array_equal(block.data, x)

    def test_matrix_power_oracle(self):
        rng = np.random.default_rng(2)
        a = gb.normalize_adjacency(random_symmetric(rng, 9))
        x = rng.random((9, 4))
        blocks = gb.khop_basis(a, x, 3)
        for k, b in enumerate(blocks, start=1):
            np.testing.assert_allclose(b.data, np.linalg.matrix_power(a, k) @ x, atol=1e-10)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            gb.khop_basis(np.eye(2), np.ones((2, 1)), 0)

    def test_chebyshev_recurrence(self):
        rng = np.random.default_rng(4)
        a = random_symmetric(rng, 8)
        lhat = gb.chebyshev_operator(a)
        x = rng.random((8, 2))
        blocks = [b.data for b in gb.chebyshev_basis(lhat, x, 4)]
        # closed form via eigendecomposition: T_k(L) = cos(k arccos L) on the spectrum
        w, v = np.linalg.eigh(lhat)
        w = np.clip(w, -1, 1)
        for k, b in enumerate(blocks):
            tk = v @ np.diag(np.cos(k * np.arccos(w))) @ v.T
            np.testing.assert_allclose(b, tk @ x, atol=1e-10)


class TestSparsify:
    def test_keep_all(self):
        a = random_symmetric(np.random.default_rng(0), 6, density=1.0)
        out, _ = gb.knn_sparsify(a, k=5)
        assert np.array_equal(out, a)
        out, _ = gb.knn_sparsify(a, k=50)
        assert np.array_equal(out, a)

    def test_nearest_neighbour_on_path(self):
        x = np.array([[0.0, 0.0], [0.1, 0.0], [0.25, 0.0], [0.45, 0.0]])
        a = gb.spatial_adjacency(x, 0.2)
        out, _ = gb.knn_sparsify(a, k=1)
        assert np.array_equal(out, out.T)
        nz = {tuple(sorted(p)) for p in zip(*np.nonzero(out))}
        # nearest of 0 is 1, of 1 is 0, of 2 is 1, of 3 is 2
        assert nz == {(0, 1), (1, 2), (2, 3)}

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), n=st.integers(2, 25), frac=st.floats(0.01, 1.0))
    def test_density_and_symmetry(self, seed, n, frac):
        a = gb.spatial_adjacency(np.random.default_rng(seed).random((n, 2)), 0.3)
        out, density = gb.knn_sparsify(a, keep_fraction=frac)
        assert np.array_equal(out, out.T)
        assert density == pytest.approx(100.0 * np.count_nonzero(out) / (n * n))
        assert np.all((out == 0) | (out == a))

    def test_requires_one_knob(self):
        with pytest.raises(ConfigError):
            gb.knn_sparsify(np.zeros((3, 3)))


class TestPixelGrid:
    def test_mnist_lowres_size(self):
        g = gb.pixel_grid_graph(np.random.default_rng(0).random((9, 9)))
        assert g.n_nodes == 81
        assert g.features.shape == (81, 3)

    def test_shared_structure(self):
        rng = np.random.default_rng(1)
        g1 = gb.pixel_grid_graph(rng.random((9, 9)))
        g2 = gb.pixel_grid_graph(rng.random((9, 9)))
        assert np.array_equal(g1.relations[0][1], g2.relations[0][1])

    def test_two_by_two_values(self):
        a = gb.pixel_grid_graph(np.zeros((2, 2))).relations[0][1]
        off = a[~np.eye(4, dtype=bool)]
        # side neighbours and diagonal neighbours
        assert len(np.unique(off)) == 2
        assert len(np.unique(a)) == 3

    def test_rgb_features(self):
        g = gb.pixel_grid_graph(np.random.default_rng(2).random((12, 12, 3)))
        assert g.features.shape == (144, 5)


@pytest.fixture(scope="module")
def hier():
    return build_hierarchy(np.random.default_rng(7).random((28, 28)), [75, 21, 7])


class TestAssemble:
    @pytest.mark.parametrize("spec,r", [("sp", 1), ("h", 2), ("l", 2), ("h-l", 3), ("l4", 5), ("h-l4", 6)])
    def test_relation_counts(self, hier, spec, r):
        g = gb.assemble_multigraph(hier, spec)
        assert len(g.relations) == r
        assert g.tags == gb.RELATION_PRESETS[spec]
        for tag, a in g.relations:
            if tag == gb.LEARNED:
                assert a is None
            else:
                assert a.shape == (g.n_nodes, g.n_nodes)
                assert a.min() >= 0 and a.max() <= 1

    def test_spatial_spans_scales(self, hier):
        g = gb.assemble_multigraph(hier, "sp")
        a = g.relations[0][1]
        cross = hier.scale_ids[:, None] != hier.scale_ids[None, :]
        assert (a[cross] > 0).any()

    @pytest.mark.parametrize("bad", [[], "nope", ["spatial", "bogus"]])
    def test_bad_spec(self, hier, bad):
        with pytest.raises(ConfigError):
            gb.assemble_multigraph(hier, bad)


class TestNeighbourhood:
    @pytest.mark.parametrize("n,k", [(1, 1), (5, 1), (10, 2), (15, 3), (75, 15), (101, 21)])
    def test_size(self, n, k):
        assert gb.neighbourhood_size(n) == k

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), n=st.integers(1, 40))
    def test_self_included_and_row_count(self, seed, n):
        pts = np.random.default_rng(seed).random((n, 2))
        pts[n // 2] = pts[0]  # coincident pair
        m = gb.learned_neighbourhood(pts)
        assert m.diagonal().all()
        assert (m.sum(axis=1) == gb.neighbourhood_size(n)).all()

    def test_nearest_selected(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.5, 0.0], [0.9, 0.0], [1.0, 0.0]])
        m = gb.learned_neighbourhood(pts, fraction=0.4)  # k = 2
        assert np.array_equal(np.flatnonzero(m[0]), [0, 1])
        assert np.array_equal(np.flatnonzero(m[4]), [3, 4])
