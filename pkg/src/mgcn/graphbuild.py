"""Multigraph construction: spatial, hierarchical and placeholder learned relations.

Adjacency matrices are plain float arrays (they are constants of a sample);
:func:`khop_basis` runs through the autodiff ops so the same code serves the
first layer and the differentiable deeper ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .superpixel import SuperpixelHierarchy, iou_matrix

SPATIAL = "spatial"
HIERARCHICAL = "hierarchical"
LEARNED = "learned"

# CLI shorthand -> ordered relation tags
RELATION_PRESETS = {
    "sp": [SPATIAL],
    "h": [SPATIAL, HIERARCHICAL],
    "l": [SPATIAL, LEARNED],
    "h-l": [SPATIAL, HIERARCHICAL, LEARNED],
    "l4": [SPATIAL] + [LEARNED] * 4,
    "h-l4": [SPATIAL, HIERARCHICAL] + [LEARNED] * 4,
}


def parse_relations(spec) -> list[str]:
    """Accept a preset name (``"h-l4"``) or an explicit list of tags."""
    if isinstance(spec, str):
        if spec not in RELATION_PRESETS:
            raise ConfigError(f"unknown relation preset {spec!r}; choose from {sorted(RELATION_PRESETS)}")
        return list(RELATION_PRESETS[spec])
    tags = list(spec)
    if not tags:
        raise ConfigError("relation spec is empty")
    for t in tags:
        if t not in (SPATIAL, HIERARCHICAL, LEARNED):
            raise ConfigError(f"unknown relation tag {t!r}")
    return tags


@dataclass
class MultiGraph:
    """Joint node set plus an ordered list of ``(tag, adjacency)`` relations.

    Learned relations carry ``None``; the model materializes them per pass.
    """

    features: np.ndarray  # (N, C)
    coords: np.ndarray  # (N, 2)
    scale_ids: np.ndarray  # (N,)
    relations: list[tuple[str, np.ndarray | None]]

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.relations]


def spatial_adjacency(coords: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian of centroid distance on a complete graph; zero diagonal."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    p = np.asarray(coords, dtype=np.float64)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    a = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(a, 0.0)
    return a


def hierarchical_adjacency(hier: SuperpixelHierarchy) -> np.ndarray:
    return iou_matrix(hier)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops, D^-1/2 (A + I) D^-1/2.

    Works on a single ``(N, N)`` matrix or a stack ``(..., N, N)``.
    """
    a = np.asarray(a)
    n = a.shape[-1]
    at = a + np.eye(n, dtype=a.dtype)
    d = at.sum(axis=-1)
    inv = 1.0 / np.sqrt(d)
    return at * inv[..., :, None] * inv[..., None, :]


def chebyshev_operator(a: np.ndarray) -> np.ndarray:
    """Rescaled Laplacian 2L/lmax - I with lmax = 2, i.e. -D^-1/2 A D^-1/2."""
    a = np.asarray(a)
    d = a.sum(axis=-1)
    with np.errstate(divide="ignore"):
        inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return -(a * inv[..., :, None] * inv[..., None, :])


def khop_basis(a_norm, x, k: int) -> list[ad.Tensor]:
    """Blocks ``[A x, A^2 x, ..., A^k x]`` by repeated propagation."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    blocks = []
    h = x
    for _ in range(k):
        h = ad.matmul(a_norm, h)
        blocks.append(h)
    return blocks


def chebyshev_basis(l_hat, x, k: int) -> list[ad.Tensor]:
    """Blocks ``[T_0 x, ..., T_{k-1} x]`` of the Chebyshev recurrence."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    t0 = ad._as_tensor(x)
    blocks = [t0]
    if k > 1:
        t1 = ad.matmul(l_hat, t0)
        blocks.append(t1)
        for _ in range(2, k):
            t2 = ad.sub(ad.mul(ad.matmul(l_hat, t1), 2.0), t0)
            blocks.append(t2)
            t0, t1 = t1, t2
    return blocks


def knn_sparsify(a: np.ndarray, k: int | None = None, keep_fraction: float | None = None) -> tuple[np.ndarray, float]:
    """Keep each row's ``k`` largest off-diagonal weights, symmetrized by union.

    Returns the sparsified matrix and its density in percent (nonzeros / N^2).
    """
    a = np.asarray(a)
    n = a.shape[0]
    if (k is None) == (keep_fraction is None):
        raise ConfigError("pass exactly one of k or keep_fraction")
    if k is None:
        k = max(1, int(round(keep_fraction * (n - 1))))
    if k >= n - 1:
        out = a.copy()
    else:
        off = a.copy()
        np.fill_diagonal(off, -np.inf)
        order = np.argsort(-off, axis=1, kind="stable")[:, :k]
        keep = np.zeros_like(a, dtype=bool)
        np.put_along_axis(keep, order, True, axis=1)
        keep |= keep.T
        out = np.where(keep, a, 0.0)
    density = 100.0 * np.count_nonzero(out) / (n * n)
    return out, density


def pixel_grid_graph(image: np.ndarray, sigma: float = 0.1) -> MultiGraph:
    """One node per pixel of an (already downsampled) image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    py, px = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    coords = np.stack([py.ravel(), px.ravel()], axis=1) / float(max(h, w))
    feats = np.concatenate([img.reshape(h * w, c), coords], axis=1)
    return MultiGraph(feats, coords, np.zeros(h * w, dtype=np.int64), [(SPATIAL, spatial_adjacency(coords, sigma))])


def assemble_multigraph(hier: SuperpixelHierarchy, relations, sigma: float = 0.1) -> MultiGraph:
    tags = parse_relations(relations)
    rels: list[tuple[str, np.ndarray | None]] = []
    spatial = hier_adj = None
    for t in tags:
        if t == SPATIAL:
            if spatial is None:
                spatial = spatial_adjacency(hier.coords, sigma)
            rels.append((t, spatial))
        elif t == HIERARCHICAL:
            if hier_adj is None:
                hier_adj = hierarchical_adjacency(hier)
            rels.append((t, hier_adj))
        else:
            rels.append((t, None))
    return MultiGraph(hier.node_matrix(), hier.coords.copy(), hier.scale_ids.copy(), rels)


def gaussian_reference(offsets: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial edge weight as a function of a coordinate offset ``(..., 2)``."""
    return np.exp(-(np.asarray(offsets) ** 2).sum(axis=-1) / (2.0 * sigma * sigma))


def neighbourhood_size(n: int, fraction: float = 0.2) -> int:
    # round first: 0.2 * 15 is 3.0000000000000004 in binary floating point
    return max(1, math.ceil(round(fraction * n, 9)))


def learned_neighbourhood(coords: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """Boolean ``(N, N)`` mask of each node's ceil(fraction*N) nearest nodes, self included.

    Distance ties break by node index.
    """
    p = np.asarray(coords, dtype=np.float64)
    n = p.shape[0]
    k = neighbourhood_size(n, fraction)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, -1.0)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask
