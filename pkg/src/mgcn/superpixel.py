"""SLIC superpixels, multiscale hierarchies and pixel-set IoU.

Images are float arrays in [0, 1], shaped ``(H, W)`` or ``(H, W, C)``.
Pixel ``(r, c)`` sits at position ``(r + 0.5, c + 0.5)``; node coordinates
are those positions averaged per segment and divided by ``max(H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError


@dataclass
class Segmentation:
    labels: np.ndarray  # (H, W) int, ids 0..n_segments-1
    n_segments: int
    counts: np.ndarray  # pixels per segment

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "Segmentation":
        labels = np.asarray(labels, dtype=np.int64)
        n = int(labels.max()) + 1 if labels.size else 0
        return cls(labels, n, np.bincount(labels.ravel(), minlength=n))


def _as_channels(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ConfigError(f"expected (H, W) or (H, W, 1|3) image, got {np.shape(image)}")
    return img


def _grid_shape(h: int, w: int, n: int) -> tuple[int, int]:
    """Largest ny*nx <= n among grids whose step is closest to sqrt(h*w/n)."""
    step = math.sqrt(h * w / n)
    ys = {max(1, min(h, math.floor(h / step))), max(1, min(h, math.ceil(h / step)))}
    xs = {max(1, min(w, math.floor(w / step))), max(1, min(w, math.ceil(w / step)))}
    best = (1, 1)
    for ny in sorted(ys):
        for nx in sorted(xs):
            if ny * nx <= n and ny * nx > best[0] * best[1]:
                best = (ny, nx)
    return best


def slic(
    image: np.ndarray,
    n_segments: int,
    compactness: float = 10.0,
    iterations: int = 10,
    min_size: int | None = None,
) -> Segmentation:
    """Localized k-means over (channels, y, x), followed by connectivity enforcement.

    ``compactness`` is expressed on a 0-100 feature scale (the usual SLIC
    convention) and divided by 100 since channels here live in [0, 1].
    The result never has more than ``n_segments`` segments.
    """
    img = _as_channels(image)
    h, w, _ = img.shape
    if n_segments < 1:
        raise ConfigError(f"n_segments must be >= 1, got {n_segments}")
    if n_segments > h * w:
        raise ConfigError(f"n_segments={n_segments} exceeds pixel count {h * w}")
    if compactness <= 0:
        raise ConfigError(f"compactness must be > 0, got {compactness}")

    step = math.sqrt(h * w / n_segments)
    m = compactness / 100.0
    ny, nx = _grid_shape(h, w, n_segments)
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * h / ny, (np.arange(nx) + 0.5) * w / nx, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()

    feats = img.reshape(h * w, -1)
    py, px = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    py, px = py.ravel(), px.ravel()
    rows = np.clip(cy.astype(int), 0, h - 1)
    cols = np.clip(cx.astype(int), 0, w - 1)
    cf = img[rows, cols]

    dy = py[:, None] - cy[None, :]
    dx = px[:, None] - cx[None, :]
    labels = np.argmin(dy * dy + dx * dx, axis=1)
    k = cy.size
    for _ in range(iterations):
        dy = py[:, None] - cy[None, :]
        dx = px[:, None] - cx[None, :]
        window = (np.abs(dy) <= step) & (np.abs(dx) <= step)
        df = ((feats[:, None, :] - cf[None, :, :]) ** 2).sum(axis=2)
        dist = df + (dy * dy + dx * dx) * (m * m / (step * step))
        dist[~window] = np.inf
        best = np.argmin(dist, axis=1)
        covered = np.isfinite(dist[np.arange(h * w), best])
        labels = np.where(covered, best, labels)

        counts = np.bincount(labels, minlength=k)
        live = counts > 0
        cy[live] = np.bincount(labels, py, k)[live] / counts[live]
        cx[live] = np.bincount(labels, px, k)[live] / counts[live]
        for c in range(feats.shape[1]):
            cf[live, c] = np.bincount(labels, feats[:, c], k)[live] / counts[live]

    if min_size is None:
        min_size = max(1, int(h * w / n_segments / 4))
    return enforce_connectivity(Segmentation.from_labels(labels.reshape(h, w)), min_size, n_segments)


def _components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of equal-label regions, numbered in raster order."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, 1:] == labels[:, :-1]
    down = labels[1:, :] == labels[:-1, :]
    src = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    dst = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    return comp.reshape(h, w)


def _relabel_raster(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    lut = np.empty(int(uniq.max()) + 1, dtype=np.int64)
    lut[order] = np.arange(order.size)
    return lut[labels]


def enforce_connectivity(seg: Segmentation, min_size: int, max_segments: int | None = None) -> Segmentation:
    """Split segments into 4-connected pieces and absorb small ones.

    A piece smaller than ``min_size`` joins the neighbour it shares the
    longest boundary with (ties go to the lower id). If more than
    ``max_segments`` pieces remain, the smallest are absorbed the same way.
    Ids come back compacted in raster first-appearance order.
    """
    comp = _components(seg.labels)
    n = int(comp.max()) + 1
    size = np.bincount(comp.ravel(), minlength=n).astype(np.int64)

    bound = np.zeros((n, n), dtype=np.int64)
    for a, b in ((comp[:, 1:], comp[:, :-1]), (comp[1:, :], comp[:-1, :])):
        diff = a != b
        np.add.at(bound, (a[diff], b[diff]), 1)
        np.add.at(bound, (b[diff], a[diff]), 1)

    parent = np.arange(n)
    active = np.ones(n, dtype=bool)

    def absorb(j: int) -> bool:
        row = bound[j]
        if not row.any():
            return False
        i = int(np.argmax(row))
        bound[i] += bound[j]
        bound[:, i] += bound[:, j]
        bound[i, i] = 0
        bound[j] = 0
        bound[:, j] = 0
        size[i] += size[j]
        active[j] = False
        parent[j] = i
        return True

    def smallest(limit: float) -> int | None:
        cand = np.flatnonzero(active & (size < limit))
        if cand.size == 0:
            return None
        return int(cand[np.argmin(size[cand])])

    stuck: set[int] = set()
    while True:
        j = smallest(min_size)
        if j is None or j in stuck:
            break
        if not absorb(j):
            stuck.add(j)
    cap = max_segments if max_segments is not None else n
    while active.sum() > cap:
        cand = np.flatnonzero(active)
        j = int(cand[np.argmin(size[cand])])
        if not absorb(j):
            break

    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    return Segmentation.from_labels(_relabel_raster(root[comp]))


def node_features(image: np.ndarray, seg: Segmentation) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment channel means ``(S, C)`` and centroids ``(S, 2)`` as (row, col)."""
    img = _as_channels(image)
    h, w, c = img.shape
    lab = seg.labels.ravel()
    s = seg.n_segments
    counts = np.bincount(lab, minlength=s).astype(np.float64)
    means = np.stack([np.bincount(lab, img[..., i].ravel(), s) for i in range(c)], axis=1) / counts[:, None]
    py, px = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    scale = float(max(h, w))
    cents = np.stack([np.bincount(lab, py.ravel(), s), np.bincount(lab, px.ravel(), s)], axis=1)
    cents = cents / counts[:, None] / scale
    return np.clip(means, 0.0, 1.0), cents


@dataclass
class SuperpixelHierarchy:
    """Several independent segmentations of one image merged into a joint node set.

    Nodes of scale 0 come first, then scale 1, and so on; ``scales`` is the
    requested (strictly decreasing) list, so the coarsest level is last.
    """

    image_shape: tuple[int, int]
    scales: list[int]
    segmentations: list[Segmentation]
    features: np.ndarray  # (N, C) mean channel values
    coords: np.ndarray  # (N, 2)
    scale_ids: np.ndarray  # (N,)
    pixel_sets: list[np.ndarray] = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return int(self.scale_ids.size)

    def block_sizes(self) -> list[int]:
        return [s.n_segments for s in self.segmentations]

    def node_matrix(self) -> np.ndarray:
        """Node features as used by the model: channels followed by coordinates."""
        return np.concatenate([self.features, self.coords], axis=1)


def build_hierarchy(
    image: np.ndarray, scales: list[int], compactness: float = 10.0, iterations: int = 10
) -> SuperpixelHierarchy:
    if not scales:
        raise ConfigError("at least one superpixel scale is required")
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ConfigError(f"scales must be strictly decreasing, got {scales}")
    img = _as_channels(image)
    segs, feats, cents, ids, sets = [], [], [], [], []
    for level, n in enumerate(scales):
        seg = slic(img, n, compactness, iterations)
        f, c = node_features(img, seg)
        segs.append(seg)
        feats.append(f)
        cents.append(c)
        ids.append(np.full(seg.n_segments, level, dtype=np.int64))
        flat = seg.labels.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.cumsum(seg.counts)[:-1]
        sets.extend(np.split(order, bounds))
    return SuperpixelHierarchy(
        image_shape=img.shape[:2],
        scales=list(scales),
        segmentations=segs,
        features=np.concatenate(feats),
        coords=np.concatenate(cents),
        scale_ids=np.concatenate(ids),
        pixel_sets=sets,
    )


def iou_matrix(hier: SuperpixelHierarchy) -> np.ndarray:
    """Pixel-set IoU between nodes of different scales; same-scale pairs are 0."""
    n = hier.n_nodes
    out = np.zeros((n, n))
    offsets = np.concatenate([[0], np.cumsum(hier.block_sizes())])
    segs = hier.segmentations
    for a in range(len(segs)):
        for b in range(a + 1, len(segs)):
            la, lb = segs[a].labels.ravel(), segs[b].labels.ravel()
            na, nb = segs[a].n_segments, segs[b].n_segments
            inter = np.bincount(la * nb + lb, minlength=na * nb).reshape(na, nb).astype(np.float64)
            union = segs[a].counts[:, None] + segs[b].counts[None, :] - inter
            block = inter / union
            out[offsets[a] : offsets[a + 1], offsets[b] : offsets[b + 1]] = block
            out[offsets[b] : offsets[b + 1], offsets[a] : offsets[a + 1]] = block.T
    return out
