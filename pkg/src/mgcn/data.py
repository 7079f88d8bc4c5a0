"""Dataset loaders, low-resolution downsampling, the graph cache and batching."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import graphbuild as gb
from .errors import ConfigError, DataFormatError, UsageError
from .superpixel import build_hierarchy

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073
CACHE_VERSION = 1

RECIPES = {
    "mnist": {"scales": [75, 21, 7], "low_res": (9, 9), "size": (28, 28), "channels": 1},
    "cifar10": {"scales": [150, 75, 21, 7], "low_res": (12, 12), "size": (32, 32), "channels": 3},
}


# ---------------------------------------------------------------------------
# Raw formats
# ---------------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode a big-endian IDX payload (uint8 data) into an array."""
    if len(raw) < 8:
        raise DataFormatError(f"IDX payload of {len(raw)} bytes is too short for a header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("IDX header truncated")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    need = int(np.prod(dims))
    have = len(raw) - header
    if have < need:
        raise DataFormatError(f"IDX data truncated: expected {need} bytes, found {have}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def _find(root: Path, stems: list[str]) -> Path:
    for stem in stems:
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
    raise DataFormatError(f"none of {stems} found in {root}")


def load_mnist(root, split: str, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Images ``(n, 28, 28)`` scaled by 1/255 and int64 labels."""
    root = Path(root)
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ConfigError(f"split must be train or test, got {split!r}")
    img_path = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lab_path = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = parse_idx(_read_bytes(img_path), IDX_IMAGES)
    labels = parse_idx(_read_bytes(lab_path), IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(dtype) / dtype(255.0), labels.astype(np.int64)


def parse_cifar(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records into uint8 ``(n, 32, 32, 3)`` images and labels."""
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"CIFAR file size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, rec[:, 0].astype(np.int64)


def load_cifar10(root, split: str, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    if split == "train":
        files = sorted(root.glob("data_batch_*.bin"))
    elif split == "test":
        files = [root / "test_batch.bin"]
    else:
        raise ConfigError(f"split must be train or test, got {split!r}")
    files = [f for f in files if f.exists()]
    if not files:
        raise DataFormatError(f"no CIFAR-10 {split} batches in {root}")
    parts = [parse_cifar(f.read_bytes()) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images.astype(dtype) / dtype(255.0), labels


def load_dataset(name: str, root, split: str, dtype=np.float32):
    if name == "mnist":
        return load_mnist(root, split, dtype)
    if name == "cifar10":
        return load_cifar10(root, split, dtype)
    raise ConfigError(f"unknown dataset {name!r}")


def _tile_edges(n: int, parts: int) -> np.ndarray:
    # remainder spread evenly: 28 -> 9 gives tiles of 3 and 4 pixels
    return (np.arange(parts) * n) // parts


def downsample(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Area average over near-equal tiles."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ConfigError(f"cannot downsample {h}x{w} to {target_h}x{target_w}")
    ry, rx = _tile_edges(h, target_h), _tile_edges(w, target_w)
    sums = np.add.reduceat(np.add.reduceat(img, ry, axis=0), rx, axis=1)
    hy = np.diff(np.append(ry, h))
    hx = np.diff(np.append(rx, w))
    area = hy[:, None] * hx[None, :]
    if img.ndim == 3:
        area = area[..., None]
    return sums / area


# ---------------------------------------------------------------------------
# Per-sample graphs
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    dataset: str = "mnist"
    split: str = "train"
    source: str = "data/mnist"
    scales: list[int] = field(default_factory=lambda: [75, 21, 7])
    relations: list[str] = field(default_factory=lambda: [gb.SPATIAL])
    sigma: float = 0.1
    cache_dir: str = "cache"
    low_res: bool = False
    compactness: float = 10.0
    limit: int | None = None

    def __post_init__(self):
        if self.dataset not in RECIPES:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        self.relations = gb.parse_relations(self.relations)
        self.scales = [int(s) for s in self.scales]

    @property
    def cached_relations(self) -> list[str]:
        """Distinct non-learned tags, in first-appearance order."""
        out = []
        for t in self.relations:
            if t != gb.LEARNED and t not in out:
                out.append(t)
        return out

    def digest(self) -> str:
        """Hash of everything that determines the cached bytes."""
        d = asdict(self)
        for k in ("source", "cache_dir", "relations"):
            d.pop(k)
        d["cached"] = self.cached_relations
        if self.low_res:
            d.pop("scales")
            d.pop("compactness")
        d["version"] = CACHE_VERSION
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class GraphRecord:
    label: int
    features: np.ndarray  # (N, C)
    coords: np.ndarray  # (N, 2)
    scale_ids: np.ndarray  # (N,)
    adjacency: dict[str, np.ndarray]  # tag -> (N, N)

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])


def sample_graph(image: np.ndarray, label: int, spec: DatasetSpec) -> GraphRecord:
    tags = spec.cached_relations
    if spec.low_res:
        if gb.HIERARCHICAL in tags:
            raise ConfigError("hierarchical relations need superpixels, not a pixel grid")
        th, tw = RECIPES[spec.dataset]["low_res"]
        g = gb.pixel_grid_graph(downsample(image, th, tw), spec.sigma)
    else:
        hier = build_hierarchy(image, spec.scales, spec.compactness)
        g = gb.assemble_multigraph(hier, tags or [gb.SPATIAL], spec.sigma)
    adj = {t: a for t, a in g.relations if t in tags}
    return GraphRecord(int(label), g.features, g.coords, g.scale_ids, adj)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def _worker(args):
    image, label, spec = args
    return sample_graph(image, label, spec)


class GraphCache:
    """Read side of a cache directory; arrays are memory-mapped.

    Layout: ``manifest.json`` plus flat little-endian files ``features.f32``,
    ``coords.f32``, ``scale_ids.i32``, ``adj_<tag>.f32`` and int64 offset
    tables, so record ``i`` spans ``node_offsets[i]:node_offsets[i+1]`` rows
    (and ``adj_offsets[i]:adj_offsets[i+1]`` adjacency entries).
    """

    def __init__(self, path):
        self.path = Path(path)
        man = self.path / "manifest.json"
        if not man.exists():
            raise DataFormatError(f"no cache manifest in {self.path}")
        self.manifest = json.loads(man.read_text())
        if self.manifest.get("format_version") != CACHE_VERSION:
            raise DataFormatError(f"unsupported cache version {self.manifest.get('format_version')}")
        self.labels = self._map("labels.i64", "<i8")
        self.node_offsets = self._map("node_offsets.i64", "<i8")
        self.adj_offsets = self._map("adj_offsets.i64", "<i8")
        if self.labels.size != self.manifest["count"] or self.node_offsets.size != self.labels.size + 1:
            raise DataFormatError(f"cache {self.path} is inconsistent with its manifest")
        c = int(self.manifest["n_features"])
        self.features = self._map("features.f32", "<f4").reshape(-1, c)
        self.coords = self._map("coords.f32", "<f4").reshape(-1, 2)
        self.scale_ids = self._map("scale_ids.i32", "<i4")
        self.tags = list(self.manifest["relations"])
        self.adj = {t: self._map(f"adj_{t}.f32", "<f4") for t in self.tags}

    def _map(self, name, dtype):
        f = self.path / name
        if f.stat().st_size == 0:
            return np.zeros(0, dtype=dtype)
        return np.memmap(f, dtype=dtype, mode="r")

    def __len__(self) -> int:
        return int(self.manifest["count"])

    @property
    def digest(self) -> str:
        return self.manifest["digest"]

    def record(self, i: int, dtype=np.float64) -> GraphRecord:
        a, b = int(self.node_offsets[i]), int(self.node_offsets[i + 1])
        n = b - a
        p, q = int(self.adj_offsets[i]), int(self.adj_offsets[i + 1])
        adj = {t: np.asarray(self.adj[t][p:q], dtype=dtype).reshape(n, n) for t in self.tags}
        return GraphRecord(
            int(self.labels[i]),
            np.asarray(self.features[a:b], dtype=dtype),
            np.asarray(self.coords[a:b], dtype=dtype),
            np.asarray(self.scale_ids[a:b], dtype=np.int64),
            adj,
        )


def write_cache(path, records, digest: str, tags: list[str], extra: dict | None = None) -> GraphCache:
    """Stream records to ``path``; built in a sibling temp dir and renamed into place."""
    path = Path(path)
    tmp = path.parent / f".{path.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    labels, nodes, adj_off = [], [0], [0]
    n_features = None
    names = ["features.f32", "coords.f32", "scale_ids.i32"] + [f"adj_{t}.f32" for t in tags]
    files = {n: open(tmp / n, "wb") for n in names}
    try:
        for r in records:
            if n_features is None:
                n_features = int(r.features.shape[1])
            labels.append(r.label)
            nodes.append(nodes[-1] + r.n_nodes)
            adj_off.append(adj_off[-1] + r.n_nodes * r.n_nodes)
            files["features.f32"].write(np.ascontiguousarray(r.features, "<f4").tobytes())
            files["coords.f32"].write(np.ascontiguousarray(r.coords, "<f4").tobytes())
            files["scale_ids.i32"].write(np.ascontiguousarray(r.scale_ids, "<i4").tobytes())
            for t in tags:
                files[f"adj_{t}.f32"].write(np.ascontiguousarray(r.adjacency[t], "<f4").tobytes())
    finally:
        for fh in files.values():
            fh.close()
    if not labels:
        shutil.rmtree(tmp)
        raise UsageError("refusing to write an empty cache")
    (tmp / "labels.i64").write_bytes(np.asarray(labels, "<i8").tobytes())
    (tmp / "node_offsets.i64").write_bytes(np.asarray(nodes, "<i8").tobytes())
    (tmp / "adj_offsets.i64").write_bytes(np.asarray(adj_off, "<i8").tobytes())
    manifest = {
        "format_version": CACHE_VERSION,
        "digest": digest,
        "count": len(labels),
        "relations": list(tags),
        "n_features": n_features,
    }
    manifest.update(extra or {})
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return GraphCache(path)


def cache_path(spec: DatasetSpec) -> Path:
    kind = "lowres" if spec.low_res else "sp" + "-".join(map(str, spec.scales))
    rels = "+".join(spec.cached_relations) or "none"
    lim = f"-n{spec.limit}" if spec.limit else ""
    return Path(spec.cache_dir) / f"{spec.dataset}-{spec.split}-{kind}-{rels}{lim}"


def precompute_graphs(spec: DatasetSpec, workers: int = 1, progress=None) -> tuple[GraphCache, bool]:
    """Build (or reuse) the cache for ``spec``; returns the cache and whether it was reused.

    An existing cache with a different digest is left untouched and reported.
    """
    path = cache_path(spec)
    digest = spec.digest()
    if (path / "manifest.json").exists():
        cache = GraphCache(path)
        if cache.digest != digest:
            raise ConfigError(f"cache {path} was built with a different configuration (digest {cache.digest[:12]})")
        return cache, True
    images, labels = load_dataset(spec.dataset, spec.source, spec.split)
    if spec.limit is not None:
        images, labels = images[: spec.limit], labels[: spec.limit]
    jobs = ((images[i], labels[i], spec) for i in range(len(labels)))
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = {"dataset": spec.dataset, "split": spec.split}
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers) as pool:
            records = _progress(pool.imap(_worker, jobs, chunksize=64), progress)
            return write_cache(path, records, digest, spec.cached_relations, extra), False
    records = _progress(map(_worker, jobs), progress)
    return write_cache(path, records, digest, spec.cached_relations, extra), False


def _progress(it, callback):
    for i, r in enumerate(it):
        if callback is not None:
            callback(i + 1)
        yield r


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray  # (B, N, C)
    mask: np.ndarray  # (B, N) bool
    adjacency: dict[str, np.ndarray]  # tag -> (B, N, N)
    coords: np.ndarray  # (B, N, 2)
    labels: np.ndarray  # (B,)
    indices: np.ndarray  # source record ids

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def unpad(self, b: int) -> GraphRecord:
        n = int(self.mask[b].sum())
        return GraphRecord(
            int(self.labels[b]),
            self.features[b, :n],
            self.coords[b, :n],
            np.zeros(n, dtype=np.int64),
            {t: a[b, :n, :n] for t, a in self.adjacency.items()},
        )


def collate(records: list[GraphRecord], indices=None, dtype=np.float64, transform=None) -> Batch:
    """Pad to the largest graph in the batch; padded entries are zero."""
    if not records:
        raise UsageError("cannot collate an empty batch")
    b = len(records)
    n = max(r.n_nodes for r in records)
    c = records[0].features.shape[1]
    feats = np.zeros((b, n, c), dtype=dtype)
    coords = np.zeros((b, n, 2), dtype=dtype)
    mask = np.zeros((b, n), dtype=bool)
    tags = list(records[0].adjacency)
    adj = {t: np.zeros((b, n, n), dtype=dtype) for t in tags}
    for i, r in enumerate(records):
        k = r.n_nodes
        feats[i, :k] = r.features
        coords[i, :k] = r.coords
        mask[i, :k] = True
        for t in tags:
            a = r.adjacency[t]
            adj[t][i, :k, :k] = transform(t, a) if transform else a
    labels = np.array([r.label for r in records], dtype=np.int64)
    idx = np.arange(b) if indices is None else np.asarray(indices)
    return Batch(feats, mask, adj, coords, labels, idx)


def batch_iter(
    source,
    batch_size: int,
    shuffle_seed: int | None = None,
    dtype=np.float64,
    transform=None,
) -> Iterator[Batch]:
    """Yield padded batches covering every record once.

    ``source`` is a GraphCache or a list of GraphRecords. With a seed the
    order is a seeded permutation; otherwise records come in stored order.
    """
    count = len(source)
    if count == 0:
        raise UsageError("cannot iterate over an empty cache")
    order = np.arange(count)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(count)
    get = source.record if isinstance(source, GraphCache) else (lambda i, dtype=None: source[i])
    for start in range(0, count, batch_size):
        idx = order[start : start + batch_size]
        yield collate([get(int(i), dtype=dtype) for i in idx], idx, dtype, transform)
