"""Multirelational graph convolutional classifier.

Each layer propagates node features through every relation (K hops each),
fuses the per-relation blocks with one of four operators, and applies ReLU
(then batch norm when configured). Three layers are followed by a global
max pool over valid nodes and a linear classifier.

Fusion operators, for per-relation blocks ``X_r`` of width C*K:

    c   [X_0, ..., X_{R-1}] @ theta
    s   (sum_r tanh(X_r @ f_r)) @ theta
    cp  relu([X_0, ..., X_{R-1}] @ w1) @ w2
    pc  [tanh(X_0 @ f_0), ..., tanh(X_{R-1} @ f_{R-1})] @ theta
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import graphbuild as gb
from .errors import ConfigError, DataFormatError, UsageError

FUSIONS = ("c", "s", "cp", "pc")


@dataclass
class ModelConfig:
    relations: list[str] = field(default_factory=lambda: [gb.SPATIAL])
    fusion: str = "c"
    khops: int = 1
    widths: tuple[int, ...] = (32, 64, 512)
    in_features: int = 3
    n_classes: int = 10
    regularizer: str = "dropout"  # dropout | batchnorm | none
    dropout: float = 0.5
    f_hid: int = 64
    edge_hidden: int = 32
    neighbourhood: float = 0.2
    basis: str = "power"  # power | chebyshev
    normalize_learned: bool = False

    def __post_init__(self):
        self.relations = gb.parse_relations(self.relations)
        self.widths = tuple(int(w) for w in self.widths)
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.khops < 1:
            raise ConfigError(f"K must be >= 1, got {self.khops}")
        if self.regularizer not in ("dropout", "batchnorm", "none"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.basis not in ("power", "chebyshev"):
            raise ConfigError(f"unknown basis {self.basis!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_learned(self) -> int:
        return self.relations.count(gb.LEARNED)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def fusion_weight_count(kind: str, c: int, k: int, r: int, f: int, f_hid: int) -> int:
    if kind == "c":
        return c * k * r * f
    if kind in ("s", "cp"):
        return f_hid * (c * k * r + f)
    if kind == "pc":
        return r * f_hid * (c * k + f)
    raise ConfigError(f"unknown fusion {kind!r}")


def fusion_bias_count(kind: str, r: int, f: int, f_hid: int) -> int:
    if kind == "c":
        return f
    if kind == "cp":
        return f_hid + f
    return r * f_hid + f


def _layer_shapes(cfg: ModelConfig, i: int, c_in: int, f_out: int) -> dict[str, tuple[int, ...]]:
    ck, r, h = c_in * cfg.khops, cfg.n_relations, cfg.f_hid
    p = f"layer{i}."
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.fusion == "c":
        shapes[p + "theta"] = (ck * r, f_out)
        shapes[p + "theta_b"] = (f_out,)
    elif cfg.fusion in ("s", "pc"):
        for j in range(r):
            shapes[p + f"f{j}"] = (ck, h)
            shapes[p + f"f{j}_b"] = (h,)
        width = h if cfg.fusion == "s" else r * h
        shapes[p + "theta"] = (width, f_out)
        shapes[p + "theta_b"] = (f_out,)
    else:
        shapes[p + "cp1"] = (ck * r, h)
        shapes[p + "cp1_b"] = (h,)
        shapes[p + "cp2"] = (h, f_out)
        shapes[p + "cp2_b"] = (f_out,)
    if cfg.regularizer == "batchnorm":
        shapes[p + "bn_gamma"] = (f_out,)
        shapes[p + "bn_beta"] = (f_out,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor's shape, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.n_learned:
        shapes["edge.w1"] = (2, cfg.edge_hidden)
        shapes["edge.b1"] = (cfg.edge_hidden,)
        shapes["edge.w2"] = (cfg.edge_hidden, cfg.n_learned)
        shapes["edge.b2"] = (cfg.n_learned,)
    c_in = cfg.in_features
    for i, f in enumerate(cfg.widths):
        shapes.update(_layer_shapes(cfg, i, c_in, f))
        c_in = f
    shapes["head.w"] = (c_in, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    total = 0
    c_in = cfg.in_features
    r = cfg.n_relations
    for f in cfg.widths:
        total += fusion_weight_count(cfg.fusion, c_in, cfg.khops, r, f, cfg.f_hid)
        total += fusion_bias_count(cfg.fusion, r, f, cfg.f_hid)
        if cfg.regularizer == "batchnorm":
            total += 2 * f
        c_in = f
    total += c_in * cfg.n_classes + cfg.n_classes
    if cfg.n_learned:
        h, l = cfg.edge_hidden, cfg.n_learned
        total += 2 * h + h + h * l + l
    return total


@dataclass
class ModelParams:
    weights: dict[str, ad.Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.weights.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: ad.Tensor(t.data.copy(), True, k) for k, t in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray], dtype=None) -> "ModelParams":
        shapes = parameter_shapes(cfg)
        missing = [k for k in shapes if k not in arrays]
        if missing:
            raise DataFormatError(f"checkpoint lacks parameters {missing}")
        weights = {}
        for k, s in shapes.items():
            a = np.asarray(arrays[k], dtype=dtype)
            if a.shape != s:
                raise DataFormatError(f"parameter {k} has shape {a.shape}, expected {s}")
            weights[k] = ad.Tensor(a.copy(), True, k)
        buffers = {k: np.asarray(v, dtype=dtype).copy() for k, v in arrays.items() if k not in shapes}
        return cls(weights, buffers)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weight matrices, zero biases, unit/zero batch-norm affine."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("bn_gamma"):
            a = np.ones(shape, dtype=dtype)
        elif len(shape) == 2:
            a = ad.glorot_uniform(rng, shape[0], shape[1], dtype)
        else:
            a = np.zeros(shape, dtype=dtype)
        weights[name] = ad.Tensor(a, True, name)
    buffers = {}
    if cfg.regularizer == "batchnorm":
        for i, f in enumerate(cfg.widths):
            buffers[f"layer{i}.bn_mean"] = np.zeros(f, dtype=dtype)
            buffers[f"layer{i}.bn_var"] = np.ones(f, dtype=dtype)
    return ModelParams(weights, buffers)


# ---------------------------------------------------------------------------
# Learned edges
# ---------------------------------------------------------------------------


def edge_logits(offsets, weights: dict[str, ad.Tensor]) -> ad.Tensor:
    """Pre-softmax edge scores ``f(|offset|)`` with shape ``offsets.shape[:-1] + (L,)``."""
    x = np.abs(np.asarray(offsets))
    h = ad.relu(ad.add(ad.matmul(x, weights["edge.w1"]), weights["edge.b1"]))
    return ad.add(ad.matmul(h, weights["edge.w2"]), weights["edge.b2"])


def batch_neighbourhood(coords: np.ndarray, node_mask: np.ndarray, fraction: float) -> np.ndarray:
    """``(B, N, N)`` neighbourhood masks; padded rows keep only their self entry."""
    b, n = node_mask.shape
    out = np.zeros((b, n, n), dtype=bool)
    idx = np.arange(n)
    out[:, idx, idx] = True
    for i in range(b):
        valid = np.flatnonzero(node_mask[i])
        sub = gb.learned_neighbourhood(coords[i, valid], fraction)
        out[i][np.ix_(valid, valid)] = sub
    return out


def predict_edges(coords, node_mask, weights: dict[str, ad.Tensor], fraction: float = 0.2,
                  neighbourhood: np.ndarray | None = None) -> list[ad.Tensor]:
    """L row-stochastic adjacencies over each node's nearest neighbourhood.

    ``coords`` is ``(B, N, 2)`` (or ``(N, 2)`` for a single graph, in which
    case ``node_mask`` may be None). Entries outside the neighbourhood are 0.
    """
    coords = np.asarray(coords)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
        node_mask = np.ones(coords.shape[:2], bool) if node_mask is None else np.asarray(node_mask)[None]
    if fraction <= 0:
        raise ConfigError(f"neighbourhood fraction must be > 0, got {fraction}")
    if neighbourhood is None:
        neighbourhood = batch_neighbourhood(coords, np.asarray(node_mask, bool), fraction)
    diff = coords[:, :, None, :] - coords[:, None, :, :]
    logits = edge_logits(diff, weights)
    n_heads = logits.shape[-1]
    out = [ad.masked_softmax(ad.index(logits, (Ellipsis, l)), neighbourhood, axis=-1) for l in range(n_heads)]
    if single:
        out = [ad.index(a, 0) for a in out]
    return out


# ---------------------------------------------------------------------------
# Propagation and fusion
# ---------------------------------------------------------------------------


def relation_operators(cfg: ModelConfig, adjacency: dict[str, np.ndarray], learned: list[ad.Tensor], dtype):
    """One propagation operator per relation, in ``cfg.relations`` order."""
    ops = []
    it = iter(learned)
    cache: dict[str, np.ndarray] = {}
    for tag in cfg.relations:
        if tag == gb.LEARNED:
            a = next(it)
            if cfg.basis == "chebyshev":
                a = ad.mul(a, -1.0)  # rows sum to 1, so D^-1/2 A D^-1/2 = A
            elif cfg.normalize_learned:
                n = a.shape[-1]
                a = ad.mul(ad.add(a, np.eye(n, dtype=dtype)), 0.5)  # degrees are exactly 2
            ops.append(a)
        else:
            if tag not in cache:
                raw = adjacency[tag]
                op = gb.chebyshev_operator(raw) if cfg.basis == "chebyshev" else gb.normalize_adjacency(raw)
                cache[tag] = op.astype(dtype, copy=False)
            ops.append(cache[tag])
    return ops


def relation_features(operators, x, k: int, basis: str = "power") -> list[list[ad.Tensor]]:
    fn = gb.chebyshev_basis if basis == "chebyshev" else gb.khop_basis
    return [fn(op, x, k) for op in operators]


def _linear(x, weights, name):
    return ad.add(ad.matmul(x, weights[name]), weights[name + "_b"])


def fuse(bases: list[list[ad.Tensor]], kind: str, weights: dict[str, ad.Tensor], prefix: str = "") -> ad.Tensor:
    if not bases:
        raise ConfigError("fuse needs at least one relation")
    per_rel = [ad.concat(b, axis=-1) for b in bases]
    try:
        if kind == "c":
            return _linear(ad.concat(per_rel, axis=-1), weights, prefix + "theta")
        if kind == "cp":
            h = ad.relu(_linear(ad.concat(per_rel, axis=-1), weights, prefix + "cp1"))
            return _linear(h, weights, prefix + "cp2")
        if kind == "s":
            z = None
            for j, xr in enumerate(per_rel):
                zr = ad.tanh(_linear(xr, weights, prefix + f"f{j}"))
                z = zr if z is None else ad.add(z, zr)
            return _linear(z, weights, prefix + "theta")
        if kind == "pc":
            zs = [ad.tanh(_linear(xr, weights, prefix + f"f{j}")) for j, xr in enumerate(per_rel)]
            return _linear(ad.concat(zs, axis=-1), weights, prefix + "theta")
    except (KeyError, ad.DimensionError) as exc:
        raise ConfigError(f"fusion {kind!r} does not match the given parameters: {exc}") from exc
    raise ConfigError(f"unknown fusion {kind!r}")


def model_forward(
    params: ModelParams,
    cfg: ModelConfig,
    features,
    node_mask,
    adjacency: dict[str, np.ndarray],
    coords=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    neighbourhood: np.ndarray | None = None,
) -> ad.Tensor:
    """Logits ``(B, n_classes)`` for a padded batch.

    ``adjacency`` maps relation tags to raw ``(B, N, N)`` matrices; learned
    relations are predicted from ``coords`` once and reused by every layer.
    """
    x = np.asarray(features)
    if x.ndim != 3 or x.shape[0] == 0:
        raise UsageError(f"expected a non-empty (B, N, C) batch, got shape {x.shape}")
    mask = np.asarray(node_mask, dtype=bool)
    w = params.weights
    learned = []
    if cfg.n_learned:
        learned = predict_edges(coords, mask, w, cfg.neighbourhood, neighbourhood)
    ops = relation_operators(cfg, adjacency, learned, x.dtype)
    h = x
    for i in range(len(cfg.widths)):
        p = f"layer{i}."
        bases = relation_features(ops, h, cfg.khops, cfg.basis)
        h = ad.relu(fuse(bases, cfg.fusion, w, p))
        if cfg.regularizer == "batchnorm":
            stats = ad.RunningStats(params.buffers[p + "bn_mean"], params.buffers[p + "bn_var"])
            h = ad.batch_norm(h, mask, w[p + "bn_gamma"], w[p + "bn_beta"], stats, training)
    pooled = ad.masked_max_pool(h, mask)
    if cfg.regularizer == "dropout":
        pooled = ad.dropout(pooled, cfg.dropout, training, rng)
    return ad.add(ad.matmul(pooled, w["head.w"]), w["head.b"])


def forward_batch(params: ModelParams, cfg: ModelConfig, batch, training=False, rng=None) -> ad.Tensor:
    return model_forward(
        params, cfg, batch.features, batch.mask, batch.adjacency, batch.coords, training, rng,
        getattr(batch, "neighbourhood", None),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"MGCN"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], digest: bytes) -> None:
    """Write ``MGCN | u32 version | 32-byte digest | records``.

    Each record is ``u32 name length, name, u32 rank, u64 extents, f64 values``,
    all little-endian.
    """
    if len(digest) != 32:
        raise UsageError("config digest must be 32 bytes")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest)
        for name, a in arrays.items():
            a = np.asarray(a)
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    digest = data[8:40]
    pos = 40
    arrays = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = math.prod(shape)
            if pos + 8 * count > len(data):
                raise DataFormatError(f"checkpoint truncated inside {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise DataFormatError(f"checkpoint truncated: {exc}") from exc
    return digest, arrays
