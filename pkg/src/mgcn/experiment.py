"""Experiment configuration, training, evaluation, filter export and the sparsity sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import data as D
from . import graphbuild as gb
from . import model as M
from .errors import ConfigError, NumericError, UsageError

log = logging.getLogger("mgcn")

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "seconds"]

SCHEDULES = {
    "mnist": {"epochs": 30, "decay_epochs": [20, 25], "regularizer": "dropout"},
    "cifar10": {"epochs": 50, "decay_epochs": [35, 45], "regularizer": "batchnorm"},
}


def _int_list(s: str) -> list[int]:
    return [] if s.strip() == "[]" else [int(v) for v in s.split(",") if v.strip()]


def _float_list(s: str) -> list[float]:
    return [] if s.strip() == "[]" else [float(v) for v in s.split(",") if v.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# field name -> (parser, optional)
_PARSERS = {
    "dataset": (str, False),
    "data_dir": (str, False),
    "cache_dir": (str, False),
    "out": (str, False),
    "relations": (str, False),
    "fusion": (str, False),
    "khops": (int, False),
    "basis": (str, False),
    "low_res": (_bool, False),
    "scales": (_int_list, True),
    "sigma": (float, False),
    "compactness": (float, False),
    "normalize_learned": (_bool, False),
    "regularizer": (str, True),
    "dropout": (float, False),
    "f_hid": (int, False),
    "widths": (_int_list, False),
    "lr": (float, False),
    "weight_decay": (float, False),
    "batch_size": (int, False),
    "epochs": (int, True),
    "decay_epochs": (_int_list, True),
    "decay_factor": (float, False),
    "seeds": (_int_list, False),
    "threads": (int, False),
    "precision": (str, False),
    "train_limit": (int, True),
    "test_limit": (int, True),
    "workers": (int, False),
    "keep_fractions": (_float_list, False),
    "sweep_mode": (str, False),
    "grid_resolution": (int, False),
}


@dataclass
class ExperimentConfig:
    """Every knob of one run. ``None`` means "use the dataset recipe"."""

    dataset: str = "mnist"
    data_dir: str = ""  # defaults to data/<dataset>
    cache_dir: str = "cache"
    out: str = "runs/default"
    relations: str = "sp"
    fusion: str = "c"
    khops: int = 1
    basis: str = "power"
    low_res: bool = False
    scales: list[int] | None = None
    sigma: float = 0.1
    compactness: float = 10.0
    normalize_learned: bool = False
    regularizer: str | None = None
    dropout: float = 0.5
    f_hid: int = 64
    widths: list[int] = field(default_factory=lambda: [32, 64, 512])
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int | None = None
    decay_epochs: list[int] | None = None
    decay_factor: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [0])
    threads: int = 1
    precision: str = "float32"
    train_limit: int | None = None
    test_limit: int | None = None
    workers: int = 1
    keep_fractions: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.2, 0.1, 0.05])
    sweep_mode: str = "reeval"
    grid_resolution: int = 65

    def __post_init__(self):
        self.validate()

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "none"
            elif isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, list):
                s = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v) or "[]"
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_pairs(cls, pairs: dict[str, str]) -> dict:
        out = {}
        for key, raw in pairs.items():
            if key not in _PARSERS:
                raise ConfigError(f"unknown config key {key!r}")
            parse, optional = _PARSERS[key]
            raw = raw.strip()
            if optional and raw.lower() in ("none", ""):
                out[key] = None
                continue
            try:
                out[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        return out

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n} is not key = value: {line!r}")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v
        values = cls.parse_pairs(pairs)
        values.update(overrides or {})
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    # -- resolution --------------------------------------------------------

    def validate(self) -> None:
        if self.dataset not in D.RECIPES:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        gb.parse_relations(self.relations)
        if self.fusion not in M.FUSIONS + ("all",):
            raise ConfigError(f"fusion must be one of {M.FUSIONS + ('all',)}, got {self.fusion!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.sweep_mode not in ("reeval", "retrain"):
            raise ConfigError(f"sweep_mode must be reeval or retrain, got {self.sweep_mode!r}")
        if self.batch_size < 1 or self.threads < 1 or self.workers < 1:
            raise ConfigError("batch_size, threads and workers must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(d >= self.n_epochs for d in self.schedule_decays) and self.n_epochs > 0:
            raise ConfigError(f"decay epochs {self.schedule_decays} must be < total epochs {self.n_epochs}")
        if self.low_res and gb.HIERARCHICAL in gb.parse_relations(self.relations):
            raise ConfigError("hierarchical relations need superpixels; drop --low-res")
        if any(not 0 < k <= 1 for k in self.keep_fractions):
            raise ConfigError("keep fractions must lie in (0, 1]")
        if self.grid_resolution < 2:
            raise ConfigError("grid_resolution must be >= 2")

    @property
    def n_epochs(self) -> int:
        return SCHEDULES[self.dataset]["epochs"] if self.epochs is None else self.epochs

    @property
    def schedule_decays(self) -> list[int]:
        return SCHEDULES[self.dataset]["decay_epochs"] if self.decay_epochs is None else self.decay_epochs

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def resolved_scales(self) -> list[int]:
        """Full recipe when hierarchical edges are used, otherwise the finest level only."""
        if self.scales is not None:
            return list(self.scales)
        recipe = D.RECIPES[self.dataset]["scales"]
        if gb.HIERARCHICAL in gb.parse_relations(self.relations):
            return list(recipe)
        return recipe[:1]

    def dataset_spec(self, split: str) -> D.DatasetSpec:
        return D.DatasetSpec(
            dataset=self.dataset,
            split=split,
            source=self.data_dir or f"data/{self.dataset}",
            scales=self.resolved_scales(),
            relations=self.relations,
            sigma=self.sigma,
            cache_dir=self.cache_dir,
            low_res=self.low_res,
            compactness=self.compactness,
            limit=self.train_limit if split == "train" else self.test_limit,
        )

    def model_config(self, fusion: str | None = None) -> M.ModelConfig:
        fusion = fusion or self.fusion
        if fusion == "all":
            raise UsageError("resolve fusion=all into single fusions first")
        return M.ModelConfig(
            relations=self.relations,
            fusion=fusion,
            khops=self.khops,
            widths=tuple(self.widths),
            in_features=D.RECIPES[self.dataset]["channels"] + 2,
            n_classes=10,
            regularizer=self.regularizer or SCHEDULES[self.dataset]["regularizer"],
            dropout=self.dropout,
            f_hid=self.f_hid,
            neighbourhood=0.2,
            basis=self.basis,
            normalize_learned=self.normalize_learned,
        )

    def learning_rate(self, epoch: int) -> float:
        """Rate for 1-based ``epoch``; decayed once per passed decay epoch."""
        drops = sum(1 for d in self.schedule_decays if epoch > d)
        return self.lr * self.decay_factor**drops


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_caches(cfg: ExperimentConfig, splits=("train", "test")) -> dict[str, D.GraphCache]:
    caches = {}
    for split in splits:
        spec = cfg.dataset_spec(split)
        cache, hit = D.precompute_graphs(spec, workers=cfg.workers)
        log.info("%s cache %s (%d records, %s)", split, cache.path, len(cache), "reused" if hit else "built")
        caches[split] = cache
    return caches


def _sparsifier(keep: float | None):
    if keep is None or keep >= 1.0:
        return None

    def transform(tag, a):
        if tag != gb.SPATIAL:
            return a
        return gb.knn_sparsify(a, keep_fraction=keep)[0]

    return transform


def evaluate(params: M.ModelParams, mcfg: M.ModelConfig, cache, batch_size: int, dtype, transform=None):
    """Loss, accuracy, per-class accuracy and logits over a whole cache (stored order)."""
    logits, labels = [], []
    for batch in D.batch_iter(cache, batch_size, None, dtype, transform):
        logits.append(M.forward_batch(params, mcfg, batch, training=False).data)
        labels.append(batch.labels)
    logits = np.concatenate(logits)
    labels = np.concatenate(labels)
    loss = float(ad.softmax_cross_entropy(logits.astype(np.float64), labels).data)
    pred = logits.argmax(axis=1)
    per_class = {}
    for c in range(logits.shape[1]):
        sel = labels == c
        per_class[c] = float((pred[sel] == c).mean()) if sel.any() else float("nan")
    return {"loss": loss, "accuracy": float((pred == labels).mean()), "per_class": per_class,
            "logits": logits, "labels": labels}


def _write_metrics(path: Path, rows: list[list]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_one(cfg: ExperimentConfig, mcfg: M.ModelConfig, seed: int, caches, out: Path, transform=None) -> dict:
    """Train one seed; writes ``metrics.csv``, ``model.ckpt`` and ``summary.json`` under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    dtype = cfg.dtype
    params = M.init_params(mcfg, seed, dtype)
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_rng = np.random.default_rng([seed, 1])
    rows = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.n_epochs + 1):
        state.lr = cfg.learning_rate(epoch)
        shuffle = int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
        total_loss, correct, seen = 0.0, 0, 0
        for step, batch in enumerate(D.batch_iter(caches["train"], cfg.batch_size, shuffle, dtype, transform)):
            with ad.Tape() as tape:
                logits = M.forward_batch(params, mcfg, batch, training=True, rng=drop_rng)
                loss = ad.softmax_cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            grads = ad.backward(tape, loss, params.weights)
            params.weights, _ = ad.adam_step(params.weights, grads, state)
            total_loss += value * len(batch)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            seen += len(batch)
        rows.append([epoch, "train", f"{total_loss / seen:.6f}", f"{correct / seen:.6f}", f"{time.perf_counter() - t0:.2f}"])
        log.info("seed %d epoch %d/%d lr %.0e loss %.4f acc %.4f", seed, epoch, cfg.n_epochs, state.lr,
                 total_loss / seen, correct / seen)
        _write_metrics(out / "metrics.csv", rows)
    res = evaluate(params, mcfg, caches["test"], cfg.batch_size, dtype, transform)
    rows.append([cfg.n_epochs, "test", f"{res['loss']:.6f}", f"{res['accuracy']:.6f}", f"{time.perf_counter() - t0:.2f}"])
    _write_metrics(out / "metrics.csv", rows)
    M.save_checkpoint(out / "model.ckpt", params.arrays(), mcfg.digest())
    summary = {
        "seed": seed,
        "fusion": mcfg.fusion,
        "test_accuracy": res["accuracy"],
        "test_loss": res["loss"],
        "per_class_accuracy": res["per_class"],
        "param_count": M.param_count(mcfg),
        "train_records": len(caches["train"]),
        "test_records": len(caches["test"]),
        "seconds": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    log.info("seed %d test accuracy %.4f", seed, res["accuracy"])
    return summary


def run_train(cfg: ExperimentConfig) -> dict:
    """Train every (fusion, seed) pair; returns the aggregate summary."""
    out = Path(cfg.out)
    with run_lock(out), threadpool_limits(cfg.threads):
        (out / "config.txt").write_text(cfg.to_text())
        caches = load_caches(cfg)
        fusions = list(M.FUSIONS) if cfg.fusion == "all" else [cfg.fusion]
        report = {"runs": []}
        for fusion in fusions:
            mcfg = cfg.model_config(fusion)
            base = out / f"fusion-{fusion}" if len(fusions) > 1 else out
            runs = []
            for seed in cfg.seeds:
                target = base / f"seed{seed}" if len(cfg.seeds) > 1 else base
                runs.append(train_one(cfg, mcfg, seed, caches, target))
            accs = np.array([r["test_accuracy"] for r in runs])
            entry = {
                "fusion": fusion,
                "seeds": list(cfg.seeds),
                "accuracies": accs.tolist(),
                "mean": float(accs.mean()),
                "std": float(accs.std()),
                "param_count": M.param_count(mcfg),
            }
            report["runs"].append(entry)
            log.info("fusion %s: test accuracy %.2f ± %.2f %%", fusion, 100 * entry["mean"], 100 * entry["std"])
        (out / "report.json").write_text(json.dumps(report, indent=1))
        return report


def load_model(cfg: ExperimentConfig, checkpoint) -> tuple[M.ModelConfig, M.ModelParams]:
    digest, arrays = M.load_checkpoint(checkpoint)
    if cfg.fusion == "all":
        raise UsageError("evaluate one fusion at a time")
    mcfg = cfg.model_config()
    if digest != mcfg.digest():
        raise ConfigError(f"checkpoint {checkpoint} was trained with a different model configuration")
    return mcfg, M.ModelParams.from_arrays(mcfg, arrays, cfg.dtype)


def run_eval(cfg: ExperimentConfig, checkpoint, split: str = "test", dump_logits=None) -> dict:
    with threadpool_limits(cfg.threads):
        mcfg, params = load_model(cfg, checkpoint)
        cache = load_caches(cfg, (split,))[split]
        res = evaluate(params, mcfg, cache, cfg.batch_size, cfg.dtype)
    if dump_logits:
        np.save(dump_logits, res["logits"])
    return {k: v for k, v in res.items() if k not in ("logits", "labels")} | {"split": split, "records": len(cache)}


# ---------------------------------------------------------------------------
# Filters and sparsification
# ---------------------------------------------------------------------------


def offset_grid(resolution: int) -> np.ndarray:
    """``(res, res, 2)`` offsets spanning [-0.5, 0.5]^2, exactly mirror-symmetric."""
    axis = (np.arange(resolution) - (resolution - 1) / 2.0) / (resolution - 1)
    dy, dx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([dy, dx], axis=-1)


def write_pgm(path, values: np.ndarray) -> None:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def export_edge_filters(cfg: ExperimentConfig, checkpoint, out=None) -> dict:
    mcfg, params = load_model(cfg, checkpoint)
    if mcfg.n_learned == 0:
        raise UsageError("the model has no learned relations, so there are no edge filters")
    out = Path(out or Path(cfg.out) / "filters")
    out.mkdir(parents=True, exist_ok=True)
    grid = offset_grid(cfg.grid_resolution)
    maps = M.edge_logits(grid, params.weights).data
    files = []
    for l in range(maps.shape[-1]):
        np.save(out / f"edge_{l}.npy", maps[..., l])
        write_pgm(out / f"edge_{l}.pgm", maps[..., l])
        files.append(f"edge_{l}")
    ref = gb.gaussian_reference(grid, cfg.sigma)
    np.save(out / "spatial_reference.npy", ref)
    write_pgm(out / "spatial_reference.pgm", ref)
    np.save(out / "offsets.npy", grid)
    return {"heads": maps.shape[-1], "files": files, "dir": str(out)}


def sparsity_sweep(cfg: ExperimentConfig, checkpoint=None) -> list[dict]:
    """Accuracy against spatial-graph density for each keep fraction.

    ``reeval`` sparsifies test graphs for a trained checkpoint; ``retrain``
    trains a fresh model per fraction on sparsified graphs.
    """
    out = Path(cfg.out)
    rows = []
    with threadpool_limits(cfg.threads):
        if cfg.sweep_mode == "reeval":
            if checkpoint is None:
                raise UsageError("re-evaluation sweep needs --checkpoint")
            mcfg, params = load_model(cfg, checkpoint)
            caches = load_caches(cfg, ("test",))
        else:
            mcfg = cfg.model_config()
            caches = load_caches(cfg)
        test = caches["test"]
        for keep in cfg.keep_fractions:
            density = _mean_density(test, keep)
            transform = _sparsifier(keep)
            if cfg.sweep_mode == "reeval":
                acc = evaluate(params, mcfg, test, cfg.batch_size, cfg.dtype, transform)["accuracy"]
            else:
                acc = train_one(cfg, mcfg, cfg.seeds[0], caches, out / f"keep-{keep:g}", transform)["test_accuracy"]
            rows.append({"keep_fraction": keep, "density": density, "accuracy": acc})
            log.info("keep %.3f density %.2f%% accuracy %.4f", keep, density, acc)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["keep_fraction", "density", "accuracy"])
        w.writeheader()
        w.writerows(rows)
    return rows


def _mean_density(cache, keep: float) -> float:
    """Mean over graphs of the spatial relation's nonzero percentage after sparsification."""
    if gb.SPATIAL not in cache.tags:
        raise UsageError("sparsity sweep needs a spatial relation")
    total = 0.0
    for i in range(len(cache)):
        a = cache.record(i).adjacency[gb.SPATIAL]
        if keep >= 1.0:
            total += 100.0 * np.count_nonzero(a) / a.size
        else:
            total += gb.knn_sparsify(a, keep_fraction=keep)[1]
    return total / len(cache)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
