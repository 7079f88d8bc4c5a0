"""Shared builders for model-level tests."""

import numpy as np

from mgcn import autodiff as ad
from mgcn import graphbuild as gb
from mgcn import model as M
from mgcn.data import GraphRecord, collate


def random_record(rng, n, tags, label=0, c=1):
    coords = rng.random((n, 2))
    feats = np.concatenate([rng.random((n, c)), coords], axis=1)
    adj = {}
    for t in tags:
        if t == gb.SPATIAL:
            adj[t] = gb.spatial_adjacency(coords, 0.3)
        else:
            a = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
            adj[t] = a + a.T
    return GraphRecord(label, feats, coords, np.zeros(n, dtype=np.int64), adj)


def tiny_batch(rng, cfg, sizes=(6, 4, 5)):
    tags = [t for t in dict.fromkeys(cfg.relations) if t != gb.LEARNED]
    recs = [random_record(rng, n, tags, label=i % cfg.n_classes, c=cfg.in_features - 2) for i, n in enumerate(sizes)]
    return collate(recs)


def small_config(**kw):
    base = dict(widths=(4, 5, 6), f_hid=3, edge_hidden=4, n_classes=3, in_features=3)
    base.update(kw)
    return M.ModelConfig(**base)


def model_gradcheck(cfg, params, batch, step=1e-5, training=True):
    """Relative error per parameter tensor between tape and central differences."""

    def loss_value():
        rng = np.random.default_rng(123)  # same dropout mask every call
        bufs = {k: v.copy() for k, v in params.buffers.items()}
        probe = M.ModelParams(params.weights, bufs)
        logits = M.forward_batch(probe, cfg, batch, training, rng)
        return ad.softmax_cross_entropy(logits, batch.labels)

    with ad.Tape() as tape:
        loss = loss_value()
    grads = ad.backward(tape, loss, params.weights)
    errs = {}
    for name, t in params.weights.items():
        numeric = ad.numerical_gradient(lambda: float(loss_value().data), t.data, step)
        errs[name] = ad.relative_error(grads[name], numeric)
    return errs


def plain_gcn_logits(weights, batch):
    """Reference 3-layer GCN written directly in numpy, one graph at a time."""
    out = []
    for b in range(len(batch)):
        n = int(batch.mask[b].sum())
        a = batch.adjacency[gb.SPATIAL][b, :n, :n] + np.eye(n)
        d = a.sum(axis=1) ** -0.5
        a_hat = d[:, None] * a * d[None, :]
        h = batch.features[b, :n]
        for i in range(3):
            h = np.maximum(a_hat @ h @ weights[f"layer{i}.theta"].data + weights[f"layer{i}.theta_b"].data, 0)
        out.append(h.max(axis=0) @ weights["head.w"].data + weights["head.b"].data)
    return np.stack(out)
