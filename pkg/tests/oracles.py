"""Slow scalar reference implementations used only by tests."""
from __future__ import annotations

from collections import deque

import numpy as np

from tagc.codec import row_hash_params

M64 = (1 << 64) - 1


def scalar_bucket(seed, row, p, m):
    a, b, _, _ = row_hash_params(seed, row)
    return ((((a * p + b) & M64) >> 32) * m) >> 32


def scalar_sign(seed, row, p):
    _, _, c, d = row_hash_params(seed, row)
    return -1.0 if ((c * p + d) & M64) >> 63 else 1.0


def scalar_compress(values, cfg):
    buckets = [[0.0] * cfg.buckets for _ in range(cfg.rows)]
    for r in range(cfg.rows):
        for p, v in enumerate(values):
            if v != 0:
                buckets[r][scalar_bucket(cfg.seed, r, p, cfg.buckets)] += scalar_sign(cfg.seed, r, p) * float(v)
    return np.array(buckets, dtype=np.float32)


def worklist_peel(presence, sketch):
    """Set-based FIFO peeler; returns (values dict, unresolved set)."""
    cfg = sketch.config
    rem = [[float(x) for x in row] for row in sketch.values]
    contrib = [[set() for _ in range(cfg.buckets)] for _ in range(cfg.rows)]
    where = {}
    for p in presence:
        p = int(p)
        where[p] = [scalar_bucket(cfg.seed, r, p, cfg.buckets) for r in range(cfg.rows)]
        for r, b in enumerate(where[p]):
            contrib[r][b].add(p)
    queue = deque((r, b) for r in range(cfg.rows) for b in range(cfg.buckets) if len(contrib[r][b]) == 1)
    out = {}
    while queue:
        r, b = queue.popleft()
        if len(contrib[r][b]) != 1:
            continue
        (p,) = contrib[r][b]
        v = scalar_sign(cfg.seed, r, p) * rem[r][b]
        out[p] = v
        for rr, bb in enumerate(where[p]):
            rem[rr][bb] -= scalar_sign(cfg.seed, rr, p) * v
            contrib[rr][bb].discard(p)
            if len(contrib[rr][bb]) == 1:
                queue.append((rr, bb))
    unresolved = {int(p) for p in presence} - set(out)
    return out, unresolved


def fold_sum(arrays):
    out = np.array(arrays[0], dtype=np.float32, copy=True)
    for a in arrays[1:]:
        out = out + np.asarray(a, dtype=np.float32)
    return out


def model_blocks(model):
    """Flat index ranges grouped by transformer block: embeddings, h0.., head."""
    blocks, offset = {}, 0
    for name, _, shape in model.shapes:
        size = int(np.prod(shape))
        if name.startswith("h"):
            key = name.split(".")[0]
        elif name in ("wte", "wpe"):
            key = "embeddings"
        else:
            key = "head"
        blocks.setdefault(key, []).append(np.arange(offset, offset + size))
        offset += size
    return {k: np.concatenate(v) for k, v in blocks.items()}


def finite_difference_check(model, ids, targets, coords=200, h=1e-3, seed=0, floor=1e-4):
    """Worst relative error per block: float32 autodiff vs float64 central differences."""
    _, grad = model.loss_and_gradients(ids, targets)
    base = model.flat.astype(np.float64)
    rng = np.random.default_rng(seed)
    worst = {}
    for key, idx in model_blocks(model).items():
        picks = rng.choice(idx, size=min(coords, idx.size), replace=False)
        errs = []
        for i in picks:
            up, down = base.copy(), base.copy()
            up[i] += h
            down[i] -= h
            fd = (model.loss(ids, targets, up) - model.loss(ids, targets, down)) / (2 * h)
            errs.append(abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), floor))
        worst[key] = (float(max(errs)), len(picks))
    return worst
