"""Sharded data-parallel training over a simulated world, baseline vs TAGC exchange."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from tagc.collectives import World
from tagc.hook import CompressionConfig, classify_layers, make_shards, tagc_reduce_shard
from tagc.trainer.model import TinyGPT, TinyModelConfig, build_model

log = logging.getLogger(__name__)

PATHS = ("baseline", "tagc")
OPTIMIZERS = ("sgd", "adamw")


def load_corpus() -> bytes:
    return resources.files("tagc.data").joinpath("corpus.txt").read_bytes()


def corpus_sha256(data: bytes | None = None) -> str:
    return hashlib.sha256(load_corpus() if data is None else data).hexdigest()


class CharDataset:
    """Byte-level tokens; the last ``val_fraction`` of the text is held out."""

    def __init__(self, data: bytes, val_fraction: float = 0.1):
        tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        cut = int(tokens.size * (1 - val_fraction))
        self.train = tokens[:cut]
        self.val = tokens[cut:]

    @staticmethod
    def _windows(tokens: np.ndarray, starts: np.ndarray, seq_len: int):
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        block = tokens[idx]
        return block[:, :-1], block[:, 1:]

    def train_batch(self, rng: np.random.Generator, batch: int, seq_len: int):
        starts = rng.integers(0, self.train.size - seq_len - 1, size=batch)
        return self._windows(self.train, starts, seq_len)

    def val_batches(self, seed: int, count: int, batch: int, seq_len: int):
        rng = np.random.default_rng(seed)
        return [
            self._windows(self.val, rng.integers(0, self.val.size - seq_len - 1, size=batch), seq_len)
            for _ in range(count)
        ]


@dataclass
class TrainRun:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8  # sequences per step, split evenly across ranks
    seq_len: int = 64
    lr: float = 0.5
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    path: str = "baseline"
    compression: CompressionConfig | None = None
    world_size: int = 2
    mode: str = "sequential"
    eval_every: int = 100
    eval_batches: int = 4
    model: TinyModelConfig = field(default_factory=TinyModelConfig)

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}, got {self.path!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.path == "tagc" and self.compression is None:
            raise ValueError("the tagc path needs a compression config")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive")
        if self.batch_size % self.world_size:
            raise ValueError(f"batch_size {self.batch_size} not divisible by world_size {self.world_size}")
        if self.seq_len > self.model.context:
            raise ValueError("seq_len exceeds the model context")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["compression"] = None if self.compression is None else self.compression.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRun":
        d = dict(d)
        if d.get("compression") is not None:
            d["compression"] = CompressionConfig(**d["compression"])
        if "model" in d:
            d["model"] = TinyModelConfig(**d["model"])
        return cls(**d)


class _Optimizer:
    """Per-shard optimizer state, held only by the shard owner."""

    def __init__(self, run: TrainRun, size: int):
        self.run = run
        self.t = 0
        if run.optimizer == "adamw":
            self.v = np.zeros(size, dtype=np.float32)

    def step(self, param: np.ndarray, grad: np.ndarray):
        run = self.run
        lr = np.float32(run.lr)
        if run.optimizer == "sgd":
            param -= lr * grad
            return
        # momentum-free: the raw gradient over a bias-corrected RMS, decoupled decay
        b2, eps = np.float32(0.999), np.float32(1e-8)
        self.t += 1
        self.v = b2 * self.v + (1 - b2) * grad * grad
        vhat = self.v / np.float32(1 - 0.999**self.t)
        param -= lr * (grad / (np.sqrt(vhat) + eps) + np.float32(run.weight_decay) * param)


def _mean_loss(model: TinyGPT, batches) -> float:
    return float(np.mean([model.loss(x, y) for x, y in batches]))


def run_experiment(run: TrainRun, world: World | None = None, data: bytes | None = None) -> dict:
    """Train for ``run.steps`` steps and return loss curves, ledger and peel statistics.

    Every rank starts from the same initialization and sees a distinct slice of
    each global batch. Gradients are summed per shard to the shard owner
    (raw Reduce-Scatter on the baseline path, the TAGC hook otherwise),
    averaged, applied by the owner's optimizer, and the updated shards are
    re-broadcast with All-Gather.
    """
    own_world = world is None
    world = World(run.world_size, run.mode) if own_world else world
    if world.world_size != run.world_size:
        raise ValueError("world size does not match the run")
    W = world.world_size
    try:
        return _train(run, world, W, CharDataset(load_corpus() if data is None else data))
    finally:
        if own_world:
            world.close()


def _train(run: TrainRun, world: World, W: int, dataset: CharDataset) -> dict:
    cfg = run.model
    base = build_model(cfg, run.seed)
    n = base.flat.size
    replicas = [TinyGPT(cfg, base.flat.copy()) for _ in range(W)]
    comp = run.compression
    policy = comp.policy if (run.path == "tagc") else "none"
    flags = classify_layers(base.layers, policy, comp.include_out_proj if comp else True)
    shards = make_shards(base.layers, flags, W, min_segment=comp.min_segment if comp else 1024)
    width = max(len(s) for s in shards)
    optimizers = {s.shard_id: _Optimizer(run, len(s)) for s in shards}
    accs = {s.shard_id: [np.zeros(len(s), dtype=np.float32) for _ in range(W)] for s in shards}

    rng = np.random.default_rng(run.seed + 1)
    val = dataset.val_batches(run.seed + 2, run.eval_batches, run.batch_size, run.seq_len)
    per_rank = run.batch_size // W
    train_curve: list[tuple[int, float]] = []
    val_curve: list[tuple[int, float]] = []
    seg_stats = []
    diverged = None

    for step in range(run.steps):
        x, y = dataset.train_batch(rng, run.batch_size, run.seq_len)
        xs = [x[r * per_rank : (r + 1) * per_rank] for r in range(W)]
        ys = [y[r * per_rank : (r + 1) * per_rank] for r in range(W)]
        results = world.map(lambda r, m, xb, yb: m.loss_and_gradients(xb, yb), replicas, xs, ys)
        losses = [loss for loss, _ in results]
        grads = [g for _, g in results]
        train_loss = math.fsum(losses) / W
        if not math.isfinite(train_loss):
            diverged = {"step": step, "losses": losses}
            log.error("loss diverged at step %d: %s", step, losses)
            break
        train_curve.append((step, train_loss))

        if run.path == "baseline":
            padded = [np.concatenate([g, np.zeros(width * W - n, np.float32)]) for g in grads]
            summed = world.reduce_scatter(padded, tag="baseline", params=n)
            owned = {s.shard_id: summed[s.owner][: len(s)] for s in shards}
        else:
            owned = {}
            for s in shards:
                res = tagc_reduce_shard(s, [g[s.start : s.stop] for g in grads], accs[s.shard_id], comp, world)
                accs[s.shard_id] = res.accumulators
                owned[s.shard_id] = res.owner_gradient
                seg_stats.extend(st for st in res.stats if st.path == "tagc")

        slices = []
        for s in shards:
            param = replicas[s.owner].flat[s.start : s.stop]
            optimizers[s.shard_id].step(param, owned[s.shard_id] / np.float32(W))
            slices.append(np.concatenate([param, np.zeros(width - len(s), np.float32)]))
        gathered = world.all_gather(slices, tag="params", params=n)
        for r in range(W):
            full = gathered[r].reshape(W, width)
            for s in shards:
                replicas[r].flat[s.start : s.stop] = full[s.shard_id, : len(s)]

        if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
            val_curve.append((step + 1, _mean_loss(replicas[0], val)))

    support = sum(st.support for st in seg_stats)
    return {
        "run": run.to_dict(),
        "parameters": n,
        "train_loss": train_curve,
        "val_loss": val_curve,
        "final_val_loss": val_curve[-1][1] if val_curve else None,
        "diverged": diverged,
        "ledger": world.ledger.to_rows(),
        "peel": {
            "segments": len(seg_stats),
            "mean_peeled_fraction": float(np.mean([st.peeled_fraction for st in seg_stats])) if seg_stats else 1.0,
            "unresolved": int(sum(st.unresolved for st in seg_stats)),
            "index_collision_rate": (sum(st.lost + st.spurious for st in seg_stats) / support) if support else 0.0,
        },
        "final_parameters_sha256": hashlib.sha256(replicas[0].flat.tobytes()).hexdigest(),
    }


def loss_csv(metrics: dict) -> str:
    val = dict(metrics["val_loss"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "train_loss", "val_loss"])
    for step, loss in metrics["train_loss"]:
        v = val.get(step + 1)
        writer.writerow([step + 1, repr(loss), "" if v is None else repr(v)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Synthetic gradients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGradientStream:
    """Log-normal magnitudes with fair random signs, reproducible from ``seed``."""

    n: int
    mu: float = -6.0
    sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def draws(self):
        rng = np.random.default_rng(self.seed)
        while True:
            mags = rng.lognormal(self.mu, self.sigma, size=self.n)
            signs = np.where(rng.random(self.n) < 0.5, -1.0, 1.0)
            yield (signs * mags).astype(np.float32)

    def take(self, count: int) -> list[np.ndarray]:
        it = self.draws()
        return [next(it) for _ in range(count)]


def synthetic_stream(spec: SyntheticGradientStream):
    return spec.draws()
