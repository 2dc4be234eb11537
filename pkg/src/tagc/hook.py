"""TAGC gradient exchange for one shard, plus the layer policy that picks what to compress.

Per compressed segment the exchange is:

1. add the rank's residual accumulator and sparsify to ``theta`` percent zeros,
2. build a local index of the surviving nonzeros and All-Reduce it,
3. sketch the local sparse gradient and Reduce the sketches to the shard owner,
4. on the owner, peel the summed sketch over the merged index support.

Segments that the policy leaves alone, or that are shorter than
``min_segment``, are summed as raw float32 with a Reduce to the owner.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tagc import codec
from tagc.codec import SketchConfig
from tagc.collectives import World
from tagc.sparsify import apply_accumulator, sparsify

# minimum sparsity (percent) for lossless peeling at each compression ratio
PEELING_MIN_THETA = {2: 80.0, 4: 90.0, 10: 98.75}
RATIOS = (1, 2, 4, 10)
POLICIES = ("all_layers", "non_attention_linear", "none")
LAYER_KINDS = (
    "embedding",
    "positional_embedding",
    "attention_qkv",
    "attention_out_proj",
    "feed_forward",
    "lm_head",
    "norm",
    "bias",
    "other",
)
NON_ATTENTION_LINEAR = {"embedding", "positional_embedding", "attention_out_proj", "feed_forward", "lm_head"}
MIN_SEGMENT = 1024


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionConfig:
    theta: float = 98.75
    ratio: int = 10
    index_width: int = 4
    policy: str = "non_attention_linear"
    seed: int = 0
    rows: int = codec.DEFAULT_ROWS
    include_out_proj: bool = True
    allow_estimation: bool = False
    min_segment: int = MIN_SEGMENT

    def __post_init__(self):
        if not 0 <= self.theta <= 100:
            raise ConfigError(f"theta must be within [0, 100], got {self.theta}")
        if self.ratio not in RATIOS:
            raise ConfigError(f"ratio must be one of {RATIOS}, got {self.ratio}")
        if self.index_width not in codec.INDEX_WIDTHS:
            raise ConfigError(f"index_width must be 1 or 4, got {self.index_width}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.rows < 1:
            raise ConfigError("rows must be >= 1")
        need = PEELING_MIN_THETA.get(self.ratio)
        if need is not None and self.theta < need and not self.allow_estimation:
            raise ConfigError(
                f"ratio {self.ratio}x needs theta >= {need} for lossless peeling "
                f"(got {self.theta}); set allow_estimation to override"
            )

    @property
    def bypass(self) -> bool:
        """Ratio 1 skips the codec: sparsified values travel as raw floats."""
        return self.ratio == 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    parameter_count: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r} for {self.name}")
        if self.parameter_count <= 0:
            raise ValueError(f"layer {self.name} has no parameters")


def classify_layers(
    layers: Sequence[LayerSpec], policy: str, include_out_proj: bool = True
) -> list[bool]:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    eligible = set(NON_ATTENTION_LINEAR)
    if not include_out_proj:
        eligible.discard("attention_out_proj")
    flags = []
    for layer in layers:
        if layer.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if policy == "all_layers":
            flags.append(True)
        elif policy == "none":
            flags.append(False)
        else:
            flags.append(layer.kind in eligible)
    return flags


def flagged_share(layers: Sequence[LayerSpec], flags: Sequence[bool]) -> float:
    total = sum(layer.parameter_count for layer in layers)
    return sum(layer.parameter_count for layer, f in zip(layers, flags) if f) / total


@dataclass(frozen=True)
class Segment:
    layer: str
    start: int  # global offsets into the flat parameter vector
    stop: int
    compress: bool

    def __len__(self):
        return self.stop - self.start


@dataclass(frozen=True)
class ShardSpec:
    shard_id: int
    owner: int
    start: int
    stop: int
    segments: tuple[Segment, ...]

    def __len__(self):
        return self.stop - self.start

    def local(self, seg: Segment) -> slice:
        return slice(seg.start - self.start, seg.stop - self.start)


def make_shards(
    layers: Sequence[LayerSpec],
    flags: Sequence[bool],
    world_size: int,
    num_shards: int | None = None,
    min_segment: int = MIN_SEGMENT,
) -> list[ShardSpec]:
    """Cut the flat parameter space into contiguous shards, owners round-robin.

    Shard boundaries are placed at equal parameter counts, so a layer may be
    split across shards; each piece becomes its own segment.
    """
    num_shards = world_size if num_shards is None else num_shards
    total = sum(layer.parameter_count for layer in layers)
    if num_shards < 1 or num_shards > total:
        raise ValueError(f"cannot cut {total} parameters into {num_shards} shards")
    bounds = [total * i // num_shards for i in range(num_shards + 1)]
    layer_ranges = []
    offset = 0
    for layer, flag in zip(layers, flags):
        layer_ranges.append((layer.name, offset, offset + layer.parameter_count, flag))
        offset += layer.parameter_count
    shards = []
    for sid in range(num_shards):
        lo, hi = bounds[sid], bounds[sid + 1]
        segs = []
        for name, a, b, flag in layer_ranges:
            s, e = max(a, lo), min(b, hi)
            if s < e:
                segs.append(Segment(name, s, e, bool(flag) and (e - s) >= min_segment))
        shards.append(ShardSpec(sid, sid % world_size, lo, hi, tuple(segs)))
    return shards


# --------------------------------------------------------------------------
# Exchange
# --------------------------------------------------------------------------


@dataclass
class SegmentStats:
    layer: str
    size: int
    path: str
    support: int = 0  # true union of rank supports
    present: int = 0  # merged index presence count
    lost: int = 0  # in the union but missing from the merged index
    spurious: int = 0  # in the merged index but nowhere in the union
    peeled_fraction: float = 1.0
    unresolved: int = 0


@dataclass
class ShardResult:
    gradients: list  # summed shard gradient at the owner, None elsewhere
    accumulators: list
    stats: list = field(default_factory=list)

    @property
    def owner_gradient(self) -> np.ndarray:
        return next(g for g in self.gradients if g is not None)


def _segment_seed(seed: int, start: int) -> int:
    return codec.splitmix64((seed ^ start) & ((1 << 64) - 1))


def tagc_exchange(
    grads: Sequence[np.ndarray],
    accs: Sequence[np.ndarray],
    config: CompressionConfig,
    owner: int,
    world: World,
    seed: int | None = None,
    tag: str = "tagc",
) -> tuple[list, list, SegmentStats]:
    """The compressed exchange for one segment; returns (gradients, accumulators, stats)."""
    n = grads[0].size
    if any(g.size != n for g in grads) or any(a.size != n for a in accs):
        raise ValueError("per-rank gradients and accumulators must share the segment length")
    theta = config.theta

    def local_step(rank, g, acc):
        return sparsify(apply_accumulator(g, acc), theta)

    stepped = world.map(local_step, grads, accs)
    sparse = [s for s, _ in stepped]
    next_accs = [r for _, r in stepped]
    stats = SegmentStats(layer="", size=n, path="tagc")

    if config.bypass:
        summed = world.reduce(sparse, owner, tag=f"{tag}.raw")
        stats.path = "bypass"
        return summed, next_accs, stats

    if config.index_width == 4:
        world.register_nibble_index()
    sk_config = SketchConfig.for_length(
        n, config.ratio, seed=config.seed if seed is None else seed, rows=config.rows
    )
    local_index = world.map(lambda rank, g: codec.create_index(g, config.index_width).words, sparse)
    merged_words = world.all_reduce_sum(local_index, tag=f"{tag}.index", params=n)
    sketches = world.map(lambda rank, g: codec.compress(g, sk_config).values, sparse)
    reduced = world.reduce(sketches, owner, tag=f"{tag}.sketch", params=n)

    presence = codec.merge_semantics(merged_words[owner], n, config.index_width)
    result = codec.peeling_decompress(presence, codec.CountSketch(sk_config, reduced[owner]))

    union = np.zeros(n, dtype=bool)
    for g in sparse:
        union |= g != 0
    in_index = np.zeros(n, dtype=bool)
    in_index[presence] = True
    stats.support = int(union.sum())
    stats.present = int(presence.size)
    stats.lost = int((union & ~in_index).sum())
    stats.spurious = int((in_index & ~union).sum())
    stats.peeled_fraction = result.peeled_fraction
    stats.unresolved = int(result.unresolved.size)

    out = [result.values if r == owner else None for r in range(world.world_size)]
    return out, next_accs, stats


def baseline_reduce_shard(
    shard: ShardSpec, grads: Sequence[np.ndarray], world: World, tag: str = "baseline"
) -> list:
    """Raw float32 sum of the shard delivered to its owner.

    This is the owner's slice of the framework's Reduce-Scatter, issued as a
    Reduce so shards can be handled one at a time.
    """
    n = len(shard)
    grads = [np.asarray(g, dtype=np.float32) for g in grads]
    if any(g.size != n for g in grads):
        raise ValueError(f"gradient slices must have the shard length {n}")
    return world.reduce(grads, shard.owner, tag=tag)


def tagc_reduce_shard(
    shard: ShardSpec,
    grads: Sequence[np.ndarray],
    accs: Sequence[np.ndarray],
    config: CompressionConfig,
    world: World,
) -> ShardResult:
    """Exchange one shard: compressed segments through TAGC, the rest raw."""
    n = len(shard)
    W = world.world_size
    grads = [np.asarray(g, dtype=np.float32) for g in grads]
    if len(grads) != W or len(accs) != W:
        raise ValueError("expected one gradient and one accumulator per rank")
    if any(g.size != n for g in grads) or any(a.size != n for a in accs):
        raise ValueError(f"gradient and accumulator slices must have the shard length {n}")

    owner_out = np.zeros(n, dtype=np.float32)
    next_accs = [np.array(a, dtype=np.float32, copy=True) for a in accs]
    stats = []
    for seg in shard.segments:
        sl = shard.local(seg)
        seg_grads = [g[sl] for g in grads]
        if seg.compress:
            summed, seg_accs, st = tagc_exchange(
                seg_grads,
                [a[sl] for a in next_accs],
                config,
                shard.owner,
                world,
                seed=_segment_seed(config.seed, seg.start),
            )
            for r in range(W):
                next_accs[r][sl] = seg_accs[r]
        else:
            summed = world.reduce(seg_grads, shard.owner, tag="baseline")
            st = SegmentStats(layer="", size=len(seg), path="baseline")
        st.layer = seg.layer
        owner_out[sl] = summed[shard.owner]
        stats.append(st)
    gradients = [owner_out if r == shard.owner else None for r in range(W)]
    return ShardResult(gradients, next_accs, stats)


# --------------------------------------------------------------------------
# Volume model
# --------------------------------------------------------------------------


def comm_volume_model(config: CompressionConfig, world_size: int = 2, mode: str = "tagc") -> dict:
    """Bits per parameter per rank for one compressed parameter.

    ``mode="allreduce"`` prices the sketch with All-Reduce instead of Reduce. The
    count does not depend on ``world_size`` under this cost model.
    """
    if mode not in ("tagc", "allreduce"):
        raise ValueError(f"mode must be 'tagc' or 'allreduce', got {mode!r}")
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    if config.bypass:
        index_bits, sketch_bits = 0.0, 32.0
    else:
        index_bits = 2.0 * config.index_width
        sketch_bits = (2.0 if mode == "allreduce" else 1.0) * 32.0 / config.ratio
    total = index_bits + sketch_bits
    return {
        "index_bits": index_bits,
        "sketch_bits": sketch_bits,
        "total": total,
        "factor": 32.0 / total,
    }


def measured_volume(world: World, tag: str = "tagc") -> dict:
    """Ledger counterpart of :func:`comm_volume_model` for compressed segments."""
    index = world.ledger.get("all_reduce", f"{tag}.index")
    sketch = world.ledger.get("reduce", f"{tag}.sketch") or world.ledger.get("reduce", f"{tag}.raw")
    index_bits = index.bits_per_param_per_rank if index else 0.0
    sketch_bits = sketch.bits_per_param_per_rank if sketch else 0.0
    total = index_bits + sketch_bits
    return {
        "index_bits": index_bits,
        "sketch_bits": sketch_bits,
        "total": total,
        "factor": 32.0 / total if total else math.inf,
    }

