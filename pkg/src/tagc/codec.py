"""Index and Count Sketch structures for homomorphic gradient compression.

Byte layouts (fixed, used by the traffic ledger):

* ``Index.words`` -- little-endian ``uint32`` words. Position ``p`` occupies
  bits ``[p*width, (p+1)*width)`` of the flat bit stream, so for width 1 it is
  bit ``p % 32`` of word ``p // 32`` and for width 4 it is nibble ``p % 8`` of
  word ``p // 8``.
* ``CountSketch.values`` -- ``float32`` array of shape ``(rows, buckets)``,
  serialized row-major little-endian.

Hashing is multiply-shift over 64-bit words. For row ``r`` the parameters
``(a, b, c, d)`` are drawn from splitmix64 of ``seed + 4*r + {1,2,3,4}``;
``bucket(p) = (((a*p + b) mod 2**64 >> 32) * m) >> 32`` and the sign is ``+1`` when
the top bit of ``(c*p + d) mod 2**64`` is clear, ``-1`` otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ROWS = 3
SUPPORTED_RATIOS = (2, 4, 10)
INDEX_WIDTHS = (1, 4)

_MASK64 = (1 << 64) - 1


class SketchSizeError(ValueError):
    """Vector too short for the requested compression ratio."""


class IncompatibleSketchError(ValueError):
    """Sketches (or sketch and index) disagree on geometry or seed."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def row_hash_params(seed: int, row: int) -> tuple[int, int, int, int]:
    base = (seed + 4 * row) & _MASK64
    a = splitmix64(base + 1) | 1
    b = splitmix64(base + 2)
    c = splitmix64(base + 3) | 1
    d = splitmix64(base + 4)
    return a, b, c, d


def bucket_hash(seed: int, row: int, positions: np.ndarray, m: int) -> np.ndarray:
    a, b, _, _ = row_hash_params(seed, row)
    p = np.asarray(positions, dtype=np.uint64)
    h = (p * np.uint64(a) + np.uint64(b)) >> np.uint64(32)
    # scale into [0, m) by the high bits; a modulus would alias whenever the
    # multiplier's stride shares a factor with m
    return ((h * np.uint64(m)) >> np.uint64(32)).astype(np.int64)


def sign_hash(seed: int, row: int, positions: np.ndarray) -> np.ndarray:
    _, _, c, d = row_hash_params(seed, row)
    p = np.asarray(positions, dtype=np.uint64)
    top = (p * np.uint64(c) + np.uint64(d)) >> np.uint64(63)
    return 1.0 - 2.0 * top.astype(np.float64)


def sketch_geometry(n: int, ratio: int, rows: int = DEFAULT_ROWS) -> tuple[int, int]:
    """Return ``(rows, buckets_per_row)`` so the sketch holds ``n / ratio`` floats.

    >>> sketch_geometry(3000, 10)
    (3, 100)
    """
    if ratio not in SUPPORTED_RATIOS:
        raise ValueError(f"ratio must be one of {SUPPORTED_RATIOS}, got {ratio}")
    if rows < 1:
        raise ValueError("rows must be >= 1")
    m = n // (ratio * rows)
    if m < 1:
        raise SketchSizeError(
            f"n={n} is too small for ratio {ratio} with {rows} rows (0 buckets per row)"
        )
    return rows, m


# --------------------------------------------------------------------------
# Index
# --------------------------------------------------------------------------


def _word_count(n: int, width: int) -> int:
    return (n * width + 31) // 32


@dataclass(frozen=True, eq=False)
class Index:
    n: int
    width: int
    words: np.ndarray

    def __post_init__(self):
        if self.width not in INDEX_WIDTHS:
            raise ValueError(f"index width must be 1 or 4, got {self.width}")
        words = np.ascontiguousarray(self.words, dtype=np.uint32)
        if words.shape != (_word_count(self.n, self.width),):
            raise ValueError("word array does not match (n, width)")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    @property
    def nbytes(self) -> int:
        return self.words.size * 4

    @property
    def nbits(self) -> int:
        return self.words.size * 32

    def field_values(self) -> np.ndarray:
        """Per-position field values (0/1 for width 1, 0..15 for width 4)."""
        if self.width == 1:
            bits = np.unpackbits(self.words.astype("<u4").view(np.uint8), bitorder="little")
            return bits[: self.n].astype(np.uint8)
        shifts = np.arange(8, dtype=np.uint32) * np.uint32(4)
        nibbles = (self.words[:, None] >> shifts[None, :]) & np.uint32(0xF)
        return nibbles.reshape(-1)[: self.n].astype(np.uint8)

    def presence(self) -> np.ndarray:
        """Sorted positions that count as present under this width's merge rule."""
        return merge_semantics(self.words, self.n, self.width)

    def to_bytes(self) -> bytes:
        return self.words.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, n: int, width: int) -> "Index":
        return cls(n, width, np.frombuffer(data, dtype="<u4").astype(np.uint32))

    def __eq__(self, other):
        if not isinstance(other, Index):
            return NotImplemented
        return (self.n, self.width) == (other.n, other.width) and np.array_equal(
            self.words, other.words
        )


def create_index(values: np.ndarray, width: int = 4) -> Index:
    values = np.asarray(values)
    n = values.size
    if n < 1:
        raise ValueError("cannot index an empty vector")
    if width not in INDEX_WIDTHS:
        raise ValueError(f"index width must be 1 or 4, got {width}")
    # -0.0 != 0 is False, so signed zeros are absent
    nonzero = (values.reshape(-1) != 0).astype(np.uint32)
    nwords = _word_count(n, width)
    per_word = 32 // width
    padded = np.zeros(nwords * per_word, dtype=np.uint32)
    padded[:n] = nonzero
    shifts = np.arange(per_word, dtype=np.uint32) * np.uint32(width)
    words = (padded.reshape(nwords, per_word) << shifts[None, :]).sum(axis=1, dtype=np.uint64)
    return Index(n, width, words.astype(np.uint32))


def merge_semantics(summed_words: np.ndarray, n: int, width: int) -> np.ndarray:
    """Interpret a word-wise integer sum of indices as a presence set.

    Width 4 treats any nonzero nibble as present, exact while at most 15
    indices were summed. Width 1 reads the bit after carries, so overlapping
    positions can vanish and neighbours can appear.
    """
    idx = Index(n, width, np.asarray(summed_words, dtype=np.uint32))
    fields = idx.field_values()
    if width == 4:
        return np.flatnonzero(fields > 0).astype(np.int64)
    return np.flatnonzero(fields == 1).astype(np.int64)


# --------------------------------------------------------------------------
# Count Sketch
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SketchConfig:
    """Geometry and hash seed shared by every rank compressing a vector."""

    n: int
    ratio: int
    rows: int
    buckets: int
    seed: int

    @classmethod
    def for_length(cls, n: int, ratio: int, seed: int, rows: int = DEFAULT_ROWS) -> "SketchConfig":
        k, m = sketch_geometry(n, ratio, rows)
        return cls(n=n, ratio=ratio, rows=k, buckets=m, seed=seed & _MASK64)

    def hashes(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bucket ids and signs, each of shape ``(rows, len(positions))``."""
        positions = np.asarray(positions, dtype=np.int64)
        h = np.empty((self.rows, positions.size), dtype=np.int64)
        s = np.empty((self.rows, positions.size), dtype=np.float64)
        for r in range(self.rows):
            h[r] = bucket_hash(self.seed, r, positions, self.buckets)
            s[r] = sign_hash(self.seed, r, positions)
        return h, s


@dataclass(frozen=True, eq=False)
class CountSketch:
    config: SketchConfig
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.shape != (self.config.rows, self.config.buckets):
            raise ValueError("bucket array does not match sketch geometry")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    n = property(lambda self: self.config.n)
    ratio = property(lambda self: self.config.ratio)
    rows = property(lambda self: self.config.rows)
    buckets_per_row = property(lambda self: self.config.buckets)
    seed = property(lambda self: self.config.seed)

    @property
    def nbits(self) -> int:
        return self.values.size * 32

    def to_bytes(self) -> bytes:
        return self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, config: SketchConfig) -> "CountSketch":
        values = np.frombuffer(data, dtype="<f4").reshape(config.rows, config.buckets)
        return cls(config, values.astype(np.float32))

    @classmethod
    def zeros(cls, config: SketchConfig) -> "CountSketch":
        return cls(config, np.zeros((config.rows, config.buckets), dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, CountSketch):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.values, other.values)


def compress(values: np.ndarray, config: SketchConfig) -> CountSketch:
    """Insert every nonzero of ``values`` into each row of a fresh sketch.

    Each bucket is accumulated in float64 in ascending position order and
    rounded to float32 once.
    """
    values = np.asarray(values, dtype=np.float32).reshape(-1)
    if values.size != config.n:
        raise ValueError(f"expected {config.n} values, got {values.size}")
    nz = np.flatnonzero(values)
    out = np.zeros((config.rows, config.buckets), dtype=np.float32)
    if nz.size:
        h, s = config.hashes(nz)
        v = values[nz].astype(np.float64)
        for r in range(config.rows):
            out[r] = np.bincount(h[r], weights=s[r] * v, minlength=config.buckets)
    return CountSketch(config, out)


def sketch_add(a: CountSketch, b: CountSketch) -> CountSketch:
    if a.config != b.config:
        raise IncompatibleSketchError(f"cannot add sketches {a.config} and {b.config}")
    return CountSketch(a.config, a.values + b.values)


# --------------------------------------------------------------------------
# Decompression
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeResult:
    values: np.ndarray
    unresolved: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    peeled_fraction: float = 1.0

    @property
    def fully_peeled(self) -> bool:
        return self.unresolved.size == 0


def _check_presence(presence: np.ndarray, n: int) -> np.ndarray:
    presence = np.asarray(presence, dtype=np.int64).reshape(-1)
    if presence.size and (presence[0] < 0 or presence[-1] >= n):
        raise IncompatibleSketchError("presence set lies outside the sketch's vector length")
    if presence.size > 1 and np.any(np.diff(presence) <= 0):
        raise ValueError("presence positions must be strictly increasing")
    return presence


def _estimate(buckets: np.ndarray, h: np.ndarray, s: np.ndarray) -> np.ndarray:
    rows = np.arange(h.shape[0])[:, None]
    return np.median(s * buckets[rows, h], axis=0)


def estimation_decompress(
    presence: np.ndarray, sketch: CountSketch, targets: np.ndarray | None = None
) -> np.ndarray:
    """Median-of-rows estimate for each target position.

    ``targets`` defaults to the full presence set and must be a subset of it.
    Returns the estimates in the order of ``targets``.
    """
    presence = _check_presence(presence, sketch.n)
    targets = presence if targets is None else np.asarray(targets, dtype=np.int64)
    if not np.all(np.isin(targets, presence)):
        raise ValueError("estimation targets must be present in the index")
    h, s = sketch.config.hashes(targets)
    return _estimate(sketch.values.astype(np.float64), h, s).astype(np.float32)


def peeling_decompress(presence: np.ndarray, sketch: CountSketch) -> DecodeResult:
    """Recover the summed vector from a reduced sketch and merged presence set.

    Peeling proceeds in rounds: every bucket with exactly one remaining
    contributor yields that contributor's value, collected in ascending
    ``(row, bucket)`` order, and all recovered values are then subtracted
    from their other buckets. Whatever survives the last round is filled in
    by the median estimator on the residual buckets.
    """
    config = sketch.config
    n = config.n
    presence = _check_presence(presence, n)
    out = np.zeros(n, dtype=np.float32)
    total = presence.size
    if total == 0:
        return DecodeResult(out, np.zeros(0, dtype=np.int64), 1.0)

    k, m = config.rows, config.buckets
    h, s = config.hashes(presence)
    ids = np.arange(total, dtype=np.float64)
    count = np.stack([np.bincount(h[r], minlength=m) for r in range(k)])
    idsum = np.stack([np.bincount(h[r], weights=ids, minlength=m) for r in range(k)])
    initial = count.copy()
    remaining = sketch.values.astype(np.float64)
    recovered = np.zeros(total, dtype=np.float64)
    done = np.zeros(total, dtype=bool)

    while True:
        rows, cols = np.nonzero(count == 1)
        if rows.size == 0:
            break
        js = idsum[rows, cols].astype(np.int64)
        # a position singled out in several rows reads the bucket that started
        # with the fewest contributors, since it carries the least rounding
        pick = np.lexsort((np.arange(js.size), initial[rows, cols], js))
        js, first = np.unique(js[pick], return_index=True)
        first = pick[first]
        order = np.argsort(first, kind="stable")
        js, first = js[order], first[order]
        vals = s[rows[first], js] * remaining[rows[first], cols[first]]
        recovered[js] = vals
        done[js] = True
        for r in range(k):
            hr = h[r, js]
            np.subtract.at(remaining[r], hr, s[r, js] * vals)
            np.subtract.at(count[r], hr, 1)
            np.subtract.at(idsum[r], hr, js.astype(np.float64))

    left = np.flatnonzero(~done)
    if left.size:
        recovered[left] = _estimate(remaining, h[:, left], s[:, left])
    out[presence] = recovered.astype(np.float32)
    return DecodeResult(out, presence[left], float(done.sum()) / total)


# --------------------------------------------------------------------------
# Debug dump
# --------------------------------------------------------------------------


def dump_debug(sketch: CountSketch | None = None, index: Index | None = None) -> str:
    """JSON view of buckets and presence sets for golden tests."""
    doc: dict = {}
    if sketch is not None:
        doc["sketch"] = {
            "n": sketch.n,
            "ratio": sketch.ratio,
            "rows": sketch.rows,
            "buckets_per_row": sketch.buckets_per_row,
            "seed": sketch.seed,
            "values": [[float(x) for x in row] for row in sketch.values],
        }
    if index is not None:
        doc["index"] = {
            "n": index.n,
            "width": index.width,
            "words": [int(w) for w in index.words],
            "fields": [int(f) for f in index.field_values()],
            "present": [int(p) for p in index.presence()],
        }
    return json.dumps(doc, sort_keys=True)
