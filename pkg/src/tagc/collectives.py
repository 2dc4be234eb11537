"""In-process simulation of a rank group with byte-exact traffic accounting.

Collectives take one payload per rank (a list indexed by rank) and return one
result per rank, ``None`` where a rank receives nothing. Reductions always
fold in ascending rank order, so float results do not depend on the execution
mode. Integer payloads wrap on overflow, which is what makes summed 1-bit
indices carry into neighbouring positions.

Cost model: a payload of ``b`` bits per rank is charged ``2b`` for All-Reduce
and ``b`` for Reduce, Reduce-Scatter and All-Gather.
"""
from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import numpy as np

ALL_REDUCE = "all_reduce"
REDUCE = "reduce"
REDUCE_SCATTER = "reduce_scatter"
ALL_GATHER = "all_gather"

COST_FACTOR = {ALL_REDUCE: 2, REDUCE: 1, REDUCE_SCATTER: 1, ALL_GATHER: 1}
MODES = ("sequential", "parallel")
MAX_NIBBLE_WORLD = 15


@dataclass
class LedgerEntry:
    op: str
    tag: str
    payload_bits: int = 0
    charged_bits: int = 0
    params: int = 0
    calls: int = 0

    @property
    def bits_per_param_per_rank(self) -> float:
        return self.charged_bits / self.params if self.params else 0.0

    def as_row(self) -> dict:
        row = asdict(self)
        row["bits_per_param_per_rank"] = self.bits_per_param_per_rank
        return row


class TrafficLedger:
    """Per-rank traffic, aggregated by ``(op, tag)`` in first-seen order."""

    COLUMNS = ("op", "tag", "payload_bits", "charged_bits", "bits_per_param_per_rank")

    def __init__(self):
        self._entries: OrderedDict[tuple[str, str], LedgerEntry] = OrderedDict()

    def record(self, op: str, tag: str, payload_bits: int, params: int) -> LedgerEntry:
        entry = self._entries.get((op, tag))
        if entry is None:
            entry = self._entries[(op, tag)] = LedgerEntry(op, tag)
        entry.payload_bits += payload_bits
        entry.charged_bits += COST_FACTOR[op] * payload_bits
        entry.params += params
        entry.calls += 1
        return entry

    def entries(self) -> list[LedgerEntry]:
        return list(self._entries.values())

    def get(self, op: str, tag: str) -> LedgerEntry | None:
        return self._entries.get((op, tag))

    def charged_bits(self, tag_prefix: str = "") -> int:
        return sum(e.charged_bits for e in self._entries.values() if e.tag.startswith(tag_prefix))

    def clear(self):
        self._entries.clear()

    def to_rows(self) -> list[dict]:
        return [e.as_row() for e in self._entries.values()]

    def to_json(self) -> str:
        return json.dumps(self.to_rows(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.to_rows():
            writer.writerow(row)
        return buf.getvalue()


def _bits(arr: np.ndarray) -> int:
    return arr.size * arr.dtype.itemsize * 8


def _fold(payloads: Sequence[np.ndarray]) -> np.ndarray:
    out = payloads[0].copy()
    for p in payloads[1:]:
        # in-place add keeps the dtype, so unsigned words wrap instead of upcasting
        np.add(out, p, out=out, casting="unsafe")
    return out


class World:
    """A simulated group of ``world_size`` ranks.

    ``parallel`` mode runs per-rank work on one thread per rank; ``map`` is
    the barrier, returning only once every rank has finished, with results
    in rank order.
    """

    def __init__(self, world_size: int, mode: str = "sequential", nibble_index: bool = False):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.world_size = world_size
        self.mode = mode
        self.ledger = TrafficLedger()
        self._pool: ThreadPoolExecutor | None = None
        if nibble_index:
            self.register_nibble_index()

    def register_nibble_index(self):
        if self.world_size > MAX_NIBBLE_WORLD:
            raise ValueError(
                f"4-bit index sums overflow beyond {MAX_NIBBLE_WORLD} ranks (world_size={self.world_size})"
            )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, fn: Callable[..., Any], *per_rank_args: Sequence[Any]) -> list[Any]:
        """Run ``fn(rank, *args[rank])`` on every rank."""
        for args in per_rank_args:
            if len(args) != self.world_size:
                raise ValueError("expected one argument per rank")
        calls = [(r, [a[r] for a in per_rank_args]) for r in range(self.world_size)]
        if self.mode == "sequential" or self.world_size == 1:
            return [fn(r, *args) for r, args in calls]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.world_size, thread_name_prefix="rank")
        futures = [self._pool.submit(fn, r, *args) for r, args in calls]
        return [f.result() for f in futures]

    def _take(self, payloads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(payloads) != self.world_size:
            raise ValueError(f"expected {self.world_size} payloads, got {len(payloads)}")
        arrays = [np.array(p, copy=True) for p in payloads]
        first = arrays[0]
        for a in arrays[1:]:
            if a.shape != first.shape or a.dtype != first.dtype:
                raise ValueError("payloads must share length and element kind")
        return arrays

    def all_reduce_sum(self, payloads, tag: str = "", params: int | None = None) -> list[np.ndarray]:
        arrays = self._take(payloads)
        total = _fold(arrays)
        self.ledger.record(ALL_REDUCE, tag, _bits(total), total.size if params is None else params)
        return [total.copy() for _ in range(self.world_size)]

    def reduce(self, payloads, root: int, tag: str = "", params: int | None = None) -> list[np.ndarray | None]:
        if not 0 <= root < self.world_size:
            raise ValueError(f"root {root} outside world of size {self.world_size}")
        arrays = self._take(payloads)
        total = _fold(arrays)
        self.ledger.record(REDUCE, tag, _bits(total), total.size if params is None else params)
        return [total if r == root else None for r in range(self.world_size)]

    def reduce_scatter(self, payloads, tag: str = "", params: int | None = None) -> list[np.ndarray]:
        arrays = self._take(payloads)
        n = arrays[0].size
        if n % self.world_size:
            raise ValueError(f"payload length {n} not divisible by world size {self.world_size}")
        total = _fold(arrays)
        self.ledger.record(REDUCE_SCATTER, tag, _bits(total), n if params is None else params)
        return [s.copy() for s in np.split(total, self.world_size)]

    def all_gather(self, slices, tag: str = "", params: int | None = None) -> list[np.ndarray]:
        arrays = self._take(slices)
        full = np.concatenate(arrays)
        self.ledger.record(ALL_GATHER, tag, _bits(full), full.size if params is None else params)
        return [full.copy() for _ in range(self.world_size)]
