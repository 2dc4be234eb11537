"""Seeded Monte-Carlo round-trips through the compressed exchange.

Each trial draws a merged support holding at most ``100 - theta`` percent of
the positions, gives every rank a random non-empty share of it, and pushes the
per-rank vectors through :func:`tagc.hook.tagc_exchange`. The decoded owner
gradient is compared with the rank-ordered float32 sum of the inputs.
"""
from __future__ import annotations

import numpy as np

from tagc.collectives import World
from tagc.hook import CompressionConfig, tagc_exchange
from tagc.sparsify import zero_count_target

VALUE_KINDS = ("int", "float")
MIN_PEELED = 0.99
FLOAT_RTOL = 1e-5
INT_MAGNITUDE = 1000


def make_trial(rng: np.random.Generator, n: int, world_size: int, theta: float, values: str = "int"):
    """Per-rank float32 vectors whose merged support leaves ``theta`` percent zeros."""
    support_size = n - zero_count_target(n, theta)
    support = np.sort(rng.choice(n, support_size, replace=False))
    # every support position belongs to at least one rank
    member = rng.random((world_size, support_size)) < 0.5
    member[rng.integers(0, world_size, support_size), np.arange(support_size)] = True
    sign = rng.choice(np.array([-1.0, 1.0]), support_size)
    out = []
    for r in range(world_size):
        if values == "int":
            v = rng.integers(1, INT_MAGNITUDE + 1, support_size) * sign
        else:
            # one sign per position keeps the float sum away from cancellation
            v = rng.uniform(0.5, 1.0, support_size) * sign
        g = np.zeros(n, dtype=np.float32)
        g[support] = np.where(member[r], v, 0.0)
        out.append(g)
    return out


def reference_sum(grads) -> np.ndarray:
    acc = grads[0].astype(np.float32, copy=True)
    for g in grads[1:]:
        acc += g
    return acc


def run_roundtrip(
    config: CompressionConfig,
    n: int = 10_000,
    world_size: int = 2,
    trials: int = 500,
    seed: int = 0,
    values: str = "int",
    mode: str = "sequential",
) -> dict:
    """Run ``trials`` seeded round-trips and summarise peeling and accuracy."""
    if values not in VALUE_KINDS:
        raise ValueError(f"values must be one of {VALUE_KINDS}")
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be positive")
    rng = np.random.default_rng(seed)
    peeled, unresolved, lost, spurious = [], 0, 0, 0
    full, exact = 0, 0
    max_abs, max_rel = 0.0, 0.0
    with World(world_size, mode) as world:
        for _ in range(trials):
            grads = make_trial(rng, n, world_size, config.theta, values)
            accs = [np.zeros(n, dtype=np.float32) for _ in range(world_size)]
            sketch_seed = int(rng.integers(0, 2**63))
            decoded, _, stats = tagc_exchange(grads, accs, config, 0, world, seed=sketch_seed)
            world.ledger.clear()
            peeled.append(stats.peeled_fraction)
            unresolved += stats.unresolved
            lost += stats.lost
            spurious += stats.spurious
            if stats.unresolved:
                continue
            full += 1
            ref = reference_sum(grads)
            got = decoded[0]
            exact += int(np.array_equal(got, ref))
            err = np.abs(got.astype(np.float64) - ref)
            max_abs = max(max_abs, float(err.max()))
            nz = ref != 0
            if nz.any():
                max_rel = max(max_rel, float((err[nz] / np.abs(ref[nz])).max()))

    mean_peeled = float(np.mean(peeled))
    checks = {"mean_peeled_fraction": mean_peeled >= MIN_PEELED}
    if values == "int":
        checks["bit_exact_when_peeled"] = exact == full
    else:
        checks["float_within_rtol"] = max_rel <= FLOAT_RTOL
    return {
        "config": config.to_dict(),
        "n": n,
        "world_size": world_size,
        "trials": trials,
        "seed": seed,
        "values": values,
        "mode": mode,
        "mean_peeled_fraction": mean_peeled,
        "min_peeled_fraction": float(np.min(peeled)),
        "peel_success_rate": full / trials,
        "unresolved_total": unresolved,
        "index_lost_total": lost,
        "index_spurious_total": spurious,
        "bit_exact_trials": exact,
        "max_abs_error": max_abs,
        "max_rel_error": max_rel,
        "checks": checks,
        "passed": all(checks.values()),
    }
