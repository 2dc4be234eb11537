import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fold_sum, scalar_bucket, scalar_compress, scalar_sign, worklist_peel
from tagc import codec
from tagc.codec import (
    CountSketch,
    Index,
    IncompatibleSketchError,
    SketchConfig,
    SketchSizeError,
    compress,
    create_index,
    estimation_decompress,
    merge_semantics,
    peeling_decompress,
    sketch_add,
    sketch_geometry,
)


# -- geometry ---------------------------------------------------------------


@pytest.mark.parametrize("n,ratio,expected", [(3000, 10, (3, 100)), (3000, 2, (3, 500)), (3000, 4, (3, 250))])
def test_sketch_geometry(n, ratio, expected):
    assert sketch_geometry(n, ratio) == expected


def test_sketch_geometry_too_small():
    with pytest.raises(SketchSizeError):
        sketch_geometry(20, 10)


def test_sketch_geometry_rejects_unknown_ratio():
    with pytest.raises(ValueError):
        sketch_geometry(3000, 3)


@given(st.integers(30, 10**6), st.sampled_from([2, 4, 10]))
def test_geometry_never_exceeds_budget(n, ratio):
    k, m = sketch_geometry(n, ratio)
    assert k == 3 and m >= 1 and k * m <= n // ratio


# -- index ------------------------------------------------------------------


def test_create_index_nibbles():
    idx = create_index(np.array([0, 1.5, 0, -2], dtype=np.float32), width=4)
    assert list(idx.field_values()) == [0, 1, 0, 1]
    assert idx.words.tolist() == [0x1010]


def test_create_index_all_zero():
    idx = create_index(np.zeros(100, dtype=np.float32), width=1)
    assert idx.words.tolist() == [0, 0, 0, 0]


def test_create_index_negative_zero_is_absent():
    idx = create_index(np.array([-0.0, 3.0], dtype=np.float32), width=1)
    assert list(idx.field_values()) == [0, 1]


@pytest.mark.parametrize("width", [1, 4])
def test_index_layout_is_little_endian_flat_bitstream(width):
    rng = np.random.default_rng(3)
    v = (rng.random(77) < 0.3).astype(np.float32)
    idx = create_index(v, width)
    assert idx.words.size == -(-77 * width // 32)
    bits = np.unpackbits(np.frombuffer(idx.to_bytes(), dtype=np.uint8), bitorder="little")
    for p in range(77):
        field = bits[p * width : (p + 1) * width]
        assert int(field[0]) == int(v[p] != 0)
        assert not field[1:].any()
    # trailing bits beyond n are zero
    assert not bits[77 * width :].any()
    assert Index.from_bytes(idx.to_bytes(), 77, width) == idx


def test_merge_nibble_two_ranks_same_position():
    a = create_index(np.eye(1, 16, 7).ravel(), 4)
    summed = a.words + a.words
    assert Index(16, 4, summed).field_values()[7] == 2
    assert merge_semantics(summed, 16, 4).tolist() == [7]


def test_merge_one_bit_carry_loses_and_invents():
    v = np.zeros(32, dtype=np.float32)
    v[0] = 1.0
    w = create_index(v, 1).words
    summed = w + w
    assert summed.tolist() == [2]
    assert merge_semantics(summed, 32, 1).tolist() == [1]


def test_merge_nibble_disjoint_union():
    rng = np.random.default_rng(0)
    owner = rng.integers(0, 4, size=200)  # 3 means nobody
    words = [create_index((owner == r).astype(np.float32), 4).words for r in range(3)]
    summed = words[0] + words[1] + words[2]
    assert merge_semantics(summed, 200, 4).tolist() == np.flatnonzero(owner < 3).tolist()


# -- compress / homomorphism ------------------------------------------------


def test_compress_zero_vector():
    cfg = SketchConfig.for_length(300, 2, seed=1)
    assert not compress(np.zeros(300, dtype=np.float32), cfg).values.any()


def test_compress_single_value():
    cfg = SketchConfig.for_length(300, 4, seed=9)
    v = np.zeros(300, dtype=np.float32)
    v[123] = 2.5
    sk = compress(v, cfg)
    for r in range(cfg.rows):
        nz = np.flatnonzero(sk.values[r])
        assert nz.tolist() == [scalar_bucket(cfg.seed, r, 123, cfg.buckets)]
        assert sk.values[r, nz[0]] == scalar_sign(cfg.seed, r, 123) * 2.5


def test_compress_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    cfg = SketchConfig.for_length(30, 2, seed=77)
    v = np.zeros(30, dtype=np.float32)
    v[rng.choice(30, 5, replace=False)] = rng.integers(-50, 50, 5)
    assert np.array_equal(compress(v, cfg).values, scalar_compress(v, cfg))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(60, 400), st.sampled_from([2, 4, 10]), st.data())
def test_compress_matches_scalar_oracle_random_floats(seed, n, ratio, data):
    cfg = SketchConfig.for_length(n, ratio, seed=seed)
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    v = np.where(rng.random(n) < 0.2, rng.standard_normal(n), 0).astype(np.float32)
    assert np.array_equal(compress(v, cfg).values, scalar_compress(v, cfg))


def test_compress_deterministic():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(1000).astype(np.float32)
    cfg = SketchConfig.for_length(1000, 4, seed=123)
    assert compress(v, cfg).to_bytes() == compress(v.copy(), cfg).to_bytes()


def test_sketch_add_identity():
    cfg = SketchConfig.for_length(300, 2, seed=3)
    s = compress(np.arange(300, dtype=np.float32), cfg)
    assert sketch_add(s, CountSketch.zeros(cfg)) == s


def test_sketch_add_rejects_mismatch():
    a = CountSketch.zeros(SketchConfig.for_length(300, 2, seed=3))
    with pytest.raises(IncompatibleSketchError):
        sketch_add(a, CountSketch.zeros(SketchConfig.for_length(300, 2, seed=4)))
    with pytest.raises(IncompatibleSketchError):
        sketch_add(a, CountSketch.zeros(SketchConfig.for_length(300, 4, seed=3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_homomorphism_integers_exact(seed):
    rng = np.random.default_rng(seed)
    n = 600
    cfg = SketchConfig.for_length(n, 2, seed=seed)
    a = np.where(rng.random(n) < 0.3, rng.integers(-1000, 1000, n), 0).astype(np.float32)
    b = np.where(rng.random(n) < 0.3, rng.integers(-1000, 1000, n), 0).astype(np.float32)
    assert sketch_add(compress(a, cfg), compress(b, cfg)) == compress(a + b, cfg)


def test_sketch_bytes_roundtrip_row_major():
    cfg = SketchConfig.for_length(120, 4, seed=11)
    s = compress(np.linspace(-1, 1, 120, dtype=np.float32), cfg)
    raw = s.to_bytes()
    assert len(raw) == cfg.rows * cfg.buckets * 4
    assert np.frombuffer(raw, "<f4")[cfg.buckets] == s.values[1, 0]
    assert CountSketch.from_bytes(raw, cfg) == s


# -- hashing ----------------------------------------------------------------


def test_vector_hash_matches_scalar():
    p = np.array([0, 1, 2, 12345, 2**40 + 7])
    for row in range(3):
        assert codec.bucket_hash(42, row, p, 97).tolist() == [scalar_bucket(42, row, int(x), 97) for x in p]
        assert codec.sign_hash(42, row, p).tolist() == [scalar_sign(42, row, int(x)) for x in p]


# -- peeling ----------------------------------------------------------------


def test_peel_empty_presence():
    cfg = SketchConfig.for_length(100, 2, seed=0)
    res = peeling_decompress(np.array([], dtype=np.int64), CountSketch.zeros(cfg))
    assert not res.values.any() and res.unresolved.size == 0 and res.peeled_fraction == 1.0


def test_peel_two_ranks_disjoint_integers():
    n = 40
    cfg = SketchConfig.for_length(n, 2, seed=7)
    g1 = np.zeros(n, np.float32)
    g2 = np.zeros(n, np.float32)
    g1[[3, 17]] = [5, -9]
    g2[[22, 31]] = [12, 1]
    reduced = sketch_add(compress(g1, cfg), compress(g2, cfg))
    merged = create_index(g1, 4).words + create_index(g2, 4).words
    res = peeling_decompress(merge_semantics(merged, n, 4), reduced)
    assert res.fully_peeled
    assert np.array_equal(res.values, fold_sum([g1, g2]))


def test_peel_rejects_geometry_mismatch():
    cfg = SketchConfig.for_length(100, 2, seed=0)
    with pytest.raises(IncompatibleSketchError):
        peeling_decompress(np.array([5, 150]), CountSketch.zeros(cfg))


def _random_ranks(rng, n, theta, W, integer=True):
    support = np.sort(rng.choice(n, int(round(n * (1 - theta / 100))), replace=False))
    grads = [np.zeros(n, np.float32) for _ in range(W)]
    owner = rng.integers(0, W, support.size)
    for r in range(W):
        mine = support[(owner == r) | (rng.random(support.size) < 0.3)]
        vals = rng.integers(1, 1000, mine.size) * rng.choice([-1, 1], mine.size) if integer else rng.standard_normal(mine.size)
        grads[r][mine] = vals
    return grads


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(80, 2), (90, 4), (98.75, 10)]), st.integers(2, 8))
def test_peel_agrees_with_worklist_oracle(seed, point, W):
    theta, ratio = point
    rng = np.random.default_rng(seed)
    n = 2400
    grads = _random_ranks(rng, n, theta, W)
    cfg = SketchConfig.for_length(n, ratio, seed=seed)
    reduced = compress(grads[0], cfg)
    for g in grads[1:]:
        reduced = sketch_add(reduced, compress(g, cfg))
    presence = np.flatnonzero(fold_sum(grads))
    res = peeling_decompress(presence, reduced)
    oracle, unresolved = worklist_peel(presence, reduced)
    assert set(res.unresolved.tolist()) == unresolved
    for p, v in oracle.items():
        assert res.values[p] == np.float32(v)
    if res.fully_peeled:
        assert np.array_equal(res.values, fold_sum(grads))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_absent_positions_decode_to_zero(seed, W):
    rng = np.random.default_rng(seed)
    n = 1000
    # deliberately overloaded sketch so estimation is exercised too
    grads = _random_ranks(rng, n, 50, W, integer=False)
    cfg = SketchConfig.for_length(n, 10, seed=seed)
    reduced = compress(grads[0], cfg)
    for g in grads[1:]:
        reduced = sketch_add(reduced, compress(g, cfg))
    presence = np.flatnonzero(fold_sum(grads))
    res = peeling_decompress(presence, reduced)
    absent = np.setdiff1d(np.arange(n), presence)
    assert np.all(res.values[absent] == 0)
    assert np.all(np.isin(res.unresolved, presence))
    assert res.unresolved.size > 0


def test_peeled_fraction_monte_carlo_10x():
    rng = np.random.default_rng(99)
    n, fractions = 1000, []
    for trial in range(1000):
        support = np.sort(rng.choice(n, 12, replace=False))  # 98.75% sparse -> 12.5 nonzeros
        v = np.zeros(n, np.float32)
        v[support] = rng.integers(1, 100, support.size)
        cfg = SketchConfig.for_length(n, 10, seed=trial)
        fractions.append(peeling_decompress(support, compress(v, cfg)).peeled_fraction)
    assert np.mean(fractions) >= 0.99


# -- estimation -------------------------------------------------------------


def test_estimate_single_value_exact():
    cfg = SketchConfig.for_length(300, 2, seed=8)
    v = np.zeros(300, np.float32)
    v[77] = -3.25
    assert estimation_decompress(np.array([77]), compress(v, cfg)).tolist() == [-3.25]


def test_estimate_survives_single_row_collision():
    n, p, q = 300, 10, 20
    # search for a seed where p and q share a bucket in exactly one row
    for seed in range(10_000):
        cfg = SketchConfig.for_length(n, 10, seed=seed)
        shared = sum(scalar_bucket(cfg.seed, r, p, cfg.buckets) == scalar_bucket(cfg.seed, r, q, cfg.buckets) for r in range(3))
        if shared == 1:
            break
    else:
        pytest.fail("no colliding seed found")
    v = np.zeros(n, np.float32)
    v[p], v[q] = 4.0, -7.0
    est = estimation_decompress(np.array([p, q]), compress(v, cfg))
    assert est.tolist() == [4.0, -7.0]


def test_estimate_rejects_targets_outside_presence():
    cfg = SketchConfig.for_length(300, 2, seed=8)
    with pytest.raises(ValueError):
        estimation_decompress(np.array([1, 2]), CountSketch.zeros(cfg), targets=np.array([3]))


def test_dense_estimation_noisier_than_sparse_peeling():
    rng = np.random.default_rng(17)
    n, est_err, peel_err = 300, [], []
    for trial in range(200):
        cfg = SketchConfig.for_length(n, 2, seed=trial)
        dense = rng.standard_normal(n).astype(np.float32)
        est = estimation_decompress(np.arange(n), compress(dense, cfg))
        est_err.append(np.mean(np.abs(est - dense)))

        sparse = np.zeros(n, np.float32)
        sup = np.sort(rng.choice(n, 30, replace=False))
        sparse[sup] = rng.standard_normal(30)
        sparse *= np.linalg.norm(dense) / np.linalg.norm(sparse)
        res = peeling_decompress(sup, compress(sparse, cfg))
        peel_err.append(np.mean(np.abs(res.values - sparse)))
    assert np.mean(est_err) > np.mean(peel_err)


# -- debug dump -------------------------------------------------------------


def test_debug_dump_golden():
    cfg = SketchConfig(n=8, ratio=2, rows=1, buckets=4, seed=0)
    v = np.array([0, 1, 0, 0, 0, 0, 0, 2], np.float32)
    doc = json.loads(codec.dump_debug(compress(v, cfg), create_index(v, 4)))
    assert doc["index"] == {
        "n": 8,
        "width": 4,
        "words": [0x10000010],
        "fields": [0, 1, 0, 0, 0, 0, 0, 1],
        "present": [1, 7],
    }
    expected = scalar_compress(v, cfg)
    assert doc["sketch"]["values"] == expected.tolist()
    assert doc["sketch"]["buckets_per_row"] == 4
