import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpriv.secure_agg import (
    ShareSet,
    decode_fixed,
    encode_fixed,
    partial_sum_to_bytes,
    reconstruct,
    ring_total,
    secure_aggregate,
    share_set_from_bytes,
    share_set_to_bytes,
    split_shares,
)

from helpers import vec_pv

TOL = 2.0**-17


def test_encode_zero_round_trip():
    ring = encode_fixed(np.array([0.0]))
    assert ring[0] == 0
    assert decode_fixed(ring)[0] == 0.0


def test_encode_known_value():
    assert encode_fixed(np.array([1.5]))[0] == 98304  # 1.5 * 2^16


def test_encode_negative_two_complement():
    ring = encode_fixed(np.array([-1.0]))
    assert ring[0] == np.uint64(2**64 - 65536)
    assert decode_fixed(ring)[0] == -1.0


def test_round_trip_error_bound():
    rng = np.random.default_rng(0)
    v = rng.uniform(-1000, 1000, size=512)
    back = decode_fixed(encode_fixed(v))
    assert np.max(np.abs(back - v)) <= TOL


def test_encode_out_of_bound():
    with pytest.raises(ValueError):
        encode_fixed(np.array([2.0**40]))
    with pytest.raises(ValueError):
        encode_fixed(np.array([np.inf]))


def test_split_single_share_is_encoding():
    v = vec_pv([1.5, -2.25, 0.0])
    ss = split_shares(v, 1, seed=0)
    assert np.array_equal(ss.shares[0], encode_fixed(v))


def test_split_zero_vector_sums_to_ring_zero():
    v = vec_pv(np.zeros(8))
    for m in (1, 2, 5):
        ss = split_shares(v, m, seed=m)
        assert np.all(ss.ring_sum() == 0)


def test_split_reconstruct_round_trip():
    rng = np.random.default_rng(1)
    v = vec_pv(rng.uniform(-50, 50, size=64))
    ss = split_shares(v, 5, seed=2)
    back = reconstruct(ss)
    assert back.layout == v.layout
    assert np.max(np.abs(back.values - v.values)) <= TOL


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_ring_identity_exact(m, dim, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1000, 1000, size=dim)
    ss = split_shares(v, m, seed=seed)
    assert np.array_equal(ss.ring_sum(), encode_fixed(v))


def test_share_set_requires_shares():
    with pytest.raises(ValueError):
        ShareSet(client_id=0, shares=())
    with pytest.raises(ValueError):
        ShareSet(
            client_id=0,
            shares=(np.zeros(2, np.uint64), np.zeros(3, np.uint64)),
        )


def test_pooled_shares_reconstruct_sum():
    rng = np.random.default_rng(3)
    a = rng.uniform(-10, 10, size=16)
    b = rng.uniform(-10, 10, size=16)
    sa = split_shares(a, 3, seed=1)
    sb = split_shares(b, 2, seed=2)
    pooled = ShareSet(client_id=9, shares=sa.shares + sb.shares)
    back = reconstruct(pooled)
    assert np.max(np.abs(back - (a + b))) <= 2 * TOL


def test_secure_aggregate_single_client():
    v = vec_pv([3.25, -1.5])
    agg = secure_aggregate([split_shares(v, 4, seed=0)])
    assert np.max(np.abs(agg.values - v.values)) <= TOL


def test_secure_aggregate_symmetry_cancels():
    rng = np.random.default_rng(4)
    theta = rng.uniform(-5, 5, size=32)
    sets = [
        split_shares(theta, 3, seed=10, client_id=0),
        split_shares(-theta, 3, seed=11, client_id=1),
    ]
    agg = secure_aggregate(sets)
    assert np.max(np.abs(agg)) <= 2.0**-16


def test_secure_aggregate_matches_plaintext_mean():
    rng = np.random.default_rng(5)
    vectors = [rng.uniform(-20, 20, size=100) for _ in range(10)]
    sets = [
        split_shares(v, int(rng.integers(1, 6)), seed=i, client_id=i)
        for i, v in enumerate(vectors)
    ]
    agg = secure_aggregate(sets, 10)
    assert np.max(np.abs(agg - np.mean(vectors, axis=0))) <= 1e-4


def test_secure_aggregate_errors():
    with pytest.raises(ValueError):
        secure_aggregate([])
    v = vec_pv([1.0])
    with pytest.raises(ValueError):
        secure_aggregate([split_shares(v, 2, seed=0)], n=3)


def test_aggregation_linearity_over_subpopulations():
    rng = np.random.default_rng(6)
    pop_a = [rng.uniform(-5, 5, size=24) for _ in range(4)]
    pop_b = [rng.uniform(-5, 5, size=24) for _ in range(6)]
    sets_a = [split_shares(v, 2, seed=i) for i, v in enumerate(pop_a)]
    sets_b = [split_shares(v, 3, seed=100 + i) for i, v in enumerate(pop_b)]
    whole = secure_aggregate(sets_a + sets_b)
    parts = (4 * secure_aggregate(sets_a) + 6 * secure_aggregate(sets_b)) / 10
    assert np.max(np.abs(whole - parts)) <= 10 * TOL


def test_wire_round_trip():
    rng = np.random.default_rng(7)
    v = vec_pv(rng.uniform(-100, 100, size=48))
    ss = split_shares(v, 3, seed=8, client_id=17)
    buf = share_set_to_bytes(ss)
    assert len(buf) == 10 + 8 * 3 * 48  # u32 + u16 + u32 header then u64 words
    back = share_set_from_bytes(buf, layout=v.layout)
    assert back.client_id == 17
    assert back.m == 3
    for s1, s2 in zip(ss.shares, back.shares):
        assert np.array_equal(s1, s2)
    assert np.array_equal(
        np.asarray(reconstruct(back).values), np.asarray(reconstruct(ss).values)
    )


def test_wire_truncation_rejected():
    v = vec_pv([1.0, 2.0])
    buf = share_set_to_bytes(split_shares(v, 2, seed=0))
    with pytest.raises(ValueError):
        share_set_from_bytes(buf[:-1])
    with pytest.raises(ValueError):
        share_set_from_bytes(buf + b"\x00")
    with pytest.raises(ValueError):
        share_set_from_bytes(buf[:5])


def test_partial_sum_wire():
    totals = ring_total([split_shares(vec_pv([1.0, 2.0]), 3, seed=1)])
    buf = partial_sum_to_bytes(2, totals)
    back = share_set_from_bytes(buf)
    assert back.client_id == 2
    assert back.m == 1
    assert np.array_equal(back.shares[0], totals)


def test_single_share_marginal_uniformity_smoke():
    # 16-bin chi-square over 2000 splits of a fixed vector (full-size run
    # lives in the acceptance suite)
    v = np.array([0.7, -1.3, 2.9, 0.0])
    samples = np.empty(2000, dtype=np.uint64)
    for seed in range(2000):
        samples[seed] = split_shares(v, 2, seed=seed).shares[0][0]
    bins = (samples >> np.uint64(60)).astype(int)  # top 4 bits -> 16 bins
    counts = np.bincount(bins, minlength=16)
    expected = 2000 / 16
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 37.697  # 0.999 quantile of chi-square with 15 dof
