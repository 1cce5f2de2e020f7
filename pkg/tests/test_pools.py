from fractions import Fraction
from math import floor

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poaw.pools import (Accrual, PoolLedger, accrue_promised_fees, derive_sm_pool, main_chain_weight_allocation,
                        split_floor, storage_pool_distribution)


def test_promised_fee_credits():
    pools = PoolLedger(B_distr=4)
    acc = accrue_promised_fees(pools, "pub", {"main": 100, "storage": 50}, {"main": 0, "storage": 0}, 10,
                               [("s1", 9, "miner")])
    assert [(a.pool, a.amount) for a in acc] == [("main", 100), ("storage", 50)]
    pools.release(10)
    assert (pools.main_chain_pool, pools.storage_pool) == (100, 50)


def test_promised_fee_delay():
    pools = PoolLedger(B_distr=4)
    accrue_promised_fees(pools, "pub", {"main": 100}, {"main": 5}, 10)
    pools.release(14)
    assert pools.main_chain_pool == 0 and pools.total() == 100
    pools.release(15)
    assert pools.main_chain_pool == 100


def test_negative_accrual_rejected():
    with pytest.raises(ValueError):
        PoolLedger(4).accrue(Accrual("main", -1, 0, "x"))


# -- weighted allocation ------------------------------------------------------------

def test_allocation_example():
    assert main_chain_weight_allocation([[10, 10], [10], []]) == [20, 10, 0]


def test_allocation_without_wins():
    assert main_chain_weight_allocation([[], [], []], carry=50) == [0, 0, 0]


def test_allocation_single_block():
    assert main_chain_weight_allocation([[7]]) == [7]


def hand_allocation(window, carry=0):
    """Exact shares as fractions, floored, remainder to the first block that won."""
    total = carry + sum(sum(ws) for ws in window)
    W = sum(len(ws) for ws in window)
    if W == 0:
        return [0] * len(window)
    shares = [floor(Fraction(len(ws) * total, W)) for ws in window]
    for k, ws in enumerate(window):
        if ws:
            shares[k] += total - sum(shares)
            break
    return shares


def test_allocation_matches_hand_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        window = [[int(x) for x in rng.integers(0, 10**9, size=int(rng.poisson(0.7)))] for _ in range(n)]
        carry = int(rng.integers(0, 10**6))
        got = main_chain_weight_allocation(window, carry=carry)
        assert got == hand_allocation(window, carry)
        if any(window):
            assert sum(got) == carry + sum(map(sum, window))


@given(st.lists(st.lists(st.integers(0, 10**12), max_size=4), min_size=1, max_size=30))
def test_allocation_is_proportional_to_win_count(window):
    got = main_chain_weight_allocation(window)
    total, W = sum(map(sum, window)), sum(map(len, window))
    for ws, p in zip(window, got):
        if W:
            assert abs(p - Fraction(len(ws) * total, W)) < W + 1
        else:
            assert p == 0


# -- storage pools ------------------------------------------------------------------

def test_storage_pool_split():
    assert storage_pool_distribution(100, {"A": 30, "B": 70}) == {"A": 30, "B": 70}


def test_storage_pool_without_units_carries_over():
    assert storage_pool_distribution(100, {}) == {}


def test_split_floor_remainder_to_smallest_id():
    assert split_floor(10, {"b": 1, "a": 1, "c": 1}) == {"a": 4, "b": 3, "c": 3}


def test_derive_sm_pool():
    assert derive_sm_pool(200, 0.1) == 20
    assert derive_sm_pool(0, 0.5) == 0


# -- ledger windows -----------------------------------------------------------------

def test_window_distribution_conserves():
    pools = PoolLedger(B_distr=4)
    accrue_promised_fees(pools, "p1", {"main": 1000, "storage": 600}, {}, 2, [("s1", 1, "m1"), ("s2", 2, "m2")])
    pools.record_service("sm0", 3)
    pools.record_service("sm1", 1)
    pools.record_storage_tx("m1")
    before = pools.total()
    recs = pools.distribute_window(3, 1.0, Fraction(1, 10), Fraction(1, 2))
    paid = sum(r.amount for r in recs)
    assert paid + pools.total() == before
    by = {(r.recipient, r.pool): r.amount for r in recs}
    assert by[("m1", "main")] == 500 and by[("m2", "main")] == 500
    assert by[("sm0", "storage")] + by[("sm1", "storage")] == 540
    assert by[("m1", "storage_pow")] == 30 and pools.sm_pool == 30
    assert pools.window_start == 4


def test_half_of_promised_fee_held_back():
    pools = PoolLedger(B_distr=4)
    accrue_promised_fees(pools, "p1", {"main": 101}, {}, 0, [("s1", 0, "m1")])
    recs = pools.distribute_window(3, 0.5, 0, 0)
    assert [(r.recipient, r.amount) for r in recs] == [("m1", 50)]
    assert pools.main_chain_pool == 51


def test_window_end():
    pools = PoolLedger(B_distr=4)
    assert not pools.is_window_end(2) and pools.is_window_end(3)
