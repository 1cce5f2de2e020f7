import numpy as np
import pytest

from poaw.params import ProtocolParams
from poaw.storage import (DTMN, ChannelError, ClaimPayload, DtmnFailed, MicropaymentChannel, OrderBook, StorageError,
                          channel_update, check_retrieve, chunk_exchange, claim_channel, dtmn_payment_due,
                          enforce_timeouts, exchange_round_bound, match_deal, ping_liveness, prune_members,
                          signed_update, submit_ask, submit_bid, verify_deal)


def book_with_asks(n_asks, timeout=10):
    book = OrderBook()
    submit_bid(book, "b1", "client", 10, 100, 0, timeout)
    asks = [submit_ask(book, f"a{k}", f"sm{k}", "b1", 1) for k in range(n_asks)]
    return book, asks


# -- order book -------------------------------------------------------------------

def test_bid_expires_at_timeout():
    book, _ = book_with_asks(0, timeout=10)
    assert not book.bids["b1"].expired(9) and book.bids["b1"].expired(10)
    with pytest.raises(StorageError) as e:
        submit_ask(book, "late", "sm9", "b1", 10)
    assert e.value.reason == "expired_bid"


def test_bid_needs_funds():
    with pytest.raises(StorageError) as e:
        submit_bid(OrderBook(), "b", "c", 10, 100, 0, 5, balance=109)
    assert e.value.reason == "insufficient_funds"


def test_ask_locks_until_bid_expiry():
    book, asks = book_with_asks(1, timeout=10)
    assert asks[0].lock_until == 10


def test_duplicate_and_unknown_asks():
    book, _ = book_with_asks(1)
    with pytest.raises(StorageError) as e:
        submit_ask(book, "again", "sm0", "b1", 2)
    assert e.value.reason == "duplicate_ask"
    with pytest.raises(StorageError) as e:
        submit_ask(book, "x", "sm1", "nope", 2)
    assert e.value.reason == "unknown_bid"


def test_four_asks_are_not_enough():
    book, asks = book_with_asks(4)
    with pytest.raises(StorageError) as e:
        match_deal(book, "b1", asks, 2, 5)
    assert e.value.reason == "not_enough_asks"


def test_deal_forms_dtmn_and_verifies():
    book, asks = book_with_asks(5)
    deal, dtmn = match_deal(book, "b1", asks, 2, 5)
    assert verify_deal(deal, "client") and not verify_deal(deal, "mallory")
    assert dtmn.members == tuple(f"sm{k}" for k in range(5)) and dtmn.quorum == 3
    assert book.bids["b1"].status == "matched"
    with pytest.raises(StorageError):
        match_deal(book, "b1", asks, 3, 5)


def test_timeouts_release_asks_and_expire_bids():
    book, _ = book_with_asks(2, timeout=10)
    assert enforce_timeouts(book, 9, ProtocolParams()) == []
    kinds = sorted(e.kind for e in enforce_timeouts(book, 10, ProtocolParams()))
    assert kinds == ["ask_released", "ask_released", "bid_expired"]
    assert book.active == {}
    assert enforce_timeouts(book, 11, ProtocolParams()) == []


# -- liveness -----------------------------------------------------------------------

def failing(r_s, n_dead, timeout=3):
    members = tuple(f"m{k}" for k in range(r_s))
    d = DTMN("t", members, r_s, 0)
    ping_liveness(d, members[n_dead:], timeout + 1)
    return prune_members(d, timeout + 1, timeout)


def test_seven_members_tolerate_three_failures():
    assert failing(7, 3) == "active"
    assert failing(7, 4) == "failed"


def test_five_members_need_three_live():
    assert failing(5, 2) == "active"
    assert failing(5, 3) == "failed"


def test_pruning_is_sticky():
    d = DTMN("t", ("a", "b", "c"), 3, 0)
    ping_liveness(d, ["a", "b"], 5)
    prune_members(d, 5, 3)
    ping_liveness(d, ["c"], 6)
    assert d.live_members() == ["a", "b"] and d.last_ping["c"] == 0


# -- chunk exchange -----------------------------------------------------------------

def test_single_member_exchange_is_immediate():
    res = chunk_exchange(DTMN("t", ("a",), 1, 0), bytes(100))
    assert res.rounds == 0 and res.holdings["a"] == frozenset(range(12))


def test_exchange_within_round_bound():
    d = DTMN("t", tuple(f"m{k}" for k in range(7)), 7, 0)
    res = chunk_exchange(d, bytes(1000), 12)
    assert res.rounds <= exchange_round_bound(7, 12)
    assert all(h == frozenset(range(12)) for h in res.holdings.values())
    assert all(d.replicas.values()) and d.status == "active"


def test_exchange_survives_failure_mid_way():
    d = DTMN("t", tuple(f"m{k}" for k in range(7)), 7, 0)
    res = chunk_exchange(d, bytes(1000), 12, failures={3: ["m0", "m2"]})
    assert res.survivors == ("m1", "m3", "m4", "m5", "m6")
    assert all(h == frozenset(range(12)) for h in res.holdings.values())


def test_exchange_fails_below_quorum():
    d = DTMN("t", tuple(f"m{k}" for k in range(5)), 5, 0)
    with pytest.raises(DtmnFailed):
        chunk_exchange(d, bytes(100), 12, failures={1: ["m0", "m1", "m2"]})
    assert d.status == "failed"


def test_exchange_round_bound_random():
    rng = np.random.default_rng(8)
    for _ in range(150):
        n, c = int(rng.integers(1, 24)), int(rng.integers(1, 40))
        d = DTMN("t", tuple(f"m{k}" for k in range(n)), n, 0)
        assert chunk_exchange(d, bytes(200), c).rounds <= exchange_round_bound(n, c)


# -- micropayment channels ----------------------------------------------------------

def test_channel_three_updates():
    ch = MicropaymentChannel("c1", "client", "sm0", 100)
    for _ in range(3):
        channel_update(ch, signed_update(ch, 10))
    claim = claim_channel(ch, "task")
    assert (claim.balance_a, claim.balance_b) == (70, 30) and claim.signatures_valid()
    assert ClaimPayload.from_record(claim.to_record()) == claim


def test_channel_without_updates_refunds_payer():
    claim = claim_channel(MicropaymentChannel("c1", "client", "sm0", 100))
    assert (claim.balance_a, claim.balance_b) == (100, 0)


def test_channel_errors():
    ch = MicropaymentChannel("c1", "client", "sm0", 100)
    u1 = signed_update(ch, 10)
    channel_update(ch, u1)
    with pytest.raises(ChannelError) as e:
        channel_update(ch, u1)
    assert e.value.reason == "stale_seq"
    with pytest.raises(ChannelError) as e:
        channel_update(ch, signed_update(ch, 500))
    assert e.value.reason == "bad_balance"
    forged = signed_update(MicropaymentChannel("c1", "client", "mallory", 100), 50, seq=5)
    with pytest.raises(ChannelError) as e:
        channel_update(ch, forged)
    assert e.value.reason == "bad_signature"
    claim_channel(ch)
    with pytest.raises(ChannelError) as e:
        claim_channel(ch)
    assert e.value.reason == "already_claimed"
    with pytest.raises(ChannelError):
        MicropaymentChannel("c2", "a", "b", -1)


def test_tampered_claim_fails_signature_check():
    ch = MicropaymentChannel("c1", "client", "sm0", 100)
    channel_update(ch, signed_update(ch, 10))
    claim = claim_channel(ch)
    rec = claim.to_record() | {"balance_a": 0, "balance_b": 100}
    assert not ClaimPayload.from_record(rec).signatures_valid()


# -- retention and payment timing ---------------------------------------------------

def test_retention_window():
    p = ProtocolParams()
    check_retrieve(10 + p.timeout_retrieve - 1, 10, p)
    with pytest.raises(StorageError) as e:
        check_retrieve(10 + p.timeout_retrieve, 10, p)
    assert e.value.reason == "retention_expired"
    check_retrieve(10**9, None, p)  # not solved yet


def test_dtmn_payment_deferred_until_retrieval_timeout():
    p = ProtocolParams()
    assert not dtmn_payment_due(10 + p.timeout_retrieve - 1, 10, p)
    assert dtmn_payment_due(10 + p.timeout_retrieve, 10, p)
