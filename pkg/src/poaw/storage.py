"""Storage market and dynamic task masternode networks (dTMNs).

A client's Publish is a bid; storage miners answer with asks, and once at
least ``r_s`` asks are locked the parties sign a joint deal (the Stored
transaction) and the askers become the task's dTMN.  The dTMN replicates
the data by chunk exchange, pings the network every block, validates
solutions, and is paid through off-chain micropayment channels that are
claimed on-chain once per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .crypto import Signature, canonical, digest, sign, verify_signature
from .params import ProtocolParams


class StorageError(Exception):
    reason = "storage_error"

    def __init__(self, reason: str | None = None, detail: str = ""):
        if reason:
            self.reason = reason
        super().__init__(f"{self.reason}{': ' + detail if detail else ''}")


class DtmnFailed(StorageError):
    reason = "dtmn_failed"


class ChannelError(StorageError):
    pass


# -- order book ---------------------------------------------------------------

@dataclass
class BidOrder:
    bid_id: str
    client: str
    fee_sub: int
    fee_solve: int
    height: int
    timeout_publish: int
    status: str = "open"  # open | matched | expired

    @property
    def expires_at(self) -> int:
        return self.height + self.timeout_publish

    def expired(self, height: int) -> bool:
        return height >= self.expires_at


@dataclass
class AskOrder:
    ask_id: str
    miner: str
    bid_id: str
    height: int
    lock_until: int
    status: str = "open"  # open | matched | released


@dataclass
class DealOrder:
    bid_id: str
    ask_ids: tuple[str, ...]
    members: tuple[str, ...]
    height: int
    signatures: tuple[Signature, ...]


@dataclass
class OrderBook:
    bids: dict[str, BidOrder] = field(default_factory=dict)
    asks: dict[str, list[AskOrder]] = field(default_factory=dict)  # bid id -> asks
    deals: dict[str, DealOrder] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    active: dict[str, None] = field(default_factory=dict)  # bids with an open bid or ask, in order

    def audit(self, height: int, event: str, **fields) -> None:
        self.log.append({"height": height, "event": event, **fields})


def submit_bid(book: OrderBook, bid_id: str, client: str, fee_sub: int, fee_solve: int,
               height: int, timeout_publish: int, balance: int | None = None) -> BidOrder:
    """Post a bid; it stays matchable for ``timeout_publish`` blocks.

    Raises:
        StorageError(insufficient_funds): balance below fee_sub + fee_solve.
    """
    if balance is not None and balance < fee_sub + fee_solve:
        raise StorageError("insufficient_funds", client)
    bid = BidOrder(bid_id, client, fee_sub, fee_solve, height, timeout_publish)
    book.bids[bid_id] = bid
    book.asks.setdefault(bid_id, [])
    book.active[bid_id] = None
    book.audit(height, "bid", bid_id=bid_id, client=client, fee_sub=fee_sub, fee_solve=fee_solve)
    return bid


def submit_ask(book: OrderBook, ask_id: str, miner: str, bid_id: str, height: int) -> AskOrder:
    """An ask locks the miner's resources until the bid itself expires
    (``timeout_publish + T_bid - T_ask`` blocks from the ask)."""
    bid = book.bids.get(bid_id)
    if bid is None:
        raise StorageError("unknown_bid", bid_id)
    if bid.status != "open" or bid.expired(height):
        raise StorageError("expired_bid", bid_id)
    if any(a.miner == miner for a in book.asks[bid_id]):
        raise StorageError("duplicate_ask", miner)
    lock = bid.timeout_publish + bid.height - height
    ask = AskOrder(ask_id, miner, bid_id, height, height + lock)
    book.asks[bid_id].append(ask)
    book.audit(height, "ask", ask_id=ask_id, miner=miner, bid_id=bid_id, lock_until=ask.lock_until)
    return ask


@dataclass
class DTMN:
    task_ref: str
    members: tuple[str, ...]
    r_s: int
    formed_height: int
    last_ping: dict[str, int] = field(default_factory=dict)
    replicas: dict[str, bool] = field(default_factory=dict)
    pruned: set[str] = field(default_factory=set)
    status: str = "forming"  # forming | active | failed | done
    flags: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for m in self.members:
            self.last_ping.setdefault(m, self.formed_height)
            self.replicas.setdefault(m, False)

    @property
    def quorum(self) -> int:
        return self.r_s // 2 + 1

    def live_members(self) -> list[str]:
        return [m for m in self.members if m not in self.pruned]

    def ping(self, member: str, height: int) -> None:
        if member in self.members and member not in self.pruned:
            self.last_ping[member] = height

    def flag(self, height: int, member: str, note: str) -> None:
        """A lone member reporting dishonest peers; surfaced, never auto-resolved."""
        self.flags.append({"height": height, "member": member, "note": note})


def match_deal(book: OrderBook, bid_id: str, asks: Sequence[AskOrder], height: int,
               r_s: int) -> tuple[DealOrder, DTMN]:
    """Sign the joint deal for ``bid_id`` with the given asks and form the dTMN.

    Raises:
        StorageError: expired_bid, not_enough_asks or locked_resources_expired.
    """
    bid = book.bids.get(bid_id)
    if bid is None or bid.status != "open" or bid.expired(height):
        raise StorageError("expired_bid", bid_id)
    if len({a.miner for a in asks}) < r_s:
        raise StorageError("not_enough_asks", f"{len(asks)} < r_s={r_s}")
    for a in asks:
        if a.bid_id != bid_id or a.status != "open" or height >= a.lock_until:
            raise StorageError("locked_resources_expired", a.ask_id)
    members = tuple(sorted({a.miner for a in asks}))
    body = canonical({"bid": bid_id, "members": members, "height": height})
    sigs = (sign(bid.client, body),) + tuple(sign(m, body) for m in members)
    deal = DealOrder(bid_id, tuple(a.ask_id for a in asks), members, height, sigs)
    bid.status = "matched"
    for a in asks:
        a.status = "matched"
    book.deals[bid_id] = deal
    book.audit(height, "deal", bid_id=bid_id, members=list(members))
    return deal, DTMN(bid_id, members, r_s, height)


def verify_deal(deal: DealOrder, client: str) -> bool:
    body = canonical({"bid": deal.bid_id, "members": deal.members, "height": deal.height})
    signers = [s.signer for s in deal.signatures]
    return (signers == [client, *deal.members]
            and all(verify_signature(s, body) for s in deal.signatures))


# -- liveness -----------------------------------------------------------------

def ping_liveness(dtmn: DTMN, pings: Iterable[str], height: int) -> None:
    for m in pings:
        dtmn.ping(m, height)


def prune_members(dtmn: DTMN, height: int, ping_timeout: int) -> str:
    """Drop members silent for more than ``ping_timeout`` blocks; the dTMN
    fails once fewer than floor(r_s/2) + 1 members remain."""
    if dtmn.status in ("failed", "done"):
        return dtmn.status
    for m in dtmn.live_members():
        if height - dtmn.last_ping[m] > ping_timeout:
            dtmn.pruned.add(m)
    if len(dtmn.live_members()) < dtmn.quorum:
        dtmn.status = "failed"
    elif dtmn.status == "forming":
        dtmn.status = "active"
    return dtmn.status


# -- chunk exchange -----------------------------------------------------------

@dataclass
class ExchangeResult:
    rounds: int
    holdings: dict[str, frozenset[int]]
    survivors: tuple[str, ...]
    transfers: int


def chunk_exchange(dtmn: DTMN, data: bytes, n_chunks: int = 12,
                   failures: Mapping[int, Iterable[str]] | None = None,
                   max_rounds: int = 10_000) -> ExchangeResult:
    """Replicate ``data`` to every live member.

    The first member holds the client's upload.  In each round every member
    uploads at most one chunk and receives at most one.  The round's
    transfers are a maximum-weight assignment of senders to receivers that
    favours, in order, receivers missing the most chunks, the rarest chunk,
    and the partner across the hypercube dimension for this round (which
    alone is the binomial pipeline when the membership is a power of two).
    Each sender gives the rarest chunk its receiver lacks.  ``failures``
    maps a round number to members that drop out at its start.  Chunks with
    no surviving holder are re-uploaded by the client to the first live
    member.

    Raises:
        DtmnFailed: live membership fell below floor(r_s/2) + 1.
    """
    failures = failures or {}
    n_chunks = max(1, min(n_chunks, len(data) or 1))
    all_chunks = frozenset(range(n_chunks))
    members = list(dtmn.live_members())
    have: dict[str, set[int]] = {m: set() for m in members}
    if members:
        have[members[0]] = set(all_chunks)
    rounds = transfers = 0
    while True:
        for m in failures.get(rounds, ()):
            if m in have:
                del have[m]
                dtmn.pruned.add(m)
        if len(have) < dtmn.quorum:
            dtmn.status = "failed"
            raise DtmnFailed(detail=f"{len(have)} live members during chunk exchange")
        if all(h == all_chunks for h in have.values()):
            break
        if rounds >= max_rounds:
            raise DtmnFailed("exchange_stalled")
        moves = _exchange_round(members, have, all_chunks, rounds)
        for r, c in moves:
            have[r].add(c)
            transfers += 1
        rounds += 1
    for m in have:
        dtmn.replicas[m] = True
    if dtmn.status == "forming":
        dtmn.status = "active"
    return ExchangeResult(rounds, {m: frozenset(h) for m, h in have.items()}, tuple(sorted(have)), transfers)


def _exchange_round(members: list[str], have: dict[str, set[int]], all_chunks: frozenset,
                    rnd: int) -> list[tuple[str, int]]:
    """(receiver, chunk) transfers for one round."""
    live = [m for m in members if m in have]
    n, c = len(live), len(all_chunks)
    rarity = {k: sum(k in h for h in have.values()) for k in all_chunks}
    moves = []
    lost = all_chunks - set().union(*have.values())
    if lost:
        moves.append((live[0], min(lost)))
    busy = {live[0]} if lost else set()
    dim = 1 << (rnd % max(1, (n - 1).bit_length()))
    weights = np.zeros((n, n))
    pick = {}
    for i, s in enumerate(live):
        for j, r in enumerate(live):
            if i == j or r in busy:
                continue
            missing = have[s] - have[r]
            if not missing:
                continue
            k = min(missing, key=lambda q: (rarity[q], q))
            pick[i, j] = k
            weights[i, j] = 1 + (c - len(have[r])) * (n + 1) + (n - rarity[k]) + (n + 1) * (j == i ^ dim)
    if pick:
        for i, j in zip(*linear_sum_assignment(weights, maximize=True)):
            if (i, j) in pick:
                moves.append((live[j], pick[i, j]))
    return moves


def exchange_round_bound(n_members: int, n_chunks: int) -> int:
    return int(np.ceil(np.log2(max(n_members, 1)))) + n_chunks


def proof_of_storage(data: bytes, challenge: bytes) -> bytes:
    """Challenge response standing in for proof-of-spacetime."""
    return digest(data + challenge)


# -- micropayment channels ----------------------------------------------------

@dataclass
class MicropaymentChannel:
    channel_id: str
    party_a: str  # payer
    party_b: str  # payee
    deposit: int
    balance_a: int = -1
    balance_b: int = 0
    seq: int = 0
    status: str = "open"  # open | claimed
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.deposit < 0:
            raise ChannelError("negative_deposit")
        if self.balance_a < 0:
            self.balance_a = self.deposit - self.balance_b


@dataclass(frozen=True)
class ChannelUpdate:
    channel_id: str
    seq: int
    balance_a: int
    balance_b: int
    sig_a: Signature
    sig_b: Signature

    def body(self) -> bytes:
        return canonical([self.channel_id, self.seq, self.balance_a, self.balance_b])


@dataclass(frozen=True)
class ClaimPayload:
    channel_id: str
    party_a: str
    party_b: str
    deposit: int
    balance_a: int
    balance_b: int
    seq: int
    task_ref: str = ""
    sig_a: Signature | None = None
    sig_b: Signature | None = None

    def body(self) -> bytes:
        return canonical([self.channel_id, self.seq, self.balance_a, self.balance_b])

    def signatures_valid(self) -> bool:
        body = self.body()
        return (self.sig_a is not None and self.sig_b is not None
                and self.sig_a.signer == self.party_a and self.sig_b.signer == self.party_b
                and verify_signature(self.sig_a, body) and verify_signature(self.sig_b, body))

    def to_record(self) -> dict:
        return {"channel_id": self.channel_id, "party_a": self.party_a, "party_b": self.party_b,
                "deposit": self.deposit, "balance_a": self.balance_a, "balance_b": self.balance_b,
                "seq": self.seq, "task_ref": self.task_ref,
                "sig_a": self.sig_a.to_record() if self.sig_a else None,
                "sig_b": self.sig_b.to_record() if self.sig_b else None}

    @classmethod
    def from_record(cls, rec: dict) -> "ClaimPayload":
        rec = dict(rec)
        for k in ("sig_a", "sig_b"):
            rec[k] = Signature.from_record(rec[k]) if rec.get(k) else None
        return cls(**rec)


def signed_update(channel: MicropaymentChannel, delta: int, seq: int | None = None) -> ChannelUpdate:
    """Both parties sign a shift of ``delta`` atoms from A to B."""
    seq = channel.seq + 1 if seq is None else seq
    a, b = channel.balance_a - delta, channel.balance_b + delta
    body = canonical([channel.channel_id, seq, a, b])
    return ChannelUpdate(channel.channel_id, seq, a, b, sign(channel.party_a, body), sign(channel.party_b, body))


def channel_update(channel: MicropaymentChannel, update: ChannelUpdate) -> MicropaymentChannel:
    """Apply an off-chain update.

    Raises:
        ChannelError: bad_signature, stale_seq, or channel_closed / bad_balance.
    """
    if channel.status != "open":
        raise ChannelError("channel_closed")
    body = update.body()
    if (update.sig_a.signer != channel.party_a or update.sig_b.signer != channel.party_b
            or not verify_signature(update.sig_a, body) or not verify_signature(update.sig_b, body)):
        raise ChannelError("bad_signature")
    if update.seq <= channel.seq:
        raise ChannelError("stale_seq", f"{update.seq} <= {channel.seq}")
    if update.balance_a < 0 or update.balance_b < 0 or update.balance_a + update.balance_b != channel.deposit:
        raise ChannelError("bad_balance")
    channel.balance_a, channel.balance_b, channel.seq = update.balance_a, update.balance_b, update.seq
    channel.log.append({"seq": update.seq, "balance_a": update.balance_a, "balance_b": update.balance_b})
    return channel


def claim_channel(channel: MicropaymentChannel, task_ref: str = "") -> ClaimPayload:
    """Close the channel; only the final balances go on-chain."""
    if channel.status != "open":
        raise ChannelError("already_claimed", channel.channel_id)
    channel.status = "claimed"
    body = canonical([channel.channel_id, channel.seq, channel.balance_a, channel.balance_b])
    return ClaimPayload(channel.channel_id, channel.party_a, channel.party_b, channel.deposit,
                        channel.balance_a, channel.balance_b, channel.seq, task_ref,
                        sign(channel.party_a, body), sign(channel.party_b, body))


# -- timeouts -----------------------------------------------------------------

def storage_commitment_until(stored_height: int, params: ProtocolParams) -> int:
    return stored_height + params.timeout_freeze


def retention_until(solved_height: int, params: ProtocolParams) -> int:
    return solved_height + params.timeout_retrieve


def check_retrieve(height: int, solved_height: int | None, params: ProtocolParams) -> None:
    """Raises StorageError(retention_expired) once the retention window closed."""
    if solved_height is not None and height >= retention_until(solved_height, params):
        raise StorageError("retention_expired")


def dtmn_payment_due(height: int, solved_height: int, params: ProtocolParams) -> bool:
    """dTMN members are paid only after the client's retrieval window."""
    return height >= retention_until(solved_height, params)


@dataclass(frozen=True)
class Expiration:
    kind: str  # bid_expired | ask_released | commitment_ended | retention_ended
    ref: str
    height: int


def enforce_timeouts(book: OrderBook, height: int, params: ProtocolParams,
                     stored: Mapping[str, int] | None = None,
                     solved: Mapping[str, int] | None = None) -> list[Expiration]:
    """Apply every storage timeout due at ``height``.

    ``stored`` maps task -> Stored height, ``solved`` task -> Seal height.
    """
    out = []
    for bid_id in book.active:
        bid = book.bids[bid_id]
        if bid.status == "open" and bid.expired(height):
            bid.status = "expired"
            out.append(Expiration("bid_expired", bid.bid_id, height))
    for bid_id in list(book.active):
        for a in book.asks[bid_id]:
            if a.status == "open" and height >= a.lock_until:
                a.status = "released"
                out.append(Expiration("ask_released", a.ask_id, height))
        if book.bids[bid_id].status != "open" and all(a.status != "open" for a in book.asks[bid_id]):
            del book.active[bid_id]
    for ref, h in sorted((stored or {}).items()):
        if height == storage_commitment_until(h, params):
            out.append(Expiration("commitment_ended", ref, height))
    for ref, h in sorted((solved or {}).items()):
        if height == retention_until(h, params):
            out.append(Expiration("retention_ended", ref, height))
    for e in out:
        book.audit(height, e.kind, ref=e.ref)
    return out
