"""Blocks, transactions, ledger state and the hybrid fork-choice rule.

PoW miners propose blocks; the five tickets drawn from the parent's header
seed vote on the parent, and a block is valid only with a majority of
approving votes.  All amounts are integer atoms.  A block is applied in
three steps: ``begin_block`` (votes, coinbase, ticket maturity), one
``apply_tx`` per transaction, and ``finish_block`` (expiry, timeouts,
competition failures, pool distribution).
"""

from __future__ import annotations

import copy
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import competition as cp
from .crypto import canonical, digest, sign
from .params import MAX_TARGET, ProtocolParams
from .pools import PoolLedger, accrue_promised_fees, split_floor
from .storage import (DTMN, ClaimPayload, MicropaymentChannel, OrderBook, StorageError,
                      enforce_timeouts, match_deal, ping_liveness, prune_members, submit_ask,
                      submit_bid)
from .tickets import (TicketError, TicketPool, compute_ticket_price, expire_tickets,
                      purchase_ticket, select_voters)

GENESIS_PARENT = b"\x00" * 32


class TxKind(str, Enum):
    PAYMENT = "Payment"
    TICKET_PURCHASE = "TicketPurchase"
    VOTE = "Vote"
    COINBASE_MINT = "CoinbaseMint"
    PUBLISH = "Publish"
    STORED = "Stored"
    SOLVE = "Solve"
    VALIDATE = "Validate"
    SEAL = "Seal"
    BID = "Bid"
    ASK = "Ask"
    DEAL = "Deal"
    MICROPAYMENT_CLAIM = "MicropaymentClaim"
    POOL_DISTRIBUTION = "PoolDistribution"
    CHANNEL_OPEN = "ChannelOpen"


PAYLOAD_TYPES = {
    TxKind.PUBLISH: cp.PublishPayload,
    TxKind.STORED: cp.StoredPayload,
    TxKind.SOLVE: cp.SolvePayload,
    TxKind.VALIDATE: cp.ValidatePayload,
    TxKind.SEAL: cp.SealPayload,
    TxKind.MICROPAYMENT_CLAIM: ClaimPayload,
}

# kinds that count as storage work for the PoW signer that includes them
STORAGE_KINDS = frozenset({TxKind.ASK, TxKind.DEAL, TxKind.STORED, TxKind.VALIDATE,
                           TxKind.SEAL, TxKind.MICROPAYMENT_CLAIM})
# kinds produced by the protocol itself, never by users
PROTOCOL_KINDS = frozenset({TxKind.VOTE, TxKind.POOL_DISTRIBUTION, TxKind.BID})


class IllegalTx(Exception):
    def __init__(self, tx_id: str, reason: str, detail: str = ""):
        self.tx_id, self.reason = tx_id, reason
        super().__init__(f"illegal_tx({tx_id}, {reason}){': ' + detail if detail else ''}")


class BlockRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class Transaction:
    id: str
    kind: TxKind
    payload: Any
    fee_tr: int = 0
    sender: str = ""

    def to_record(self) -> dict:
        p = self.payload.to_record() if hasattr(self.payload, "to_record") else self.payload
        return {"id": self.id, "kind": self.kind.value, "sender": self.sender,
                "fee_tr": self.fee_tr, "payload": p}

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        kind = TxKind(rec["kind"])
        payload = rec["payload"]
        if kind in PAYLOAD_TYPES:
            payload = PAYLOAD_TYPES[kind].from_record(payload)
        return cls(rec["id"], kind, payload, rec["fee_tr"], rec["sender"])


def coinbase_tx(height: int, signer: str, amount: int) -> Transaction:
    return Transaction(f"coinbase:{height}", TxKind.COINBASE_MINT, {"to": signer, "amount": amount}, 0, signer)


@dataclass(frozen=True)
class Vote:
    ticket_id: int
    owner: str
    parent_digest: bytes
    approve: bool = True
    tag: bytes = b""

    @classmethod
    def cast(cls, ticket_id: int, owner: str, parent_digest: bytes, approve: bool = True) -> "Vote":
        tag = sign(owner, cls._body(ticket_id, parent_digest, approve)).tag
        return cls(ticket_id, owner, parent_digest, approve, tag)

    @staticmethod
    def _body(ticket_id: int, parent_digest: bytes, approve: bool) -> bytes:
        return b"vote|%d|%s|%d" % (ticket_id, parent_digest.hex().encode(), approve)

    def signature_valid(self) -> bool:
        return sign(self.owner, self._body(self.ticket_id, self.parent_digest, self.approve)).tag == self.tag

    def to_record(self) -> dict:
        return {"ticket_id": self.ticket_id, "owner": self.owner,
                "parent_digest": self.parent_digest.hex(), "approve": self.approve, "tag": self.tag.hex()}

    @classmethod
    def from_record(cls, rec: dict) -> "Vote":
        return cls(rec["ticket_id"], rec["owner"], bytes.fromhex(rec["parent_digest"]),
                   rec["approve"], bytes.fromhex(rec["tag"]))


@dataclass(frozen=True)
class Block:
    height: int
    parent_digest: bytes
    signer: str
    target: int
    timestamp: int
    votes: tuple[Vote, ...] = ()
    txs: tuple[Transaction, ...] = ()
    pings: tuple[str, ...] = ()
    nonce: int = 0

    @cached_property
    def header(self) -> bytes:
        """Header bytes without the nonce."""
        tx_root = digest(canonical([t.to_record() for t in self.txs]))
        vote_root = digest(canonical([v.to_record() for v in self.votes]))
        return canonical([self.height, self.parent_digest, self.signer, self.target,
                          self.timestamp, tx_root, vote_root, list(self.pings)])

    @cached_property
    def digest(self) -> bytes:
        return pow_digest(self.header, self.nonce)

    @property
    def header_seed(self) -> bytes:
        return digest(b"seed" + self.digest)

    @property
    def approving_votes(self) -> int:
        return sum(1 for v in self.votes if v.approve)

    def to_record(self) -> dict:
        return {"height": self.height, "parent_digest": self.parent_digest.hex(),
                "signer": self.signer, "target": str(self.target), "timestamp": self.timestamp,
                "nonce": self.nonce, "votes": [v.to_record() for v in self.votes],
                "txs": [t.to_record() for t in self.txs], "pings": list(self.pings)}

    @classmethod
    def from_record(cls, rec: dict) -> "Block":
        return cls(rec["height"], bytes.fromhex(rec["parent_digest"]), rec["signer"],
                   int(rec["target"]), rec["timestamp"],
                   tuple(Vote.from_record(v) for v in rec["votes"]),
                   tuple(Transaction.from_record(t) for t in rec["txs"]),
                   tuple(rec["pings"]), rec["nonce"])

    def with_nonce(self, nonce: int) -> "Block":
        b = Block(self.height, self.parent_digest, self.signer, self.target, self.timestamp,
                  self.votes, self.txs, self.pings, nonce)
        b.__dict__["header"] = self.header
        return b


# -- proof of work ------------------------------------------------------------

@dataclass(frozen=True)
class PowProof:
    nonce: int
    digest: bytes
    attempts: int


def pow_digest(header: bytes, nonce: int) -> bytes:
    return digest(header + nonce.to_bytes(8, "big"))


def verify_pow(header: bytes, nonce: int, target: int) -> bool:
    return int.from_bytes(pow_digest(header, nonce), "big") < target


def solve_pow(header: bytes, target: int, start: int = 0, max_attempts: int | None = None) -> PowProof | None:
    """Brute-force the first nonce with digest(header || nonce) < target.
    Returns None (not found) when ``max_attempts`` runs out."""
    if not 0 < target <= MAX_TARGET:
        raise ValueError("target must lie in (0, 2^256]")
    nonce, tries = start, 0
    while max_attempts is None or tries < max_attempts:
        d = pow_digest(header, nonce)
        tries += 1
        if int.from_bytes(d, "big") < target:
            return PowProof(nonce, d, tries)
        nonce += 1
    return None


def mine_block(block: Block) -> tuple[Block, int]:
    proof = solve_pow(block.header, block.target)
    return block.with_nonce(proof.nonce), proof.attempts


def adjust_difficulty(recent: Sequence, old_target: int, target_interval: float) -> int:
    """Multiplicative retarget: old * observed mean interval / target interval,
    clamped to [old/4, old*4] and to the digest range.

    ``recent`` holds timestamps (or blocks) of consecutive blocks.
    """
    ts = [getattr(b, "timestamp", b) for b in recent]
    if len(ts) < 2:
        return old_target
    observed = ts[-1] - ts[0]
    new = old_target * observed // (target_interval * (len(ts) - 1)) if observed > 0 else old_target // 4
    new = min(max(new, old_target // 4), old_target * 4)
    return int(min(max(new, 1), MAX_TARGET))


def simulate_difficulty(params: ProtocolParams, n_blocks: int, hash_rate: float | Sequence[float],
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Block intervals and targets under the retarget rule, drawing attempts
    from the geometric law of the puzzle.  ``hash_rate`` is attempts per tick."""
    rates = np.broadcast_to(np.asarray(hash_rate, dtype=float), (n_blocks,))
    target = params.pow_target
    w = params.difficulty_window
    ts = [0.0]
    intervals = np.empty(n_blocks)
    targets = np.empty(n_blocks)
    for k in range(n_blocks):
        attempts = rng.geometric(target / MAX_TARGET)
        intervals[k] = attempts / rates[k]
        targets[k] = target
        ts.append(ts[-1] + intervals[k])
        if (k + 1) % w == 0:
            window = [int(round(t)) for t in ts[-(w + 1):]]
            target = adjust_difficulty(window, target, params.target_interval)
    return intervals, targets


# -- ledger state -------------------------------------------------------------

@dataclass(frozen=True)
class GenesisConfig:
    balances: Mapping[str, int]
    tickets: tuple[tuple[str, int, int], ...] = ()  # (owner, price, live height <= 0)
    timestamp: int = 0

    def to_record(self) -> dict:
        return {"balances": dict(sorted(self.balances.items())),
                "tickets": [list(t) for t in self.tickets], "timestamp": self.timestamp}

    @classmethod
    def from_record(cls, rec: dict) -> "GenesisConfig":
        return cls(rec["balances"], tuple(tuple(t) for t in rec["tickets"]), rec.get("timestamp", 0))


def genesis_block(config: GenesisConfig) -> Block:
    return Block(0, GENESIS_PARENT, "genesis", MAX_TARGET, config.timestamp,
                 txs=(Transaction("genesis", TxKind.PAYMENT, config.to_record()),))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self):
        return self.accepted


class LedgerState:
    """Everything a full node derives from the chain.  A plain value: copy it
    to explore a block without touching the original."""

    def __init__(self, params: ProtocolParams, genesis: GenesisConfig, journal: bool = False):
        self.params = params
        self.balances: dict[str, int] = {k: int(v) for k, v in genesis.balances.items()}
        self.vstakes: dict[str, int] = {}
        self.tickets = TicketPool(params)
        self.pools = PoolLedger(params.B_distr)
        self.competitions: dict[str, cp.CompetitionState] = {}
        self.book = OrderBook()
        self.dtmns: dict[str, DTMN] = {}
        self.open_refs: dict[str, None] = {}  # competitions still open, publish order
        self.active_dtmns: dict[str, None] = {}  # dTMNs forming or active
        self.channels: dict[str, MicropaymentChannel] = {}
        self.escrows: dict[str, int] = {}
        self.dtmn_payments: list[tuple[int, str]] = []  # (due height, publish ref)
        self.seen_ids: set[str] = set()
        self.counters = {"coinbase": 0, "stake_reward": 0, "vstake_converted": 0,
                         "vstake_minted": 0, "vstake_burned": 0, "vstake_refunded": 0,
                         "pool_accrued": 0, "pool_paid": 0}
        self.journal: list[tuple[int, str, str, int]] | None = [] if journal else None
        self.vjournal: list[tuple[int, str, str, int]] | None = [] if journal else None
        self.events: list[dict] = []
        for owner, y, live_h in sorted(genesis.tickets, key=lambda t: t[2]):
            self.tickets.seed_live(owner, int(y), int(live_h))
        self.initial_supply = sum(self.balances.values()) + self.tickets.locked_currency()
        gb = genesis_block(genesis)
        self.height = 0
        self.tip_digest = gb.digest
        self.tip_seed = gb.header_seed
        self.next_target = params.pow_target
        self.timestamps: deque[int] = deque([genesis.timestamp], maxlen=params.difficulty_window + 1)
        self._block: dict | None = None

    # -- money movement ------------------------------------------------------

    def credit(self, account: str, amount: int, kind: str) -> None:
        if amount == 0:
            return
        new = self.balances.get(account, 0) + amount
        if new < 0:
            raise ValueError(f"negative balance for {account}")
        self.balances[account] = new
        if self.journal is not None:
            self.journal.append((self.height, account, kind, amount))

    def credit_vstakes(self, account: str, amount: int, kind: str) -> None:
        if amount == 0:
            return
        self.vstakes[account] = self.vstakes.get(account, 0) + amount
        if self.vjournal is not None:
            self.vjournal.append((self.height, account, kind, amount))

    def event(self, kind: str, **fields) -> None:
        self.events.append({"height": self.height, "event": kind, **fields})

    # -- block processing ----------------------------------------------------

    def expected_voters(self) -> list | None:
        """Tickets drawn by the current tip's seed, or None while the pool is
        too small to vote."""
        if len(self.tickets.live) < self.params.votes_per_block:
            return None
        return select_voters(self.tip_seed, self.tickets)

    def check_header(self, block: Block) -> None:
        if block.height != self.height + 1 or block.parent_digest != self.tip_digest:
            raise BlockRejected("bad_parent")
        if block.target != self.next_target:
            raise BlockRejected("bad_difficulty")
        if not verify_pow(block.header, block.nonce, block.target):
            raise BlockRejected("bad_pow")

    def _check_votes(self, votes: Sequence[Vote], parent_digest: bytes) -> list:
        selected = self.expected_voters()
        if selected is None:
            if votes:
                raise BlockRejected("invalid_vote", "pool too small to vote")
            return []
        ids = {t.id: t for t in selected}
        seen = set()
        for v in votes:
            t = ids.get(v.ticket_id)
            if t is None or v.ticket_id in seen or v.owner != t.owner:
                raise BlockRejected("invalid_vote", f"ticket {v.ticket_id}")
            if v.parent_digest != parent_digest or not v.signature_valid():
                raise BlockRejected("invalid_vote", f"ticket {v.ticket_id}")
            seen.add(v.ticket_id)
        if sum(1 for v in votes if v.approve) < self.params.vote_majority:
            raise BlockRejected("insufficient_votes", f"{len(votes)} votes")
        return selected

    def begin_block(self, height: int, signer: str, votes: Sequence[Vote] = (),
                    pings: Iterable[str] = (), parent_digest: bytes | None = None) -> None:
        """Apply the block header: votes, missed tickets, releases, coinbase,
        ticket maturity and dTMN pings."""
        if height != self.height + 1:
            raise BlockRejected("bad_parent")
        selected = self._check_votes(votes, self.tip_digest if parent_digest is None else parent_digest)
        self.height = height
        voted = {v.ticket_id for v in votes}
        for t in selected:
            if t.id in voted:
                self.tickets.record_vote(t.id, height)
            else:
                s = self.tickets.record_miss(t.id, height)
                self.credit(s.owner, s.payout, "ticket_refund")
                self.credit_vstakes(s.owner, s.vstake_refund, "ticket_refund")
                self.counters["vstake_refunded"] += s.vstake_refund
                self.event("ticket_missed", ticket=t.id, owner=t.owner)
        for s in self.tickets.release_due(height):
            cash = s.y - s.x
            self.counters["stake_reward"] += s.payout - s.x - cash
            self.counters["vstake_converted"] += s.x
            self.credit(s.owner, s.payout, "stake_reward")
        self.tickets.mature(height)
        for ref in self.active_dtmns:
            ping_liveness(self.dtmns[ref], pings, height)
        self._block = {"signer": signer, "n": 0, "coinbase": False, "price": compute_ticket_price(self.tickets)}

    def apply_tx(self, tx: Transaction) -> None:
        """Validate then apply one transaction.  A rejected transaction
        leaves the state untouched."""
        blk = self._block
        if blk is None:
            raise RuntimeError("apply_tx outside a block")
        if tx.id in self.seen_ids:
            raise IllegalTx(tx.id, "duplicate_id")
        if tx.fee_tr < 0:
            raise IllegalTx(tx.id, "negative_fee")
        if blk["n"] == 0 and tx.kind is not TxKind.COINBASE_MINT:
            raise IllegalTx(tx.id, "missing_coinbase")
        if blk["n"] >= self.params.max_block_txs + 1:
            raise IllegalTx(tx.id, "block_full")
        handler = _HANDLERS.get(tx.kind)
        if handler is None or tx.kind in PROTOCOL_KINDS:
            raise IllegalTx(tx.id, "protocol_generated" if tx.kind in PROTOCOL_KINDS else "unknown_kind")
        handler(self, tx, blk)
        if tx.fee_tr and tx.kind is not TxKind.COINBASE_MINT:
            self.credit(tx.sender, -tx.fee_tr, "fee_paid")
            self.credit(blk["signer"], tx.fee_tr, "fee_earned")
        if tx.kind in STORAGE_KINDS:
            self.pools.record_storage_tx(blk["signer"])
        self.seen_ids.add(tx.id)
        blk["n"] += 1

    def _need(self, tx: Transaction, amount: int) -> None:
        if self.balances.get(tx.sender, 0) < amount + tx.fee_tr:
            raise IllegalTx(tx.id, "insufficient_funds")

    def finish_block(self, block_digest: bytes, timestamp: int) -> None:
        h = self.height
        if self._block is None or not self._block["coinbase"]:
            raise BlockRejected("missing_coinbase")
        for s in expire_tickets(self.tickets, h):
            self.credit(s.owner, s.payout, "ticket_refund")
            self.credit_vstakes(s.owner, s.vstake_refund, "ticket_refund")
            self.counters["vstake_refunded"] += s.vstake_refund
        self._storage_upkeep(h)
        self._competition_upkeep(h)
        self.pools.release(h)
        if self.pools.is_window_end(h):
            p = self.params
            for rec in self.pools.distribute_window(h, p.pf_half, p.storage_pow_share, p.P_SMPool):
                self.credit(rec.recipient, rec.amount, f"pool_{rec.pool}")
                self.counters["pool_paid"] += rec.amount
        self.tip_digest = block_digest
        self.tip_seed = digest(b"seed" + block_digest)
        self.timestamps.append(timestamp)
        w = self.params.difficulty_window
        if h % w == 0 and len(self.timestamps) == w + 1:
            self.next_target = adjust_difficulty(self.timestamps, self.next_target, self.params.target_interval)
        self._block = None

    def apply_block(self, block: Block) -> None:
        """Apply ``block`` in place.  On rejection the state is left partially
        updated, so callers validating untrusted blocks work on a copy."""
        self.check_header(block)
        self.begin_block(block.height, block.signer, block.votes, block.pings, block.parent_digest)
        for tx in block.txs:
            self.apply_tx(tx)
        self.finish_block(block.digest, block.timestamp)

    # -- upkeep ---------------------------------------------------------------

    def _fail_competition(self, comp: cp.CompetitionState, reason: str) -> None:
        """Abort: no seal, no mint, no promised fee.  The client gets the
        escrow back, except that fee_sub still pays the dTMN when it did its
        job and nobody solved."""
        comp.status, comp.failure = "failed", reason
        ref = comp.publish_ref
        pub = comp.publish
        if reason == "no_valid_solves":
            self.escrows[ref] -= pub.fee_solve
            self.credit(pub.client, pub.fee_solve, "refund")
            self.dtmn_payments.append((self.height + self.params.timeout_retrieve, ref))
        else:
            self.credit(pub.client, self.escrows.pop(ref), "refund")
        self.event("competition_failed", publish_ref=ref, reason=reason)

    def _storage_upkeep(self, h: int) -> None:
        p = self.params
        for ref in list(self.active_dtmns):
            d = self.dtmns[ref]
            if d.status in ("forming", "active") and prune_members(d, h, p.ping_timeout) == "failed":
                comp = self.competitions.get(ref)
                if comp is not None and comp.status == "open":
                    self._fail_competition(comp, "dtmn_failed")
            if d.status not in ("forming", "active"):
                del self.active_dtmns[ref]
        for e in enforce_timeouts(self.book, h, p):
            if e.kind == "bid_expired":
                comp = self.competitions.get(e.ref)
                if comp is not None and comp.status == "open":
                    self._fail_competition(comp, "expired_bid")
        due = [x for x in self.dtmn_payments if x[0] <= h]
        if due:
            self.dtmn_payments = [x for x in self.dtmn_payments if x[0] > h]
            for _, ref in due:
                self._pay_dtmn(ref)

    def _pay_dtmn(self, ref: str) -> None:
        d = self.dtmns[ref]
        amount = self.escrows.pop(ref)
        members = d.live_members() or list(d.members)
        for m, v in split_floor(amount, {m: 1 for m in members}).items():
            self.credit(m, v, "dtmn_fee")
        d.status = "done" if d.status != "failed" else d.status
        self.event("dtmn_paid", publish_ref=ref, amount=amount)

    def _competition_upkeep(self, h: int) -> None:
        p = self.params
        for ref in list(self.open_refs):
            comp = self.competitions[ref]
            if comp.status != "open":
                del self.open_refs[ref]
                continue
            if comp.stored_height is None:
                bid = self.book.bids[comp.publish_ref]
                if bid.status == "matched" and h >= bid.expires_at + p.timeout_publish:
                    self._fail_competition(comp, "not_stored")
                continue
            seal_start = comp.boundaries()[3]
            if h >= seal_start + p.NB_seal_timeout:
                self._fail_competition(comp, "no_consensus")

    # -- invariants -----------------------------------------------------------

    def locked_in_channels(self) -> int:
        return sum(c.deposit for c in self.channels.values() if c.status == "open")

    def currency_total(self, recount: bool = True) -> int:
        return (sum(self.balances.values()) + self.pools.total() + self.tickets.locked_currency(recount)
                + sum(self.escrows.values()) + self.locked_in_channels())

    def expected_currency(self) -> int:
        c = self.counters
        return self.initial_supply + c["coinbase"] + c["stake_reward"] + c["vstake_converted"]

    def check_invariants(self, full: bool = True) -> list[str]:
        """Empty list when every ledger invariant holds.  ``full=False`` uses
        the running ticket totals and only re-checks open competitions."""
        bad = []
        if any(v < 0 for v in self.balances.values()):
            bad.append("negative_balance")
        if any(v < 0 for v in self.vstakes.values()):
            bad.append("negative_vstakes")
        if any(v < 0 for v in self.pools.balances.values()):
            bad.append("negative_pool")
        total = self.currency_total(full)
        if total != self.expected_currency():
            bad.append(f"currency {total} != {self.expected_currency()}")
        c = self.counters
        if c["pool_accrued"] != c["pool_paid"] + self.pools.total():
            bad.append(f"pools: accrued {c['pool_accrued']} != paid {c['pool_paid']} + held {self.pools.total()}")
        locked_v = self.tickets.locked_vstakes(full)
        v_total = sum(self.vstakes.values()) + locked_v + c["vstake_converted"]
        if v_total != c["vstake_minted"]:
            bad.append(f"vstakes {v_total} != minted {c['vstake_minted']}")
        if c["vstake_burned"] != locked_v + c["vstake_converted"] + c["vstake_refunded"]:
            bad.append("vstake burn accounting")
        if full and (self.tickets.locked_currency() != self.tickets.locked_currency(True)
                     or self.tickets.locked_vstakes() != self.tickets.locked_vstakes(True)):
            bad.append("running ticket totals drifted")
        comps = self.competitions.values() if full else (self.competitions[r] for r in self.open_refs)
        for comp in comps:
            if comp.stored_height is None:
                continue
            _, f, v, _ = comp.boundaries()
            if any(not f <= a.height < v for a in comp.admitted_solves):
                bad.append(f"solve outside compete window in {comp.publish_ref}")
        m = self.params.ticket_maturity
        for _, tid in self.tickets.awaiting_release:
            t = self.tickets.tickets[tid]
            if t.vote_height is not None and t.vote_height < t.purchase_height + m:
                bad.append(f"ticket {t.id} voted before maturity")
        return bad

    def to_record(self) -> dict:
        comps = {ref: {"status": c.status, "failure": c.failure, "stored_height": c.stored_height,
                       "winners": list(c.winners), "solves": [a.solve_id for a in c.admitted_solves]}
                 for ref, c in sorted(self.competitions.items())}
        return {"height": self.height, "tip": self.tip_digest.hex(), "target": str(self.next_target),
                "balances": dict(sorted(self.balances.items())),
                "vstakes": dict(sorted(self.vstakes.items())),
                "tickets": self.tickets.snapshot(), "live": list(self.tickets.live),
                "pools": dict(self.pools.balances),
                "pending": [[a.pool, a.amount, a.payable_after] for a in self.pools.pending],
                "competitions": comps, "escrows": dict(sorted(self.escrows.items())),
                "dtmns": {r: [d.status, sorted(d.live_members())] for r, d in sorted(self.dtmns.items())},
                "channels": {k: [c.balance_a, c.balance_b, c.status] for k, c in sorted(self.channels.items())},
                "counters": dict(self.counters)}

    def fingerprint(self) -> bytes:
        return digest(canonical(self.to_record()))

    def copy(self) -> "LedgerState":
        return copy.deepcopy(self)


# -- transaction handlers -----------------------------------------------------
# Each handler validates fully before it mutates anything.

def _tx_coinbase(st: LedgerState, tx: Transaction, blk: dict) -> None:
    p = tx.payload
    if blk["coinbase"] or blk["n"] != 0:
        raise IllegalTx(tx.id, "extra_coinbase")
    if p.get("to") != blk["signer"] or p.get("amount") != st.params.coinbase:
        raise IllegalTx(tx.id, "bad_coinbase")
    st.counters["coinbase"] += p["amount"]
    st.credit(p["to"], p["amount"], "coinbase")
    blk["coinbase"] = True


def _tx_payment(st: LedgerState, tx: Transaction, blk: dict) -> None:
    amount = tx.payload.get("amount", -1)
    if not isinstance(amount, int) or amount < 0 or not tx.payload.get("to"):
        raise IllegalTx(tx.id, "bad_payment")
    st._need(tx, amount)
    st.credit(tx.sender, -amount, "payment")
    st.credit(tx.payload["to"], amount, "payment")


def _tx_ticket(st: LedgerState, tx: Transaction, blk: dict) -> None:
    y, x = tx.payload.get("y", 0), tx.payload.get("x", 0)
    if y < blk["price"]:
        raise IllegalTx(tx.id, "price_too_low", f"{y} < {blk['price']}")
    if not 0 <= x <= y:
        raise IllegalTx(tx.id, "bad_ticket")
    st._need(tx, y - x)
    before = st.balances.get(tx.sender, 0)
    try:
        purchase_ticket(st.tickets, st.balances, st.vstakes, tx.sender, y, x, st.height)
    except TicketError as e:
        raise IllegalTx(tx.id, e.reason) from None
    if st.journal is not None:
        st.journal.append((st.height, tx.sender, "ticket_purchase", st.balances[tx.sender] - before))
    if x and st.vjournal is not None:
        st.vjournal.append((st.height, tx.sender, "ticket_burn", -x))
    st.counters["vstake_burned"] += x


def _tx_publish(st: LedgerState, tx: Transaction, blk: dict) -> None:
    pub: cp.PublishPayload = tx.payload
    p = st.params
    if tx.sender != pub.client:
        raise IllegalTx(tx.id, "bad_signer")
    shares = {k: v.p for k, v in pub.pf_solve.items()}
    if shares.get("main", 0) < p.p_pool1 or shares.get("storage", 0) < p.p_pool2:
        raise IllegalTx(tx.id, "pf_below_protocol")
    st._need(tx, pub.fee_sub + pub.fee_solve)
    submit_bid(st.book, tx.id, pub.client, pub.fee_sub, pub.fee_solve, st.height, p.timeout_publish)
    st.credit(pub.client, -(pub.fee_sub + pub.fee_solve), "escrow")
    st.escrows[tx.id] = pub.fee_sub + pub.fee_solve
    st.competitions[tx.id] = cp.CompetitionState(tx.id, pub, p.NB_freeze, p.NB_compete, p.NB_validate)
    st.open_refs[tx.id] = None


def _tx_ask(st: LedgerState, tx: Transaction, blk: dict) -> None:
    st._need(tx, 0)
    try:
        submit_ask(st.book, tx.id, tx.sender, tx.payload.get("bid_id", ""), st.height)
    except StorageError as e:
        raise IllegalTx(tx.id, e.reason) from None


def _tx_deal(st: LedgerState, tx: Transaction, blk: dict) -> None:
    bid_id = tx.payload.get("bid_id", "")
    bid = st.book.bids.get(bid_id)
    if bid is None:
        raise IllegalTx(tx.id, "unknown_bid")
    if tx.sender != bid.client:
        raise IllegalTx(tx.id, "bad_signer")
    st._need(tx, 0)
    want = set(tx.payload.get("asks", ()))
    asks = [a for a in st.book.asks.get(bid_id, []) if a.ask_id in want]
    if len(asks) != len(want):
        raise IllegalTx(tx.id, "unknown_ask")
    try:  # match_deal checks everything before it mutates the book
        deal, dtmn = match_deal(st.book, bid_id, asks, st.height, st.params.r_s)
    except StorageError as e:
        raise IllegalTx(tx.id, e.reason) from None
    st.dtmns[bid_id] = dtmn
    st.active_dtmns[bid_id] = None
    st.event("deal", bid_id=bid_id, members=list(deal.members))


def _tx_stored(st: LedgerState, tx: Transaction, blk: dict) -> None:
    sp: cp.StoredPayload = tx.payload
    comp = st.competitions.get(sp.publish_ref)
    d = st.dtmns.get(sp.publish_ref)
    if comp is None or d is None or comp.status != "open":
        raise IllegalTx(tx.id, "unknown_competition")
    if comp.stored_height is not None:
        raise IllegalTx(tx.id, "already_stored")
    if tx.sender != comp.publish.client or sp.client != comp.publish.client:
        raise IllegalTx(tx.id, "bad_signer")
    if sp.slim_task != comp.publish.slim_task:
        raise IllegalTx(tx.id, "task_mismatch")
    if tuple(sorted(sp.masternodes)) != tuple(sorted(d.live_members())) or d.status == "failed":
        raise IllegalTx(tx.id, "dtmn_mismatch")
    if len(sp.masternodes) < st.params.r_s:
        raise IllegalTx(tx.id, "not_enough_asks")
    st._need(tx, 0)
    comp.stored_height = st.height
    comp.dtmn_members = tuple(sorted(sp.masternodes))
    for m in d.members:
        d.replicas[m] = m in sp.masternodes
    d.status = "active"


def _tx_solve(st: LedgerState, tx: Transaction, blk: dict) -> None:
    sp: cp.SolvePayload = tx.payload
    if tx.sender != sp.miner:
        raise IllegalTx(tx.id, "bad_signer")
    comp = st.competitions.get(sp.publish_ref)
    if comp is not None and comp.dtmn_members and sp.storage_source not in comp.dtmn_members:
        raise IllegalTx(tx.id, "unknown_storage_source")
    st._need(tx, 0)
    try:
        cp.admit_solve(comp, sp, st.height, tx.id, blk["n"], blk["signer"])
    except cp.SolveRejected as e:
        raise IllegalTx(tx.id, e.reason) from None


def _tx_validate(st: LedgerState, tx: Transaction, blk: dict) -> None:
    vp: cp.ValidatePayload = tx.payload
    comp = st.competitions.get(vp.publish_ref)
    d = st.dtmns.get(vp.publish_ref)
    if comp is None or d is None or comp.status != "open" or comp.stored_height is None:
        raise IllegalTx(tx.id, "unknown_competition")
    if d.status == "failed":
        raise IllegalTx(tx.id, "dtmn_failed")
    if cp.phase_of(comp, st.height) is not cp.Phase.VALIDATE:
        raise IllegalTx(tx.id, "not_in_validate_phase")
    live = set(d.live_members())
    if tx.sender not in live or not set(vp.votes) <= live:
        raise IllegalTx(tx.id, "not_a_member")
    if comp.validate_record is not None:
        raise IllegalTx(tx.id, "duplicate_validate")
    st._need(tx, 0)
    comp.validate_record = vp


def _tx_seal(st: LedgerState, tx: Transaction, blk: dict) -> None:
    sp: cp.SealPayload = tx.payload
    comp = st.competitions.get(sp.publish_ref)
    d = st.dtmns.get(sp.publish_ref)
    if comp is None or d is None or comp.status != "open" or comp.stored_height is None:
        raise IllegalTx(tx.id, "unknown_competition")
    if cp.phase_of(comp, st.height) is not cp.Phase.SEAL:
        raise IllegalTx(tx.id, "wrong_phase")
    if tx.sender not in d.members:
        raise IllegalTx(tx.id, "not_a_member")
    st._need(tx, 0)
    try:
        expect = cp.seal_competition(comp, sp.keys, st.params.dtmn_quorum)
    except cp.NoConsensus as e:
        if e.reason == "no_valid_solves" and not sp.winners and comp.validate_record is not None:
            comp.seal_record = sp
            st._fail_competition(comp, "no_valid_solves")
            return
        raise IllegalTx(tx.id, e.reason) from None
    if expect.winners != sp.winners or expect.winning_solves != sp.winning_solves:
        raise IllegalTx(tx.id, "bad_seal")
    pub = comp.publish
    pay = cp.seal_payouts(pub, sp.winners, st.params.P_vstake)
    comp.seal_record, comp.winners, comp.status = sp, sp.winners, "sealed"
    st.escrows[comp.publish_ref] -= pub.fee_solve
    for w, amt in sorted(pay.currency.items()):
        st.credit(w, amt, "solve_reward")
    for w, amt in sorted(pay.vstakes.items()):
        st.credit_vstakes(w, amt, "seal_mint")
        st.counters["vstake_minted"] += amt
    by_id = {a.solve_id: a for a in comp.admitted_solves}
    winning = [(sid, by_id[sid].height, by_id[sid].signer) for sid in sp.winning_solves]
    delays = {k: pf.b for k, pf in pub.pf_solve.items()}
    accrue_promised_fees(st.pools, comp.publish_ref, pay.pool_credits, delays, st.height, winning)
    st.counters["pool_accrued"] += sum(pay.pool_credits.values())
    st.dtmn_payments.append((st.height + st.params.timeout_retrieve, comp.publish_ref))
    st.event("sealed", publish_ref=comp.publish_ref, winners=list(sp.winners))


def _tx_channel_open(st: LedgerState, tx: Transaction, blk: dict) -> None:
    cid, b, dep = tx.payload.get("channel_id"), tx.payload.get("party_b"), tx.payload.get("deposit", -1)
    if not cid or cid in st.channels or not b or not isinstance(dep, int) or dep < 0:
        raise IllegalTx(tx.id, "bad_channel")
    st._need(tx, dep)
    st.credit(tx.sender, -dep, "channel_deposit")
    st.channels[cid] = MicropaymentChannel(cid, tx.sender, b, dep)


def _tx_claim(st: LedgerState, tx: Transaction, blk: dict) -> None:
    cl: ClaimPayload = tx.payload
    ch = st.channels.get(cl.channel_id)
    if ch is None:
        raise IllegalTx(tx.id, "unknown_channel")
    if ch.status != "open":
        raise IllegalTx(tx.id, "already_claimed")
    if (cl.party_a, cl.party_b, cl.deposit) != (ch.party_a, ch.party_b, ch.deposit):
        raise IllegalTx(tx.id, "bad_claim")
    if cl.balance_a < 0 or cl.balance_b < 0 or cl.balance_a + cl.balance_b != ch.deposit:
        raise IllegalTx(tx.id, "bad_balance")
    if not cl.signatures_valid():
        raise IllegalTx(tx.id, "bad_signature")
    if tx.sender not in (ch.party_a, ch.party_b):
        raise IllegalTx(tx.id, "bad_signer")
    st._need(tx, 0)
    ch.balance_a, ch.balance_b, ch.seq, ch.status = cl.balance_a, cl.balance_b, cl.seq, "claimed"
    st.credit(ch.party_a, cl.balance_a, "channel_close")
    st.credit(ch.party_b, cl.balance_b, "channel_income")
    st.pools.record_service(ch.party_b, cl.balance_b)


_HANDLERS = {
    TxKind.COINBASE_MINT: _tx_coinbase,
    TxKind.PAYMENT: _tx_payment,
    TxKind.TICKET_PURCHASE: _tx_ticket,
    TxKind.PUBLISH: _tx_publish,
    TxKind.ASK: _tx_ask,
    TxKind.DEAL: _tx_deal,
    TxKind.STORED: _tx_stored,
    TxKind.SOLVE: _tx_solve,
    TxKind.VALIDATE: _tx_validate,
    TxKind.SEAL: _tx_seal,
    TxKind.CHANNEL_OPEN: _tx_channel_open,
    TxKind.MICROPAYMENT_CLAIM: _tx_claim,
}


def validate_block(state: LedgerState, block: Block) -> tuple[Verdict, LedgerState | None]:
    """Check ``block`` against ``state`` without touching it.  Returns the
    verdict and, when accepted, the successor state."""
    trial = state.copy()
    try:
        trial.apply_block(block)
    except BlockRejected as e:
        return Verdict(False, e.reason), None
    except IllegalTx as e:
        return Verdict(False, f"illegal_tx({e.tx_id}, {e.reason})"), None
    return Verdict(True), trial


# -- block tree and fork choice -----------------------------------------------

@dataclass
class _Node:
    block: Block
    approvals: int
    work: int


class BlockTree:
    """All known blocks.  Cumulative approval and work are cached per block;
    adding blocks never mutates existing ones."""

    def __init__(self, genesis: Block, vote_majority: int = 3):
        self.vote_majority = vote_majority
        self.genesis = genesis
        self.nodes: dict[bytes, _Node] = {genesis.digest: _Node(genesis, 0, 0)}
        self.children: dict[bytes, list[bytes]] = {genesis.digest: []}

    def add(self, block: Block) -> bytes:
        parent = self.nodes.get(block.parent_digest)
        if parent is None:
            raise KeyError("unknown parent")
        if block.height != parent.block.height + 1:
            raise ValueError("height must be parent height + 1")
        d = block.digest
        if d in self.nodes:
            return d
        approved = 1 if block.approving_votes >= self.vote_majority else 0
        self.nodes[d] = _Node(block, parent.approvals + approved, parent.work + MAX_TARGET // block.target)
        self.children[d] = []
        self.children[block.parent_digest].append(d)
        return d

    def tips(self) -> list[bytes]:
        return [d for d, c in self.children.items() if not c]

    def chain(self, tip: bytes) -> list[Block]:
        out = []
        d = tip
        while True:
            node = self.nodes[d]
            out.append(node.block)
            if node.block.height == 0:
                break
            d = node.block.parent_digest
        return out[::-1]

    def approvals(self, tip: bytes) -> int:
        return self.nodes[tip].approvals

    def work(self, tip: bytes) -> int:
        return self.nodes[tip].work


def fork_choice(tree: BlockTree, tips: Iterable[bytes] | None = None) -> bytes:
    """Most PoS-approved blocks, then most accumulated work, then the smaller
    tip digest.  (The digest tie-break is our choice; the protocol leaves it
    open.)"""
    tips = list(tree.tips() if tips is None else tips)
    return min(tips, key=lambda d: (-tree.nodes[d].approvals, -tree.nodes[d].work, d))


# -- dump / restore -----------------------------------------------------------

def dump_chain(path: str | Path, params: ProtocolParams, genesis: GenesisConfig, blocks: Sequence[Block],
               config_digest: str | None = None) -> None:
    """One JSON record per line: a header with params and genesis, then one
    block per line, fields in a fixed order."""
    head = {"params": params.to_dict(), "genesis": genesis.to_record()}
    if config_digest:
        head["config_digest"] = config_digest
    with open(path, "w") as f:
        f.write(json.dumps(head) + "\n")
        for b in blocks:
            if b.height == 0:
                continue
            f.write(json.dumps(b.to_record(), default=lambda o: o.hex() if isinstance(o, bytes) else str(o)) + "\n")


def restore_chain(path: str | Path) -> tuple[ProtocolParams, GenesisConfig, list[Block]]:
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])
    params = ProtocolParams(**head["params"])
    genesis = GenesisConfig.from_record(head["genesis"])
    return params, genesis, [Block.from_record(json.loads(line)) for line in lines[1:] if line]


def replay(params: ProtocolParams, genesis: GenesisConfig, blocks: Iterable[Block]) -> LedgerState:
    state = LedgerState(params, genesis)
    for b in blocks:
        state.apply_block(b)
    return state
