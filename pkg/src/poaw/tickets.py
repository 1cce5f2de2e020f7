"""Ticket lottery with virtual-stake integration.

Lifecycle: a ticket is bought with ``y - x`` currency plus ``x`` burned
vstakes, waits ``ticket_maturity`` blocks, joins the live pool, and is
either selected to vote (paid out after ``settlement_delay`` blocks) or
expires after ``ticket_expiry`` blocks in the pool and is refunded.

Only the currency part earns the profit factor: a voted ticket pays
``x + round(r * (y - x))``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, MutableMapping

from .crypto import digest
from .params import ProtocolParams, as_fraction, floor_frac, round_half_up


class TicketError(Exception):
    reason = "ticket_error"


class InsufficientFunds(TicketError):
    reason = "insufficient_funds"


class InsufficientVstakes(TicketError):
    reason = "insufficient_vstakes"


class QuotaExceeded(TicketError):
    reason = "block_ticket_quota_exceeded"


class PoolTooSmall(TicketError):
    reason = "pool_too_small"


class InvalidState(TicketError):
    reason = "invalid_state"


class NoWinners(ValueError):
    reason = "no_winners"


class TicketState(str, Enum):
    IMMATURE = "immature"
    LIVE = "live"
    VOTED = "voted"
    EXPIRED = "expired"
    SETTLED = "settled"


@dataclass(slots=True)
class Ticket:
    id: int
    owner: str
    y: int
    x: int
    purchase_height: int
    state: TicketState = TicketState.IMMATURE
    live_height: int | None = None
    vote_height: int | None = None

    @property
    def locked_currency(self) -> int:
        return self.y - self.x

    def to_record(self) -> dict:
        return {"id": self.id, "owner": self.owner, "y": self.y, "x": self.x,
                "purchase_height": self.purchase_height, "state": self.state.value,
                "live_height": self.live_height, "vote_height": self.vote_height}


@dataclass(frozen=True, slots=True)
class Settlement:
    ticket_id: int
    owner: str
    y: int
    x: int
    outcome: str  # "voted" | "expired"
    payout: int  # currency atoms
    vstake_refund: int
    height: int

    def pos_invariant_holds(self, r: float | Fraction) -> bool:
        """The vstake part earns factor exactly 1; only ``y - x`` earns ``r``."""
        cash = self.y - self.x
        if self.outcome == "voted":
            return self.payout - cash - self.x == round_half_up(as_fraction(r) * cash) - cash
        return self.payout == cash and self.vstake_refund == self.x


def settle_ticket(ticket: Ticket, outcome: str, r: float | Fraction, height: int = 0) -> Settlement:
    """Payout for a finished ticket.

    voted:   currency ``x + round(r * (y - x))``, no vstake refund.
    expired: currency ``y - x`` back and the ``x`` vstakes re-credited.
    """
    if outcome == "voted":
        if ticket.state not in (TicketState.LIVE, TicketState.VOTED):
            raise InvalidState(f"ticket {ticket.id} is {ticket.state.value}")
        cash = ticket.y - ticket.x
        payout = ticket.x + round_half_up(as_fraction(r) * cash)
        return Settlement(ticket.id, ticket.owner, ticket.y, ticket.x, "voted", payout, 0, height)
    if outcome == "expired":
        if ticket.state not in (TicketState.LIVE, TicketState.EXPIRED):
            raise InvalidState(f"ticket {ticket.id} is {ticket.state.value}")
        return Settlement(ticket.id, ticket.owner, ticket.y, ticket.x, "expired",
                          ticket.y - ticket.x, ticket.x, height)
    raise ValueError(f"unknown outcome {outcome!r}")


class TicketPool:
    def __init__(self, params: ProtocolParams):
        self.params = params
        self.tickets: dict[int, Ticket] = {}  # every unsettled ticket
        self.live: list[int] = []  # ids ascending; ids ascend with live_height
        self.immature: deque[int] = deque()
        self.awaiting_release: deque[tuple[int, int]] = deque()  # (release height, id)
        self.next_id = 0
        self._quota_height = None
        self._quota_used = 0
        self._locked = [0, 0]  # running (currency, vstakes) over unsettled tickets

    @property
    def target_size(self) -> int:
        return self.params.pool_target

    def live_tickets(self) -> list[Ticket]:
        return [self.tickets[i] for i in self.live]

    def locked_currency(self, recount: bool = False) -> int:
        if recount:
            return sum(t.y - t.x for t in self.tickets.values())
        return self._locked[0]

    def locked_vstakes(self, recount: bool = False) -> int:
        if recount:
            return sum(t.x for t in self.tickets.values())
        return self._locked[1]

    def _new_ticket(self, owner: str, y: int, x: int, height: int) -> Ticket:
        t = Ticket(self.next_id, owner, y, x, height)
        self.next_id += 1
        self.tickets[t.id] = t
        self._locked[0] += y - x
        self._locked[1] += x
        return t

    def _drop(self, ticket_id: int) -> Ticket:
        t = self.tickets.pop(ticket_id)
        self._locked[0] -= t.y - t.x
        self._locked[1] -= t.x
        return t

    def seed_live(self, owner: str, y: int, live_height: int) -> Ticket:
        """Genesis-only insertion of an already-live ticket.  Call in ascending
        ``live_height`` order so the live list stays ordered by age."""
        t = self._new_ticket(owner, y, 0, live_height - self.params.ticket_maturity)
        t.state = TicketState.LIVE
        t.live_height = live_height
        self.live.append(t.id)
        return t

    def quota_left(self, height: int) -> int:
        used = self._quota_used if self._quota_height == height else 0
        return self.params.ticket_quota - used

    def mature(self, height: int) -> list[Ticket]:
        out = []
        m = self.params.ticket_maturity
        while self.immature and self.tickets[self.immature[0]].purchase_height + m <= height:
            t = self.tickets[self.immature.popleft()]
            t.state = TicketState.LIVE
            t.live_height = height
            self.live.append(t.id)
            out.append(t)
        return out

    def _remove_live(self, ticket_id: int) -> None:
        from bisect import bisect_left
        i = bisect_left(self.live, ticket_id)
        if i == len(self.live) or self.live[i] != ticket_id:
            raise InvalidState(f"ticket {ticket_id} is not live")
        del self.live[i]

    def record_vote(self, ticket_id: int, height: int) -> Ticket:
        t = self.tickets.get(ticket_id)
        if t is None or t.state is not TicketState.LIVE:
            raise InvalidState(f"ticket {ticket_id} cannot vote")
        self._remove_live(ticket_id)
        t.state = TicketState.VOTED
        t.vote_height = height
        self.awaiting_release.append((height + self.params.settlement_delay, ticket_id))
        return t

    def record_miss(self, ticket_id: int, height: int) -> Settlement:
        """A selected ticket whose owner did not vote is revoked and refunded."""
        t = self.tickets[ticket_id]
        self._remove_live(ticket_id)
        s = settle_ticket(t, "expired", self.params.r, height)
        t.state = TicketState.SETTLED
        self._drop(ticket_id)
        return s

    def release_due(self, height: int) -> list[Settlement]:
        out = []
        while self.awaiting_release and self.awaiting_release[0][0] <= height:
            _, tid = self.awaiting_release.popleft()
            t = self._drop(tid)
            out.append(settle_ticket(t, "voted", self.params.r, height))
            t.state = TicketState.SETTLED
        return out

    def snapshot(self) -> list[dict]:
        return [self.tickets[i].to_record() for i in sorted(self.tickets)]


def compute_ticket_price(pool: TicketPool) -> int:
    """base_price * (|live| / target)^k, never below one atom."""
    p = pool.params
    n = len(pool.live)
    if p.price_exponent == 1:
        price = p.ticket_base_price * n // p.pool_target
    else:
        price = math.floor(p.ticket_base_price * (n / p.pool_target) ** p.price_exponent)
    return max(1, price)


def purchase_ticket(pool: TicketPool, balances: MutableMapping[str, int],
                    vstakes: MutableMapping[str, int], buyer: str, y: int, x: int,
                    height: int) -> Ticket:
    """Debit ``y - x`` currency, burn ``x`` vstakes and queue an immature ticket."""
    if not 0 <= x <= y or y <= 0:
        raise ValueError(f"need 0 <= x <= y and y > 0 (x={x}, y={y})")
    if pool.quota_left(height) <= 0:
        raise QuotaExceeded(f"at most {pool.params.ticket_quota} purchases per block")
    if balances.get(buyer, 0) < y - x:
        raise InsufficientFunds(buyer)
    if vstakes.get(buyer, 0) < x:
        raise InsufficientVstakes(buyer)
    balances[buyer] = balances.get(buyer, 0) - (y - x)
    if x:
        vstakes[buyer] -= x
    if pool._quota_height != height:
        pool._quota_height, pool._quota_used = height, 0
    pool._quota_used += 1
    t = pool._new_ticket(buyer, y, x, height)
    if pool.params.ticket_maturity == 0:
        t.state = TicketState.LIVE
        t.live_height = height
        pool.live.append(t.id)
    else:
        pool.immature.append(t.id)
    return t


def select_voters(header_seed: bytes, pool: TicketPool, k: int | None = None) -> list[Ticket]:
    """Pick ``k`` distinct live tickets, uniformly, from a partial Fisher-Yates
    shuffle driven by ``H(seed || round || counter)``."""
    k = pool.params.votes_per_block if k is None else k
    n = len(pool.live)
    if n < k:
        raise PoolTooSmall(f"{n} live tickets, need {k}")
    chosen_pos: list[int] = []
    swaps: dict[int, int] = {}
    for i in range(k):
        span = n - i
        limit = (1 << 64) - (1 << 64) % span
        counter = 0
        while True:
            v = int.from_bytes(digest(header_seed + bytes((i, counter)))[:8], "big")
            counter += 1
            if v < limit:
                break
        j = i + v % span
        a, b = swaps.get(i, i), swaps.get(j, j)
        swaps[i], swaps[j] = b, a
        chosen_pos.append(b)
    return [pool.tickets[pool.live[p]] for p in chosen_pos]


def expire_tickets(pool: TicketPool, height: int) -> list[Settlement]:
    """Settle every live ticket that has spent ``ticket_expiry`` blocks in the pool."""
    out = []
    e = pool.params.ticket_expiry
    removed = 0
    for tid in pool.live:
        t = pool.tickets[tid]
        if t.live_height + e > height:
            break
        t.state = TicketState.EXPIRED
        out.append(settle_ticket(t, "expired", pool.params.r, height))
        t.state = TicketState.SETTLED
        pool._drop(tid)
        removed += 1
    if removed:
        del pool.live[:removed]
    return out


def mint_vstakes(fee_solve: int, P_vstake: float | Fraction, winners: Iterable[str]) -> dict[str, int]:
    """floor(P_vstake * fee_solve / N_W) vstakes per winner; the rounding
    remainder of floor(P_vstake * fee_solve) goes to the smallest winner id."""
    ws = sorted(set(winners))
    if not ws:
        raise NoWinners("competition produced no winners")
    total = floor_frac(P_vstake, fee_solve)
    each, rem = divmod(total, len(ws))
    out = {w: each for w in ws}
    out[ws[0]] += rem
    return out


def stationary_ages(n: int, pool_size: int, votes_per_block: int, expiry: int) -> list[int]:
    """Deterministic ages (blocks already spent in the pool) for ``n`` genesis
    tickets, following the geometric survival law of the lottery."""
    q = 1 - votes_per_block / pool_size
    tail = 1 - q ** expiry
    ages = []
    for j in range(n):
        u = (j + 0.5) / n
        ages.append(min(expiry - 1, int(math.log(1 - u * tail) / math.log(q))))
    return sorted(ages, reverse=True)
