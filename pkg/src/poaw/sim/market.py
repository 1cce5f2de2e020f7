"""Ticket market on its own: lottery fairness, the price controller and the
pure-PoS payoff.

The closed loop keeps only what the ticket statistics depend on: buyers
react to the price, five tickets vote per block, the rest age out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..crypto import digest
from ..params import ProtocolParams
from ..tickets import (TicketPool, compute_ticket_price, expire_tickets, purchase_ticket,
                       select_voters, stationary_ages)
from .config import rng_for

DEMAND_ELASTICITY = 8
VOTE_SHARE = 0.95


@dataclass
class LotteryReport:
    draws: int
    pool_size: int
    chi2: float
    p_value: float

    @property
    def uniform(self) -> bool:
        return self.p_value > 0.01


def lottery_uniformity(params: ProtocolParams | None = None, draws: int = 100_000, seed: int = 0,
                       pool_size: int | None = None) -> LotteryReport:
    """Draw ``draws`` tickets (five per seed) from a fixed pool and test the
    selection counts against the uniform law."""
    params = params or ProtocolParams()
    n = pool_size or params.pool_target
    pool = TicketPool(params)
    for k in range(n):
        pool.seed_live("holder", params.ticket_base_price, -k)
    counts = np.zeros(n, dtype=np.int64)
    k = params.votes_per_block
    rounds = -(-draws // k)
    rng = rng_for(seed, "lottery")
    index = {tid: i for i, tid in enumerate(pool.live)}
    for _ in range(rounds):
        for t in select_voters(rng.bytes(32), pool):
            counts[index[t.id]] += 1
    res = stats.chisquare(counts)
    return LotteryReport(int(counts.sum()), n, float(res.statistic), float(res.pvalue))


@dataclass
class MarketReport:
    n_blocks: int
    burn_in: int
    pool_sizes: np.ndarray
    prices: np.ndarray
    resolved: int  # post-burn-in tickets whose fate is known
    voted: int
    expired: int
    payoff_factors: np.ndarray  # payout / price per resolved ticket

    @property
    def miss_rate(self) -> float:
        return self.expired / self.resolved if self.resolved else float("nan")

    @property
    def mean_pool(self) -> float:
        return float(self.pool_sizes[self.burn_in:].mean())

    def pool_within(self, target: int, tol: float = 0.05) -> bool:
        after = self.pool_sizes[self.burn_in:]
        return bool(np.all(np.abs(after - target) <= tol * target))

    @property
    def mean_payoff(self) -> float:
        return float(self.payoff_factors.mean())

    def to_record(self) -> dict:
        return {"n_blocks": self.n_blocks, "burn_in": self.burn_in, "resolved": self.resolved,
                "voted": self.voted, "expired": self.expired, "miss_rate": self.miss_rate,
                "mean_pool": self.mean_pool, "min_pool": int(self.pool_sizes[self.burn_in:].min()),
                "max_pool": int(self.pool_sizes[self.burn_in:].max()),
                "mean_payoff_factor": self.mean_payoff}


def ticket_market(params: ProtocolParams | None = None, n_blocks: int = 30_000, seed: int = 0,
                  burn_in: int | None = None, start_pool: int | None = None) -> MarketReport:
    """Closed-loop ticket market.

    Buyers arrive as a Poisson stream with rate ``v/0.95 * (base/price)^8``,
    which balances votes plus expiries exactly when the pool sits at its
    target.  Every ticket that went live after ``burn_in`` and had time to
    either vote or expire counts towards the miss rate and the payoff.
    """
    p = params or ProtocolParams()
    burn_in = p.ticket_expiry + p.ticket_maturity if burn_in is None else burn_in
    rng = rng_for(seed, "ticket-market")
    pool = TicketPool(p)
    n0 = p.pool_target if start_pool is None else start_pool
    for age in sorted(stationary_ages(n0, p.pool_target, p.votes_per_block, p.ticket_expiry), reverse=True):
        pool.seed_live("buyer", p.ticket_base_price, -age)
    balances = {"buyer": 10**30}
    vstakes: dict[str, int] = {}
    seed_bytes = digest(f"market:{seed}".encode())
    sizes = np.empty(n_blocks, dtype=np.int64)
    prices = np.empty(n_blocks, dtype=np.int64)
    voted = expired = 0
    factors: list[float] = []
    counted: set[int] = set()
    horizon_ok = n_blocks - p.ticket_expiry - p.settlement_delay
    for h in range(1, n_blocks + 1):
        selected = select_voters(seed_bytes, pool) if len(pool.live) >= p.votes_per_block else []
        for t in selected:
            if burn_in < t.live_height <= horizon_ok:
                counted.add(t.id)
            pool.record_vote(t.id, h)
        for s in pool.release_due(h):
            if s.ticket_id in counted:
                counted.discard(s.ticket_id)
                voted += 1
                factors.append(s.payout / s.y)
        pool.mature(h)
        for s in expire_tickets(pool, h):
            if burn_in < h - p.ticket_expiry <= horizon_ok:
                expired += 1
                factors.append(s.payout / s.y)
        price = compute_ticket_price(pool)
        lam = p.votes_per_block / VOTE_SHARE * (p.ticket_base_price / price) ** DEMAND_ELASTICITY
        n_buy = min(int(rng.poisson(lam)), p.ticket_quota)
        for _ in range(n_buy):
            purchase_ticket(pool, balances, vstakes, "buyer", price, 0, h)
        sizes[h - 1] = len(pool.live)
        prices[h - 1] = price
        seed_bytes = digest(b"seed" + seed_bytes + h.to_bytes(8, "big"))
    return MarketReport(n_blocks, burn_in, sizes, prices, voted + expired, voted, expired,
                        np.array(factors))


def pos_payoff_mc(params: ProtocolParams | None = None, min_cycles: int = 100_000, seed: int = 0) -> MarketReport:
    """Pure-PoS payoff factor over at least ``min_cycles`` resolved tickets."""
    p = params or ProtocolParams()
    per_block = p.votes_per_block / VOTE_SHARE
    burn = p.ticket_expiry + p.ticket_maturity
    n_blocks = int(min_cycles / per_block * 1.1) + 2 * burn + p.settlement_delay
    while True:
        rep = ticket_market(p, n_blocks, seed)
        if rep.resolved >= min_cycles:
            return rep
        n_blocks = int(n_blocks * 1.2)
