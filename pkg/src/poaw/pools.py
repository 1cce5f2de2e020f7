"""Promised-fee reward pools.

Three pools are fed from sealed competitions and paid out every
``B_distr`` blocks:

* main-chain pool -- split over the signers of the blocks that carried
  winning Solve transactions, weighted by how many each block carried;
* storage pool -- split over storage miners by proven service units, with
  a share paid to PoW signers for including storage transactions;
* storage-main interaction pool -- ``P_SMPool`` of that PoW share, paid to
  the same signers one window later.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .params import as_fraction, floor_frac

POOLS = ("main", "storage", "sm")


@dataclass(frozen=True)
class Accrual:
    pool: str
    amount: int
    payable_after: int
    publish_ref: str


@dataclass(frozen=True)
class Win:
    """A winning Solve transaction and the main-pool share it brings."""

    solve_id: str
    height: int  # block that carried the Solve
    signer: str  # PoW miner of that block
    pf: int
    payable_after: int = 0


@dataclass(frozen=True)
class DistributionRecord:
    height: int
    recipient: str
    pool: str
    amount: int

    def to_record(self) -> dict:
        return {"height": self.height, "recipient": self.recipient, "pool": self.pool,
                "amount": self.amount}


def split_floor(total: int, weights: Mapping[str, int]) -> dict[str, int]:
    """floor(total * w / W) each, remainder to the smallest id with w > 0."""
    keys = sorted(k for k, w in weights.items() if w > 0)
    W = sum(weights[k] for k in keys)
    if not keys or total == 0:
        return {}
    out = {k: total * weights[k] // W for k in keys}
    out[keys[0]] += total - sum(out.values())
    return out


def main_chain_weight_allocation(window: Sequence[Sequence], get_pf: Callable[[object], int] = int,
                                 carry: int = 0) -> list[int]:
    """Weighted profit per block of a distribution window.

    ``window[k]`` lists the winning solves carried by block k; ``get_pf`` maps
    a win to the promised fee it contributes.  Each block receives
    ``|w[k]| * sum / W_t`` (floored; the rounding remainder goes to the
    earliest block with a win), so the profits add up to ``sum`` exactly.
    With no wins every block gets 0 and the caller keeps the pool balance.
    """
    total = carry
    weights = []
    for wins in window:
        weights.append(len(wins))
        for win in wins:
            total += get_pf(win)
    W_t = sum(weights)
    if W_t == 0:
        return [0] * len(window)
    profits = [w * total // W_t for w in weights]
    first = next(k for k, w in enumerate(weights) if w)
    profits[first] += total - sum(profits)
    return profits


def storage_pool_distribution(pool: int, units: Mapping[str, int]) -> dict[str, int]:
    """Pay each storage miner floor(pool * X / Y) for X of Y service units.
    Returns {} when no units were recorded (the pool carries over)."""
    return split_floor(pool, units)


def derive_sm_pool(storage_payment_to_pow: int, P_SMPool) -> int:
    return floor_frac(P_SMPool, storage_payment_to_pow)


@dataclass
class PoolLedger:
    B_distr: int
    balances: dict[str, int] = field(default_factory=lambda: {p: 0 for p in POOLS})
    pending: list[Accrual] = field(default_factory=list)
    pending_wins: list[Win] = field(default_factory=list)
    service_units: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    storage_tx_counts: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    window_start: int = 0
    history: list[DistributionRecord] = field(default_factory=list)

    @property
    def main_chain_pool(self) -> int:
        return self.balances["main"]

    @property
    def storage_pool(self) -> int:
        return self.balances["storage"]

    @property
    def sm_pool(self) -> int:
        return self.balances["sm"]

    def total(self) -> int:
        return sum(self.balances.values()) + sum(a.amount for a in self.pending)

    def is_window_end(self, height: int) -> bool:
        return height - self.window_start + 1 >= self.B_distr

    def accrue(self, accrual: Accrual) -> None:
        if accrual.amount < 0:
            raise ValueError("negative accrual")
        self.pending.append(accrual)

    def record_service(self, miner: str, units: int) -> None:
        self.service_units[miner] += units

    def record_storage_tx(self, signer: str) -> None:
        self.storage_tx_counts[signer] += 1

    def release(self, height: int) -> None:
        keep = []
        for a in self.pending:
            if a.payable_after <= height:
                self.balances[a.pool] += a.amount
            else:
                keep.append(a)
        self.pending = keep

    def distribute_window(self, height: int, pf_half: float, storage_pow_share, P_SMPool) -> list[DistributionRecord]:
        """Close the window ending at ``height`` and return the payouts."""
        self.release(height)
        out: list[DistributionRecord] = []
        out += self._distribute_main(height, pf_half)
        out += self._distribute_sm(height)
        out += self._distribute_storage(height, storage_pow_share, P_SMPool)
        self.service_units = defaultdict(int)
        self.storage_tx_counts = defaultdict(int)
        self.window_start = height + 1
        self.history.extend(out)
        return out

    def _distribute_main(self, height: int, pf_half: float) -> list[DistributionRecord]:
        due = [w for w in self.pending_wins if w.payable_after <= height]
        if not due:
            return []
        self.pending_wins = [w for w in self.pending_wins if w.payable_after > height]
        half = as_fraction(pf_half)
        held_back = sum(w.pf - floor_frac(half, w.pf) for w in due)
        by_block: dict[int, list[Win]] = defaultdict(list)
        for w in due:
            by_block[w.height].append(w)
        heights = sorted(by_block)
        window = [by_block[h] for h in heights]
        carry = self.balances["main"] - held_back - sum(floor_frac(half, w.pf) for w in due)
        profits = main_chain_weight_allocation(window, lambda w: floor_frac(half, w.pf), carry)
        out = []
        for h, p in zip(heights, profits):
            if p:
                out.append(DistributionRecord(height, by_block[h][0].signer, "main", p))
        self.balances["main"] -= sum(profits)
        return out

    def _distribute_sm(self, height: int) -> list[DistributionRecord]:
        pay = split_floor(self.balances["sm"], self.storage_tx_counts)
        self.balances["sm"] -= sum(pay.values())
        return [DistributionRecord(height, k, "sm", v) for k, v in sorted(pay.items()) if v]

    def _distribute_storage(self, height: int, storage_pow_share, P_SMPool) -> list[DistributionRecord]:
        out = []
        S = self.balances["storage"]
        if S == 0:
            return out
        pow_part = floor_frac(storage_pow_share, S) if self.storage_tx_counts else 0
        sm_credit = derive_sm_pool(pow_part, P_SMPool)
        pow_pay = split_floor(pow_part - sm_credit, self.storage_tx_counts)
        miners_pay = storage_pool_distribution(S - pow_part, self.service_units)
        paid = sum(pow_pay.values()) + sum(miners_pay.values())
        # an unpaid PoW share (no signers) stays in the storage pool
        self.balances["storage"] -= paid + sm_credit
        self.balances["sm"] += sm_credit
        out += [DistributionRecord(height, k, "storage_pow", v) for k, v in sorted(pow_pay.items()) if v]
        out += [DistributionRecord(height, k, "storage", v) for k, v in sorted(miners_pay.items()) if v]
        return out


def accrue_promised_fees(pools: PoolLedger, publish_ref: str, credits: Mapping[str, int],
                         delays: Mapping[str, int], height: int,
                         winning: Iterable[tuple[str, int, str]] = ()) -> list[Accrual]:
    """Book the pool credits of a sealed competition.

    ``credits`` maps pool -> atoms, ``delays`` pool -> promised-fee delay b.
    ``winning`` lists (solve id, inclusion height, block signer) of the
    winning solves; the main-pool credit is attributed to them for the
    weight allocation.
    """
    out = []
    for name, amount in sorted(credits.items()):
        if amount <= 0:
            continue
        a = Accrual(name, amount, height + delays.get(name, 0), publish_ref)
        pools.accrue(a)
        out.append(a)
    main = credits.get("main", 0)
    winning = list(winning)
    if main and winning:
        each, rem = divmod(main, len(winning))
        for k, (sid, h, signer) in enumerate(winning):
            pools.pending_wins.append(Win(sid, h, signer, each + (rem if k == 0 else 0),
                                          height + delays.get("main", 0)))
    return out
