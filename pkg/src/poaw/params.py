"""Protocol parameter registry.

Every protocol constant lives on :class:`ProtocolParams`.  Two presets ship:
``DECRED`` carries the production-scale ticket constants, ``SCALED`` the
desk-scale ones used by the simulator and the test-suite.

Currency is integer atoms throughout; fractional parameters are converted
to exact :class:`fractions.Fraction` values before they touch an amount.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping

ATOMS_PER_COIN = 10**8
DIGEST_BITS = 256
MAX_TARGET = 2**DIGEST_BITS

FRACTION_FIELDS = ("P_vstake", "p_pool1", "p_pool2", "P_SMPool", "storage_pow_share")


class ParamError(ValueError):
    """Raised when a parameter set violates its invariants."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def as_fraction(value: float | int | str | Fraction) -> Fraction:
    """Exact rational for a decimal literal (0.1 -> 1/10, not the binary float)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def floor_frac(p: float | Fraction, amount: int) -> int:
    """floor(p * amount) computed exactly."""
    q = as_fraction(p) * amount
    return q.numerator // q.denominator


def round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


@dataclass(frozen=True)
class ProtocolParams:
    # PoS economics
    r: float = 1.1
    P_vstake: float = 0.25
    p_pool1: float = 0.10  # main-chain pool share of fee_solve
    p_pool2: float = 0.05  # storage pool share of fee_solve
    P_SMPool: float = 0.1
    epsilon_pos: float = 0.01
    pf_half: float = 0.5
    # storage pool: share paid to PoW signers for including storage transactions
    storage_pow_share: float = 0.1

    # pools
    B_distr: int = 32

    # competitions / dTMN
    r_s: int = 5
    NB_freeze: int = 4
    NB_compete: int = 8
    NB_validate: int = 2
    NB_seal_timeout: int = 4
    timeout_publish: int = 6
    timeout_freeze: int = 24
    timeout_retrieve: int = 8
    ping_timeout: int = 4

    # tickets
    votes_per_block: int = 5
    vote_majority: int = 3
    ticket_maturity: int = 8
    ticket_quota: int = 20
    pool_target: int = 1024
    ticket_expiry: int = 612
    settlement_delay: int = 8
    ticket_base_price: int = ATOMS_PER_COIN
    price_exponent: float = 1.0

    # chain
    coinbase: int = 3 * ATOMS_PER_COIN
    pow_target: int = 2**252
    target_interval: int = 300
    difficulty_window: int = 16
    blocks_per_day: int = 288
    max_block_txs: int = 64

    def __post_init__(self):
        self.validate()

    @property
    def p_pools(self) -> Fraction:
        return as_fraction(self.p_pool1) + as_fraction(self.p_pool2)

    @property
    def dtmn_quorum(self) -> int:
        """Minimum live dTMN membership, floor(r_s/2) + 1."""
        return self.r_s // 2 + 1

    def frac(self, name: str) -> Fraction:
        return as_fraction(getattr(self, name))

    def validate(self) -> None:
        for name in FRACTION_FIELDS:
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParamError(name, f"must lie in [0, 1], got {v}")
        if self.p_pools > 1:
            raise ParamError("p_pool1", "p_pool1 + p_pool2 must not exceed 1")
        if self.r < 1:
            raise ParamError("r", f"PoS profit factor must be >= 1, got {self.r}")
        if self.pf_half not in (0.5, 1.0):
            raise ParamError("pf_half", "must be 0.5 or 1.0")
        if self.vote_majority > self.votes_per_block or self.vote_majority < 1:
            raise ParamError("vote_majority", "must lie in [1, votes_per_block]")
        if self.r_s < 1:
            raise ParamError("r_s", "must be positive")
        if not 0 < self.pow_target <= MAX_TARGET:
            raise ParamError("pow_target", "must lie in (0, 2^256]")
        for name in ("NB_freeze", "NB_compete", "NB_validate", "ticket_maturity",
                     "settlement_delay", "timeout_publish", "timeout_freeze",
                     "timeout_retrieve", "ping_timeout", "NB_seal_timeout"):
            if getattr(self, name) < 0:
                raise ParamError(name, "must be non-negative")
        for name in ("B_distr", "ticket_quota", "pool_target", "ticket_expiry",
                     "ticket_base_price", "max_block_txs", "target_interval",
                     "difficulty_window", "NB_compete"):
            if getattr(self, name) < 1:
                raise ParamError(name, "must be positive")

    def replace(self, **changes: Any) -> "ProtocolParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: "ProtocolParams | None" = None) -> "ProtocolParams":
        base = base or SCALED
        names = {f.name: f for f in dataclasses.fields(cls)}
        changes = {}
        for key, value in data.items():
            if key not in names:
                raise ParamError(key, "unknown protocol parameter")
            current = getattr(base, key)
            try:
                changes[key] = type(current)(value) if not isinstance(current, bool) else bool(value)
            except (TypeError, ValueError):
                raise ParamError(key, f"cannot interpret {value!r} as {type(current).__name__}") from None
        return base.replace(**changes)


def expiry_for_miss_rate(pool_size: int, votes_per_block: int = 5, miss_rate: float = 0.05) -> int:
    """Blocks a ticket may wait in a pool of ``pool_size`` so that it misses
    selection with probability ``miss_rate``: (1 - v/N)^E = miss_rate."""
    return round(math.log(miss_rate) / math.log1p(-votes_per_block / pool_size))


def days_to_blocks(days: float, blocks_per_day: int) -> int:
    return round(days * blocks_per_day)


SCALED = ProtocolParams()

DECRED = ProtocolParams(
    ticket_maturity=256,
    pool_target=40960,
    ticket_expiry=days_to_blocks(142, 288),
    settlement_delay=256,
    blocks_per_day=288,
    B_distr=288,
)

PRESETS = {"scaled": SCALED, "decred": DECRED}
