"""Closed-form incentive arithmetic.

A pure PoS miner gets back ``0.95 r + 0.05`` per unit of ticket price (the
ticket votes with probability 0.95, otherwise it is refunded).  A
self-dealing client who posts tasks whose answer it already knows gets back
``(1 + P_vstake)(1 - p_pools)``: the fee minus the pool cut, plus vstakes
at face value.  The protocol is safe when the second factor sits strictly
between 1 and the first.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .params import ProtocolParams, as_fraction

VOTE_PROBABILITY = Fraction(95, 100)


class EmptyFrontier(ValueError):
    reason = "empty_frontier"


def expected_pos_factor(r) -> Fraction:
    """0.95 r + 0.05 as an exact rational."""
    r = as_fraction(r)
    return VOTE_PROBABILITY * r + (1 - VOTE_PROBABILITY)


def o1_adversary_factor(P_vstake, p_pools) -> Fraction:
    """(1 + P_vstake)(1 - p_pools), vstakes counted at face value."""
    return (1 + as_fraction(P_vstake)) * (1 - as_fraction(p_pools))


@dataclass(frozen=True)
class PayoffReport:
    pos_factor: Fraction
    o1_factor: Fraction
    dominance: bool
    margin: Fraction
    solver_upside: bool  # o1 factor > 1: honest solvers earn more than the fee

    @property
    def bounds_hold(self) -> bool:
        return self.solver_upside and self.dominance

    def to_record(self) -> dict:
        return {"pos_factor": float(self.pos_factor), "o1_factor": float(self.o1_factor),
                "dominance": self.dominance, "margin": float(self.margin),
                "solver_upside": self.solver_upside}

    def render(self) -> str:
        return (f"PoS {_fmt(self.pos_factor)}, O(1) {_fmt(self.o1_factor)}, "
                f"dominance: {'yes' if self.dominance else 'no'}, "
                f"solver upside: {'yes' if self.solver_upside else 'no'}")


def _fmt(q: Fraction) -> str:
    s = f"{float(q):.6f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def verify_pos_dominance(params: ProtocolParams | None = None, *, r=None, P_vstake=None,
                         p_pools=None) -> PayoffReport:
    params = params or ProtocolParams()
    r = params.r if r is None else r
    P_vstake = params.P_vstake if P_vstake is None else P_vstake
    p_pools = params.p_pools if p_pools is None else p_pools
    if as_fraction(r) < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    for name, v in (("P_vstake", P_vstake), ("p_pools", p_pools)):
        if not 0 <= as_fraction(v) <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    pos = expected_pos_factor(r)
    o1 = o1_adversary_factor(P_vstake, p_pools)
    return PayoffReport(pos, o1, o1 < pos, pos - o1, o1 > 1)


@dataclass(frozen=True)
class FrontierPoint:
    r: Fraction
    P_vstake: Fraction
    p_pools: Fraction

    @property
    def o1_factor(self) -> Fraction:
        return o1_adversary_factor(self.P_vstake, self.p_pools)


def solve_param_frontier(r, epsilon_pos, grid: Iterable) -> list[FrontierPoint]:
    """Largest admissible (P_vstake, p_pools) pairs: the o(1) factor equals
    ``0.95 r + 0.05 - epsilon_pos``, i.e. p_pools = 1 - target / (1 + P_vstake).
    Grid points whose p_pools falls outside [0, 1] are dropped.

    Raises:
        EmptyFrontier: the target is not above 1, or no grid point survives.
    """
    target = expected_pos_factor(r) - as_fraction(epsilon_pos)
    if target <= 1:
        raise EmptyFrontier(f"target {float(target)} <= 1")
    out = []
    for pv in grid:
        pv = as_fraction(pv)
        pp = 1 - target / (1 + pv)
        if 0 <= pp <= 1:
            out.append(FrontierPoint(as_fraction(r), pv, pp))
    if not out:
        raise EmptyFrontier("no grid point yields p_pools in [0, 1]")
    return out


def default_grid(n: int = 41, hi: float = 1.0) -> list[Fraction]:
    """``n`` evenly spaced P_vstake values on [0, hi]; a single point is ``hi``."""
    if n < 1:
        raise ValueError("grid needs at least one point")
    if n == 1:
        return [as_fraction(hi)]
    return [Fraction(k, n - 1) * as_fraction(hi) for k in range(n)]


FRONTIER_COLUMNS = ("r", "P_vstake", "p_pools", "o1_factor")


def frontier_table(r_values: Sequence, epsilon_pos, grid: Sequence) -> list[dict]:
    rows = []
    for r in r_values:
        for pt in solve_param_frontier(r, epsilon_pos, grid):
            rows.append({"r": float(pt.r), "P_vstake": float(pt.P_vstake),
                         "p_pools": float(pt.p_pools), "o1_factor": float(pt.o1_factor)})
    return rows


def frontier_csv(rows: Sequence[dict], provenance: str = "") -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    w = csv.DictWriter(buf, fieldnames=FRONTIER_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(row[k]) for k in FRONTIER_COLUMNS})
    return buf.getvalue()


def efficiency_ratio(n_m: int, n_t: int) -> int:
    """Worst-case speed-up of useful work over a single solver: every miner
    works on some task while there are fewer tasks than miners."""
    if n_m < 1 or n_t < 1:
        raise ValueError("need n_m, n_t >= 1")
    return n_m if n_t < n_m else 1


def transfer_time_estimate(payload_bytes: int, rate_bits_per_s: float) -> float:
    if rate_bits_per_s <= 0:
        raise ValueError("rate must be positive")
    return payload_bytes * 8 / rate_bits_per_s


def proposition_precondition(mean_pool_reward_per_solve: float, mean_tx_fee: float) -> bool:
    """Block signers gain from including Solve transactions when a solve is
    worth more to them, in expectation, than an ordinary transaction."""
    return mean_pool_reward_per_solve > mean_tx_fee
