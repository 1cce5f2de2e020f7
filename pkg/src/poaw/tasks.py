"""Computational tasks and the built-in toy task kinds.

A task is the five-tuple <Type, F_D, D, C, S>: optimisation direction, a
scoring function tag, an opaque data payload, constraints and search
parameters.  Candidates are canonical JSON lists of indices, e.g. ``b"[1,2]"``.

Two kinds are fully implemented, each with a miner-side solver and an
independent brute-force oracle:

* ``knapsack`` -- 0/1 knapsack, maximise total value under a capacity.
* ``clique``   -- maximum clique, maximise the size of a vertex clique.

``milp`` and ``deep_learning`` are registered as interface stubs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .crypto import canonical, digest

MAXIMIZE = "maximize"
MINIMIZE = "minimize"

Score = int | float | None
"""A numeric score, or ``None`` for an infeasible candidate."""


class MalformedCandidate(ValueError):
    pass


class UnsupportedTask(NotImplementedError):
    pass


@dataclass(frozen=True)
class ComputationalTask:
    task_type: str
    scoring_fn: str
    data: bytes = b""
    constraints: dict = field(default_factory=dict)
    search_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_type not in (MAXIMIZE, MINIMIZE):
            raise ValueError(f"task_type must be maximize or minimize, got {self.task_type!r}")
        if self.scoring_fn not in TASK_KINDS:
            raise ValueError(f"unknown scoring function {self.scoring_fn!r}")

    @cached_property
    def instance(self) -> Any:
        return TASK_KINDS[self.scoring_fn].parse(self)

    def slim(self) -> "SlimTask":
        return SlimTask(self.task_type, self.scoring_fn, digest(self.data),
                        self.constraints, self.search_params)

    def to_record(self) -> dict:
        return {"task_type": self.task_type, "scoring_fn": self.scoring_fn,
                "data": self.data.hex(), "constraints": self.constraints,
                "search_params": self.search_params}

    @classmethod
    def from_record(cls, rec: dict) -> "ComputationalTask":
        return cls(rec["task_type"], rec["scoring_fn"], bytes.fromhex(rec["data"]),
                   dict(rec.get("constraints", {})), dict(rec.get("search_params", {})))


@dataclass(frozen=True)
class SlimTask:
    """A task with its data replaced by the data digest."""

    task_type: str
    scoring_fn: str
    data_digest: bytes
    constraints: dict = field(default_factory=dict)
    search_params: dict = field(default_factory=dict)

    def matches(self, task: ComputationalTask) -> bool:
        return task.slim() == self

    def to_record(self) -> dict:
        return {"task_type": self.task_type, "scoring_fn": self.scoring_fn,
                "data_digest": self.data_digest.hex(), "constraints": self.constraints,
                "search_params": self.search_params}

    @classmethod
    def from_record(cls, rec: dict) -> "SlimTask":
        return cls(rec["task_type"], rec["scoring_fn"], bytes.fromhex(rec["data_digest"]),
                   dict(rec.get("constraints", {})), dict(rec.get("search_params", {})))


def better(task_type: str, a: Score, b: Score) -> bool:
    """True when score ``a`` is strictly better than ``b`` (``None`` is worst)."""
    if a is None:
        return False
    if b is None:
        return True
    return a > b if task_type == MAXIMIZE else a < b


def canonical_score(score: Score) -> str:
    """Fixed-precision decimal text (10^-9) used for score equality."""
    if score is None:
        return "invalid"
    return str(Decimal(repr(score)).quantize(Decimal("1e-9")))


def encode_candidate(indices) -> bytes:
    return canonical(sorted(int(i) for i in indices))


def decode_candidate(candidate: bytes) -> list[int]:
    try:
        obj = json.loads(candidate)
    except (ValueError, UnicodeDecodeError):
        raise MalformedCandidate("candidate is not valid JSON") from None
    if not isinstance(obj, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in obj):
        raise MalformedCandidate("candidate must be a list of integers")
    if len(set(obj)) != len(obj):
        raise MalformedCandidate("candidate repeats an index")
    return obj


def score_solution(task: ComputationalTask, candidate: bytes) -> Score:
    """Score ``candidate`` under ``task``; ``None`` marks an infeasible candidate.

    Raises:
        MalformedCandidate: the bytes do not parse as a candidate.
        UnsupportedTask: the task kind has no scoring implementation.
    """
    kind = TASK_KINDS[task.scoring_fn]
    return kind.score(task.instance, decode_candidate(candidate))


# -- knapsack ---------------------------------------------------------------

@dataclass(frozen=True)
class KnapsackInstance:
    values: tuple[int, ...]
    weights: tuple[int, ...]
    capacity: int


class Knapsack:
    name = "knapsack"

    @staticmethod
    def make_task(items: Sequence[tuple[int, int]], capacity: int) -> ComputationalTask:
        data = canonical({"items": [[int(v), int(w)] for v, w in items]})
        return ComputationalTask(MAXIMIZE, "knapsack", data, {"capacity": int(capacity)})

    @staticmethod
    def parse(task: ComputationalTask) -> KnapsackInstance:
        items = json.loads(task.data)["items"]
        return KnapsackInstance(tuple(v for v, _ in items), tuple(w for _, w in items),
                                int(task.constraints["capacity"]))

    @staticmethod
    def score(inst: KnapsackInstance, chosen: list[int]) -> Score:
        n = len(inst.values)
        if any(i < 0 or i >= n for i in chosen):
            return None
        if sum(inst.weights[i] for i in chosen) > inst.capacity:
            return None
        return sum(inst.values[i] for i in chosen)

    @staticmethod
    def brute_force(inst: KnapsackInstance) -> tuple[int, list[int]]:
        """Enumerate all 2^n subsets; returns (best value, smallest optimal mask as indices)."""
        n = len(inst.values)
        vals = np.zeros(1 << n, dtype=np.int64)
        wts = np.zeros(1 << n, dtype=np.int64)
        for i in range(n):
            lo = 1 << i
            vals[lo:2 * lo] = vals[:lo] + inst.values[i]
            wts[lo:2 * lo] = wts[:lo] + inst.weights[i]
        vals[wts > inst.capacity] = -1
        mask = int(np.argmax(vals))
        return int(vals[mask]), [i for i in range(n) if mask >> i & 1]

    @staticmethod
    def solve(inst: KnapsackInstance) -> list[int]:
        """Depth-first branch and bound with the fractional relaxation as bound."""
        n = len(inst.values)
        order = sorted(range(n), key=lambda i: inst.values[i] / max(inst.weights[i], 1e-12), reverse=True)
        v = [inst.values[i] for i in order]
        w = [inst.weights[i] for i in order]
        best_val = 0
        best_set: list[int] = []

        def bound(level, weight, value):
            for k in range(level, n):
                if weight + w[k] <= inst.capacity:
                    weight += w[k]
                    value += v[k]
                else:
                    return value + (inst.capacity - weight) * v[k] / w[k]
            return value

        stack = [(0, 0, 0, ())]
        while stack:
            level, weight, value, taken = stack.pop()
            if value > best_val:
                best_val, best_set = value, list(taken)
            if level == n or bound(level, weight, value) <= best_val:
                continue
            stack.append((level + 1, weight, value, taken))
            if weight + w[level] <= inst.capacity:
                stack.append((level + 1, weight + w[level], value + v[level], taken + (level,)))
        return sorted(order[k] for k in best_set)

    @staticmethod
    def random_candidate(inst: KnapsackInstance, rng: np.random.Generator) -> list[int]:
        chosen, weight = [], 0
        for i in rng.permutation(len(inst.values)):
            if rng.random() < 0.5 and weight + inst.weights[i] <= inst.capacity:
                chosen.append(int(i))
                weight += inst.weights[i]
        return sorted(chosen)

    @staticmethod
    def random_task(rng: np.random.Generator, n_items: int = 12, max_value: int = 100,
                    max_weight: int = 50) -> ComputationalTask:
        values = rng.integers(1, max_value + 1, n_items)
        weights = rng.integers(1, max_weight + 1, n_items)
        capacity = max(1, int(weights.sum() // 2))
        return Knapsack.make_task(list(zip(values.tolist(), weights.tolist())), capacity)


# -- max clique -------------------------------------------------------------

@dataclass(frozen=True)
class GraphInstance:
    n: int
    adjacency: tuple[int, ...]  # bitmask of neighbours per vertex


class Clique:
    name = "clique"
    max_vertices = 20

    @staticmethod
    def make_task(n: int, edges) -> ComputationalTask:
        if n > Clique.max_vertices:
            raise ValueError(f"clique tasks are limited to {Clique.max_vertices} vertices")
        es = sorted({(min(u, v), max(u, v)) for u, v in edges if u != v})
        return ComputationalTask(MAXIMIZE, "clique", canonical({"n": n, "edges": es}))

    @staticmethod
    def parse(task: ComputationalTask) -> GraphInstance:
        obj = json.loads(task.data)
        adj = [0] * obj["n"]
        for u, v in obj["edges"]:
            adj[u] |= 1 << v
            adj[v] |= 1 << u
        return GraphInstance(obj["n"], tuple(adj))

    @staticmethod
    def score(inst: GraphInstance, chosen: list[int]) -> Score:
        if any(i < 0 or i >= inst.n for i in chosen):
            return None
        for a in chosen:
            for b in chosen:
                if a != b and not inst.adjacency[a] >> b & 1:
                    return None
        return len(chosen)

    @staticmethod
    def brute_force(inst: GraphInstance) -> tuple[int, list[int]]:
        """Mark every vertex subset as clique / not clique, then take the largest."""
        n = inst.n
        is_clique = np.zeros(1 << n, dtype=bool)
        size = np.zeros(1 << n, dtype=np.int64)
        is_clique[0] = True
        for i in range(n):
            lo = 1 << i
            base = np.arange(lo, dtype=np.int64)
            is_clique[lo:2 * lo] = is_clique[:lo] & ((base & ~inst.adjacency[i]) == 0)
            size[lo:2 * lo] = size[:lo] + 1
        size[~is_clique] = -1
        mask = int(np.argmax(size))
        return int(size[mask]), [i for i in range(n) if mask >> i & 1]

    @staticmethod
    def solve(inst: GraphInstance) -> list[int]:
        """Bron-Kerbosch with pivoting."""
        best = 0

        def bk(r, p, x):
            nonlocal best
            if p == 0 and x == 0:
                if bin(r).count("1") > bin(best).count("1"):
                    best = r
                return
            pivot = (p | x).bit_length() - 1
            cand = p & ~inst.adjacency[pivot]
            while cand:
                v = cand.bit_length() - 1
                cand &= ~(1 << v)
                bk(r | 1 << v, p & inst.adjacency[v], x & inst.adjacency[v])
                p &= ~(1 << v)
                x |= 1 << v

        bk(0, (1 << inst.n) - 1, 0)
        return [i for i in range(inst.n) if best >> i & 1]

    @staticmethod
    def random_candidate(inst: GraphInstance, rng: np.random.Generator) -> list[int]:
        chosen = 0
        for v in rng.permutation(inst.n):
            v = int(v)
            if rng.random() < 0.5 and chosen & ~inst.adjacency[v] == 0:
                chosen |= 1 << v
        return [i for i in range(inst.n) if chosen >> i & 1]

    @staticmethod
    def random_task(rng: np.random.Generator, n: int = 12, density: float = 0.5) -> ComputationalTask:
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < density]
        return Clique.make_task(n, edges)


class _Stub:
    """Placeholder for task kinds whose scoring lives in external tooling."""

    def __init__(self, name: str):
        self.name = name

    def parse(self, task):
        return None

    def score(self, inst, chosen):
        raise UnsupportedTask(f"{self.name} scoring is not implemented")

    def brute_force(self, inst):
        raise UnsupportedTask(f"{self.name} has no exact oracle")

    solve = brute_force

    def random_candidate(self, inst, rng):
        raise UnsupportedTask(f"{self.name} has no candidate generator")


TASK_KINDS: dict[str, Any] = {
    "knapsack": Knapsack,
    "clique": Clique,
    "milp": _Stub("milp"),
    "deep_learning": _Stub("deep_learning"),
}


def brute_force_optimum(task: ComputationalTask) -> tuple[Score, list[int]]:
    return TASK_KINDS[task.scoring_fn].brute_force(task.instance)


def miner_solve(task: ComputationalTask) -> list[int]:
    return TASK_KINDS[task.scoring_fn].solve(task.instance)


def random_candidate(task: ComputationalTask, rng: np.random.Generator) -> list[int]:
    return TASK_KINDS[task.scoring_fn].random_candidate(task.instance, rng)


def random_task(kind: str, rng: np.random.Generator, size: int = 12) -> ComputationalTask:
    if kind == "knapsack":
        return Knapsack.random_task(rng, n_items=size)
    if kind == "clique":
        return Clique.random_task(rng, n=size)
    raise UnsupportedTask(f"no generator for task kind {kind!r}")
