"""Computational competitions.

A competition opens when its ``Stored`` transaction is in-chain at height
``s``.  From then on every height maps to one phase::

    store    h <  s
    freeze   s                  <= h < s + F
    compete  s + F              <= h < s + F + C
    validate s + F + C          <= h < s + F + C + V
    seal     s + F + C + V      <= h

Solvers commit to solutions during compete (hash or shard commitments),
dTMN members post encrypted vote lists during validate, and the seal
reveals the vote keys, which fixes the winners.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .crypto import canonical, digest, hash_commit, open_box, seal_box
from .params import ProtocolParams, as_fraction, floor_frac
from .tasks import (ComputationalTask, MalformedCandidate, SlimTask,
                    UnsupportedTask, better, canonical_score, score_solution)
from .tickets import mint_vstakes

POOL_NAMES = ("main", "storage")


class Phase(str, Enum):
    STORE = "store"
    FREEZE = "freeze"
    COMPETE = "compete"
    VALIDATE = "validate"
    SEAL = "seal"


class CompetitionError(Exception):
    reason = "competition_error"

    def __init__(self, reason: str | None = None, detail: str = ""):
        if reason:
            self.reason = reason
        super().__init__(f"{self.reason}{': ' + detail if detail else ''}")


class SolveRejected(CompetitionError):
    pass


class NoConsensus(CompetitionError):
    reason = "no_consensus"


class ShardError(CompetitionError):
    pass


# -- payloads -----------------------------------------------------------------

@dataclass(frozen=True)
class PromisedFee:
    """Fraction ``p`` of payment ``o`` paid no earlier than ``b`` blocks later."""

    o: int
    p: float
    b: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f"promised-fee fraction must be in [0, 1], got {self.p}")
        if self.b < 0:
            raise ValueError("promised-fee delay must be non-negative")

    def to_record(self) -> dict:
        return {"o": self.o, "p": self.p, "b": self.b}


@dataclass(frozen=True)
class PublishPayload:
    slim_task: SlimTask
    fee_sub: int
    fee_solve: int
    pf_solve: Mapping[str, PromisedFee]
    client: str

    def __post_init__(self):
        if self.fee_sub <= 0:
            raise ValueError("fee_sub must be positive")
        if self.fee_solve < 0:
            raise ValueError("fee_solve must be non-negative")
        if set(self.pf_solve) - set(POOL_NAMES):
            raise ValueError(f"promised fees may target only {POOL_NAMES}")
        if self.p_pools > 1:
            raise ValueError("promised-fee fractions exceed 1")

    @property
    def p_pools(self):
        return sum((as_fraction(pf.p) for pf in self.pf_solve.values()), as_fraction(0))

    def to_record(self) -> dict:
        return {"slim_task": self.slim_task.to_record(), "fee_sub": self.fee_sub,
                "fee_solve": self.fee_solve, "client": self.client,
                "pf_solve": {k: v.to_record() for k, v in sorted(self.pf_solve.items())}}

    @classmethod
    def from_record(cls, rec: dict) -> "PublishPayload":
        return cls(SlimTask.from_record(rec["slim_task"]), rec["fee_sub"], rec["fee_solve"],
                   {k: PromisedFee(**v) for k, v in rec["pf_solve"].items()}, rec["client"])


@dataclass(frozen=True)
class StoredPayload:
    publish_ref: str
    slim_task: SlimTask
    client: str
    masternodes: tuple[str, ...]

    def to_record(self) -> dict:
        return {"publish_ref": self.publish_ref, "slim_task": self.slim_task.to_record(),
                "client": self.client, "masternodes": list(self.masternodes)}

    @classmethod
    def from_record(cls, rec: dict) -> "StoredPayload":
        return cls(rec["publish_ref"], SlimTask.from_record(rec["slim_task"]), rec["client"],
                   tuple(rec["masternodes"]))


@dataclass(frozen=True)
class Commitment:
    """``hash``: value is H(solution || nonce).  ``shard``: value is the sorted
    list of shard digests H(index || payload)."""

    variant: str
    value: bytes | tuple[bytes, ...]

    def well_formed(self) -> bool:
        if self.variant == "hash":
            return isinstance(self.value, bytes) and len(self.value) == 32
        if self.variant == "shard":
            return (isinstance(self.value, tuple) and len(self.value) > 0
                    and all(isinstance(v, bytes) and len(v) == 32 for v in self.value)
                    and list(self.value) == sorted(self.value))
        return False

    def to_record(self) -> dict:
        if self.variant == "hash":
            return {"variant": "hash", "value": self.value.hex()}
        return {"variant": self.variant, "value": [v.hex() for v in self.value]}

    @classmethod
    def from_record(cls, rec: dict) -> "Commitment":
        v = rec["value"]
        if isinstance(v, list):
            return cls(rec["variant"], tuple(bytes.fromhex(x) for x in v))
        return cls(rec["variant"], bytes.fromhex(v))


@dataclass(frozen=True)
class SolvePayload:
    miner: str
    commitment: Commitment
    declared_score: int | float
    publish_ref: str
    storage_source: str

    def to_record(self) -> dict:
        return {"miner": self.miner, "commitment": self.commitment.to_record(),
                "declared_score": self.declared_score, "publish_ref": self.publish_ref,
                "storage_source": self.storage_source}

    @classmethod
    def from_record(cls, rec: dict) -> "SolvePayload":
        return cls(rec["miner"], Commitment.from_record(rec["commitment"]), rec["declared_score"],
                   rec["publish_ref"], rec["storage_source"])


@dataclass(frozen=True)
class ValidatePayload:
    publish_ref: str
    votes: Mapping[str, tuple[bytes, bytes]]  # member -> (ciphertext, tag)

    def to_record(self) -> dict:
        return {"publish_ref": self.publish_ref,
                "votes": {m: [c.hex(), t.hex()] for m, (c, t) in sorted(self.votes.items())}}

    @classmethod
    def from_record(cls, rec: dict) -> "ValidatePayload":
        return cls(rec["publish_ref"],
                   {m: (bytes.fromhex(c), bytes.fromhex(t)) for m, (c, t) in rec["votes"].items()})


@dataclass(frozen=True)
class SealPayload:
    publish_ref: str
    keys: Mapping[str, bytes]
    winners: tuple[str, ...] = ()
    winning_solves: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {"publish_ref": self.publish_ref,
                "keys": {m: k.hex() for m, k in sorted(self.keys.items())},
                "winners": list(self.winners), "winning_solves": list(self.winning_solves)}

    @classmethod
    def from_record(cls, rec: dict) -> "SealPayload":
        return cls(rec["publish_ref"], {m: bytes.fromhex(k) for m, k in rec["keys"].items()},
                   tuple(rec["winners"]), tuple(rec["winning_solves"]))


# -- competition state --------------------------------------------------------

@dataclass
class AdmittedSolve:
    solve_id: str
    height: int
    position: int  # index within its block
    payload: SolvePayload
    signer: str = ""  # PoW miner of the including block


@dataclass
class CompetitionState:
    publish_ref: str
    publish: PublishPayload
    nb_freeze: int
    nb_compete: int
    nb_validate: int
    stored_height: int | None = None
    dtmn_members: tuple[str, ...] = ()
    admitted_solves: list[AdmittedSolve] = field(default_factory=list)
    validate_record: ValidatePayload | None = None
    seal_record: SealPayload | None = None
    winners: tuple[str, ...] = ()
    status: str = "open"  # open | sealed | failed
    failure: str | None = None

    @property
    def task_type(self) -> str:
        return self.publish.slim_task.task_type

    def boundaries(self) -> tuple[int, int, int, int]:
        """(freeze start, compete start, validate start, seal start)."""
        s = self.stored_height
        f = s + self.nb_freeze
        c = f + self.nb_compete
        return s, f, c, c + self.nb_validate

    def best_declared(self) -> int | float | None:
        best = None
        for a in self.admitted_solves:
            if better(self.task_type, a.payload.declared_score, best):
                best = a.payload.declared_score
        return best


def phase_of(comp: CompetitionState, height: int) -> Phase:
    if comp.stored_height is None or height < comp.stored_height:
        return Phase.STORE
    _, f, c, v = comp.boundaries()
    if height < f:
        return Phase.FREEZE
    if height < c:
        return Phase.COMPETE
    if height < v:
        return Phase.VALIDATE
    return Phase.SEAL


def admit_solve(comp: CompetitionState | None, solve: SolvePayload, height: int,
                solve_id: str = "", position: int = 0, signer: str = "") -> AdmittedSolve:
    """Append ``solve`` to the competition if it arrives during compete.

    Raises:
        SolveRejected: unknown_competition, frozen, wrong_phase or malformed_commitment.
    """
    if comp is None or comp.status != "open":
        raise SolveRejected("unknown_competition")
    phase = phase_of(comp, height)
    if phase is Phase.FREEZE:
        raise SolveRejected("frozen", f"height {height}")
    if phase is not Phase.COMPETE:
        raise SolveRejected("wrong_phase", phase.value)
    if not solve.commitment.well_formed():
        raise SolveRejected("malformed_commitment")
    score = solve.declared_score
    if not isinstance(score, (int, float)) or isinstance(score, bool) or score != score \
            or score in (float("inf"), float("-inf")):
        raise SolveRejected("malformed_commitment", "declared score must be finite")
    entry = AdmittedSolve(solve_id, height, position, solve, signer)
    comp.admitted_solves.append(entry)
    return entry


# -- shards -------------------------------------------------------------------

@dataclass(frozen=True)
class Shard:
    index: int
    payload: bytes

    def digest(self) -> bytes:
        return digest(self.index.to_bytes(8, "big") + self.payload)


@dataclass(frozen=True)
class ShardSet:
    shards: tuple[Shard, ...]
    assignment: Mapping[str, tuple[int, ...]]  # member -> shard indices

    def manifest(self) -> tuple[bytes, ...]:
        return tuple(sorted(s.digest() for s in self.shards))

    def commitment(self) -> Commitment:
        return Commitment("shard", self.manifest())

    def held_by(self, member: str) -> list[Shard]:
        want = set(self.assignment.get(member, ()))
        return [s for s in self.shards if s.index in want]


def shard_split(solution: bytes, n_shards: int, shards_per_member: int, members: list[str],
                rng: np.random.Generator, index_space: int = 100_000) -> ShardSet:
    """Cut ``solution`` into ``n_shards`` contiguous parts tagged with secret,
    strictly increasing random indices, dealt round-robin to ``members``."""
    if not solution:
        raise ShardError("empty_solution")
    if index_space < n_shards:
        raise ShardError("index_space_too_small")
    if n_shards < 1 or n_shards > len(solution):
        raise ShardError("bad_shard_count", f"need 1 <= n_shards <= {len(solution)}")
    indices = np.sort(rng.choice(np.arange(1, index_space + 1), size=n_shards, replace=False))
    bounds = np.linspace(0, len(solution), n_shards + 1).round().astype(int)
    shards = tuple(Shard(int(indices[k]), solution[bounds[k]:bounds[k + 1]]) for k in range(n_shards))
    # Round-robin keeps every member within shards_per_member whenever
    # n_shards <= |members| * shards_per_member; otherwise the surplus keeps cycling.
    dealt = [shards[int(k)].index for k in rng.permutation(n_shards)]
    assignment: dict[str, list[int]] = {m: [] for m in members}
    if members:
        for k, idx in enumerate(dealt):
            assignment[members[k % len(members)]].append(idx)
    return ShardSet(shards, {m: tuple(v) for m, v in assignment.items()})


def shard_assemble(shards: ShardSet | Iterable[Shard]) -> bytes:
    items = shards.shards if isinstance(shards, ShardSet) else shards
    return b"".join(s.payload for s in sorted(items, key=lambda s: s.index))


# -- reveals and validation ---------------------------------------------------

@dataclass(frozen=True)
class HashReveal:
    solution: bytes
    nonce: bytes


def open_commitment(commitment: Commitment, reveal: Any) -> bytes | None:
    """The committed solution if ``reveal`` opens ``commitment``, else None."""
    if commitment.variant == "hash" and isinstance(reveal, HashReveal):
        if hash_commit(reveal.solution, reveal.nonce) == commitment.value:
            return reveal.solution
        return None
    if commitment.variant == "shard":
        shards = reveal.shards if isinstance(reveal, ShardSet) else tuple(reveal or ())
        if not shards or not all(isinstance(s, Shard) for s in shards):
            return None
        if tuple(sorted(s.digest() for s in shards)) != commitment.value:
            return None
        return shard_assemble(shards)
    return None


def member_vote_list(comp: CompetitionState, task: ComputationalTask,
                     revealed: Mapping[str, Any]) -> list[str]:
    """Solve ids whose reveal opens the commitment and whose recomputed score
    equals the declared one.  Everything else is irrelevant."""
    valid = []
    for a in comp.admitted_solves:
        solution = open_commitment(a.payload.commitment, revealed.get(a.solve_id))
        if solution is None:
            continue
        try:
            score = score_solution(task, solution)
        except (MalformedCandidate, UnsupportedTask):
            continue
        if score is not None and canonical_score(score) == canonical_score(a.payload.declared_score):
            valid.append(a.solve_id)
    return valid


def vote_key(member_secret: bytes, publish_ref: str) -> bytes:
    return digest(member_secret + publish_ref.encode())


def validate_solutions(comp: CompetitionState, dtmn: Any, revealed: Mapping[str, Any],
                       task: ComputationalTask, keys: Mapping[str, bytes], height: int | None = None,
                       behaviour: Mapping[str, Callable[[list[str]], list[str]]] | None = None,
                       ) -> ValidatePayload:
    """Each live dTMN member re-scores every admitted solve independently and
    encrypts its list of valid solve ids under its own key.

    ``behaviour`` optionally maps a member to a function that rewrites its
    honest list (used to inject faulty members).
    """
    if getattr(dtmn, "status", "active") == "failed":
        raise CompetitionError("dtmn_failed")
    if height is not None and phase_of(comp, height) is not Phase.VALIDATE:
        raise CompetitionError("not_in_validate_phase")
    if not task.slim() == comp.publish.slim_task:
        raise CompetitionError("task_mismatch", "data digest differs from the published task")
    honest = member_vote_list(comp, task, revealed)
    members = dtmn.live_members() if hasattr(dtmn, "live_members") else list(dtmn)
    votes = {}
    for m in sorted(members):
        lst = honest
        if behaviour and m in behaviour:
            lst = behaviour[m](list(honest))
        votes[m] = seal_box(keys[m], canonical(sorted(lst)))
    return ValidatePayload(comp.publish_ref, votes)


def decrypt_votes(validate: ValidatePayload, keys: Mapping[str, bytes]) -> dict[str, list[str]]:
    out = {}
    for m, key in keys.items():
        box = validate.votes.get(m)
        if box is None:
            continue
        pt = open_box(key, *box)
        if pt is None:
            continue
        out[m] = json.loads(pt)
    return out


def determine_winners(comp: CompetitionState, valid_ids: Iterable[str]) -> list[AdmittedSolve]:
    """Best score wins; among equal best scores the earliest block wins, and
    every best-scoring solve in that block is a winner."""
    valid_ids = set(valid_ids)
    best: list[AdmittedSolve] = []
    for a in comp.admitted_solves:
        if a.solve_id not in valid_ids:
            continue
        if not best:
            best = [a]
            continue
        s, b = a.payload.declared_score, best[0].payload.declared_score
        if better(comp.task_type, s, b):
            best = [a]
        elif s == b:
            if a.height < best[0].height:
                best = [a]
            elif a.height == best[0].height:
                best.append(a)
    return sorted(best, key=lambda a: (a.height, a.position))


def seal_competition(comp: CompetitionState, keys: Mapping[str, bytes], quorum: int) -> SealPayload:
    """Decrypt the vote lists and name the winners.

    Raises:
        NoConsensus: missing Validate, fewer than ``quorum`` usable keys, or no
            solve validated by at least ``quorum`` members.
    """
    if comp.validate_record is None:
        raise NoConsensus(detail="no validate record")
    lists = decrypt_votes(comp.validate_record, keys)
    if len(lists) < quorum:
        raise NoConsensus(detail=f"{len(lists)} usable keys, quorum {quorum}")
    counts: dict[str, int] = {}
    for lst in lists.values():
        for sid in set(lst):
            counts[sid] = counts.get(sid, 0) + 1
    valid = [sid for sid, c in counts.items() if c >= quorum]
    winners = determine_winners(comp, valid)
    if not winners:
        raise NoConsensus("no_valid_solves")
    miners: list[str] = []
    for w in winners:
        if w.payload.miner not in miners:
            miners.append(w.payload.miner)
    return SealPayload(comp.publish_ref, dict(keys), tuple(miners), tuple(w.solve_id for w in winners))


@dataclass
class SealPayouts:
    currency: dict[str, int]
    vstakes: dict[str, int]
    pool_credits: dict[str, int]  # pool -> atoms

    @property
    def total_currency(self) -> int:
        return sum(self.currency.values()) + sum(self.pool_credits.values())


def seal_payouts(publish: PublishPayload, winners: Iterable[str], P_vstake) -> SealPayouts:
    """Split the escrowed fee_solve: floor(p_i * fee_solve) to each pool, the
    rest to the winners (floor, remainder to the smallest id).  Winners are
    minted ``P_vstake`` of what they earned as vstakes."""
    ws = sorted(set(winners))
    if not ws:
        raise NoConsensus("no_valid_solves")
    credits = {name: floor_frac(pf.p, publish.fee_solve) for name, pf in sorted(publish.pf_solve.items())}
    net = publish.fee_solve - sum(credits.values())
    each, rem = divmod(net, len(ws))
    currency = {w: each for w in ws}
    currency[ws[0]] += rem
    vst = mint_vstakes(net, P_vstake, ws)
    return SealPayouts(currency, vst, credits)


# -- task definition files ----------------------------------------------------

TASK_FILE_FORMAT = "poaw-task/1"


@dataclass(frozen=True)
class TaskTerms:
    fee_sub: int
    fee_solve: int
    fee_tr: int = 0
    pf_solve: Mapping[str, PromisedFee] = field(default_factory=dict)

    def publish_payload(self, task: ComputationalTask, client: str) -> PublishPayload:
        return PublishPayload(task.slim(), self.fee_sub, self.fee_solve, dict(self.pf_solve), client)


def default_pf_schedule(params: ProtocolParams, fee_solve: int, b: int = 0) -> dict[str, PromisedFee]:
    return {"main": PromisedFee(fee_solve, params.p_pool1, b),
            "storage": PromisedFee(fee_solve, params.p_pool2, b)}


def task_file_record(task: ComputationalTask, terms: TaskTerms) -> dict:
    rec = task.to_record()
    rec["format"] = TASK_FILE_FORMAT
    rec["fees"] = {"fee_sub": terms.fee_sub, "fee_solve": terms.fee_solve, "fee_tr": terms.fee_tr}
    rec["pf_schedule"] = {k: {"p": v.p, "b": v.b} for k, v in sorted(terms.pf_solve.items())}
    return rec


def dumps_task_file(task: ComputationalTask, terms: TaskTerms) -> str:
    """Canonical text: sorted keys, two-space indent, data payload in base-16.
    The digest of the payload bytes is independent of this layout."""
    return json.dumps(task_file_record(task, terms), sort_keys=True, indent=2) + "\n"


def loads_task_file(text: str) -> tuple[ComputationalTask, TaskTerms]:
    rec = json.loads(text)
    if rec.get("format") != TASK_FILE_FORMAT:
        raise ValueError(f"unsupported task file format {rec.get('format')!r}")
    task = ComputationalTask.from_record(rec)
    fees = rec["fees"]
    pf = {k: PromisedFee(fees["fee_solve"], v["p"], v.get("b", 0)) for k, v in rec.get("pf_schedule", {}).items()}
    return task, TaskTerms(fees["fee_sub"], fees["fee_solve"], fees.get("fee_tr", 0), pf)


def load_task_file(path: str | Path) -> tuple[ComputationalTask, TaskTerms]:
    return loads_task_file(Path(path).read_text())


def dump_task_file(path: str | Path, task: ComputationalTask, terms: TaskTerms) -> None:
    Path(path).write_text(dumps_task_file(task, terms))
