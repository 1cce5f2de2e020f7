"""Scenario configuration: agents, task stream, protocol overrides.

Scenario files are YAML.  Unknown keys are rejected with the line they
appear on, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from ..crypto import canonical, digest, digest_int
from ..params import ATOMS_PER_COIN, PRESETS, ParamError, ProtocolParams

AGENT_KINDS = ("HonestSolver", "HashMiner", "PoSMiner", "StorageMiner", "Client",
               "O1Adversary", "SSAAdversary", "ForkAdversary", "WithholdAdversary", "Colluder")

ASSEMBLY_STRATEGIES = ("all_solves", "fee_only", "no_solves")


class ConfigError(ValueError):
    """Invalid scenario.  ``key`` is the dotted path, ``line`` 1-based when known."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key, self.line = key, line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{key}: {message}")


@dataclass
class AgentStrategy:
    id: str
    kind: str
    balance: int = 1000 * ATOMS_PER_COIN
    hash_power: float = 0.0
    stake_share: float = 0.0  # share of the ticket market this agent buys
    solve_rate: float = 1.0  # chance per block of finishing a solve once data is stored
    fee_tr: int = 1000
    spam_rate: int = 0  # SSA: solves per competition
    group: str | None = None  # colluder cartel
    defect: bool = False  # colluder that solves honestly
    assembly: str = "all_solves"
    commit: str = "hash"  # hash | shard
    fail_at: int | None = None  # storage miner goes silent from this height
    dishonest: bool = False  # storage miner votes a random list
    miss_prob: float = 0.0  # PoS miner offline probability per vote
    tx_rate: float = 0.0  # ordinary payments per block
    task_rate: float = 0.0  # O1 adversary / client publishing rate
    reinvest_vstakes: bool = True

    def validate(self, where: str) -> None:
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"{where}.kind", f"unknown agent kind {self.kind!r}")
        if self.assembly not in ASSEMBLY_STRATEGIES:
            raise ConfigError(f"{where}.assembly", f"must be one of {ASSEMBLY_STRATEGIES}")
        if self.commit not in ("hash", "shard"):
            raise ConfigError(f"{where}.commit", "must be hash or shard")
        for name in ("hash_power", "stake_share", "solve_rate", "miss_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{where}.{name}", f"must lie in [0, 1], got {v}")
        for name in ("balance", "fee_tr", "spam_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{where}.{name}", "must be non-negative")


@dataclass
class TaskStream:
    rate: float = 0.0  # expected Publish transactions per block
    kinds: tuple[str, ...] = ("knapsack", "clique")
    size: int = 12
    fee_sub: int = 2 * ATOMS_PER_COIN
    fee_solve: int = 10 * ATOMS_PER_COIN
    fee_tr: int = 1000
    pf_delay: int = 0
    max_tasks: int | None = None
    client: str | None = None  # defaults to the first Client agent

    def validate(self) -> None:
        if self.rate < 0 or self.rate > 1:
            raise ConfigError("task_stream.rate", "must lie in [0, 1] (Bernoulli per block)")
        if not 2 <= self.size <= 20:
            raise ConfigError("task_stream.size", "toy instances must have 2..20 items/vertices")
        for k in self.kinds:
            if k not in ("knapsack", "clique"):
                raise ConfigError("task_stream.kinds", f"unsupported kind {k!r}")
        if self.fee_sub <= 0:
            raise ConfigError("task_stream.fee_sub", "must be positive")


@dataclass
class SimConfig:
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    agents: list[AgentStrategy] = field(default_factory=list)
    horizon: int = 256
    seed: int = 0
    task_stream: TaskStream = field(default_factory=TaskStream)
    check_invariants: str = "block"  # block | window | end
    n_chunks: int = 12
    chunk_price: int = 10_000
    name: str = "scenario"

    def validate(self) -> "SimConfig":
        if self.horizon < self.protocol.B_distr:
            raise ConfigError("horizon", f"must be >= B_distr ({self.protocol.B_distr})")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigError("agents", "agent ids must be unique")
        for k, a in enumerate(self.agents):
            a.validate(f"agents[{k}]")
        if sum(a.hash_power for a in self.agents) > 1 + 1e-9:
            raise ConfigError("agents", "hash_power shares sum above 1")
        if sum(a.stake_share for a in self.agents) > 1 + 1e-9:
            raise ConfigError("agents", "stake_share sums above 1")
        if not any(a.hash_power > 0 for a in self.agents):
            raise ConfigError("agents", "at least one agent needs hash_power > 0")
        if self.check_invariants not in ("block", "window", "end"):
            raise ConfigError("check_invariants", "must be block, window or end")
        self.task_stream.validate()
        return self

    def agent(self, agent_id: str) -> AgentStrategy:
        return next(a for a in self.agents if a.id == agent_id)

    def to_record(self) -> dict:
        return {"name": self.name, "seed": self.seed, "horizon": self.horizon,
                "check_invariants": self.check_invariants, "n_chunks": self.n_chunks,
                "chunk_price": self.chunk_price, "protocol": self.protocol.to_dict(),
                "agents": [dataclasses.asdict(a) for a in self.agents],
                "task_stream": dataclasses.asdict(self.task_stream)}

    def digest(self) -> str:
        return digest(canonical(self.to_record())).hex()


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per (seed, stream name); adding a stream never
    shifts the draws of another."""
    return np.random.default_rng([seed, digest_int(stream.encode()) % 2**32])


# -- parsing ------------------------------------------------------------------

_TOP_KEYS = {"name", "seed", "horizon", "preset", "protocol", "agents", "task_stream",
             "check_invariants", "n_chunks", "chunk_price"}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """Map every key path of a composed YAML node to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_index(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[path + (i,)] = v.start_mark.line + 1
            _line_index(v, path + (i,), out)
    return out


def _dotted(path: tuple) -> str:
    s = ""
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


def _coerce(cls, data: Mapping, path: tuple, lines: dict) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(_dotted(path), "expected a mapping", lines.get(path))
    fields = _fields(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(_dotted(path + (key,)), "unknown key", lines.get(path + (key,)))
        kwargs[key] = tuple(value) if key == "kinds" else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(_dotted(path), str(e), lines.get(path)) from None


def config_from_mapping(data: Mapping, lines: dict | None = None,
                        overrides: Mapping[str, Any] | None = None) -> SimConfig:
    lines = lines or {}
    data = dict(data or {})
    for key in data:
        if key not in _TOP_KEYS:
            raise ConfigError(key, "unknown key", lines.get((key,)))
    if overrides:
        data = apply_overrides(data, overrides)
    preset = data.get("preset", "scaled")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}", lines.get(("preset",)))
    try:
        protocol = ProtocolParams.from_mapping(data.get("protocol") or {}, PRESETS[preset])
    except ParamError as e:
        raise ConfigError(f"protocol.{e.key}", str(e).split(": ", 1)[-1],
                          lines.get(("protocol", e.key))) from None
    agents = [_coerce(AgentStrategy, a, ("agents", i), lines) for i, a in enumerate(data.get("agents") or [])]
    stream = _coerce(TaskStream, data.get("task_stream") or {}, ("task_stream",), lines)
    cfg = SimConfig(protocol=protocol, agents=agents, task_stream=stream,
                    **{k: data[k] for k in ("name", "seed", "horizon", "check_invariants",
                                            "n_chunks", "chunk_price") if k in data})
    try:
        return cfg.validate()
    except ConfigError as e:
        head = e.key.split(".")[0].split("[")[0]
        raise ConfigError(e.key, str(e).split(": ", 1)[-1], e.line or lines.get((head,))) from None


def parse_override(text: str) -> tuple[str, Any]:
    """``protocol.r=1.2`` -> ("protocol.r", 1.2); values parse as YAML scalars."""
    if "=" not in text:
        raise ConfigError(text, "override must look like dotted.key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def apply_overrides(data: Mapping, overrides: Mapping[str, Any]) -> dict:
    data = yaml.safe_load(yaml.safe_dump(dict(data)))  # deep copy
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        if isinstance(node, list):
            node[int(parts[-1])] = value
        else:
            node[parts[-1]] = value
    return data


def load_scenario(path: str | Path, overrides: Mapping[str, Any] | None = None) -> SimConfig:
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("<file>", f"YAML syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1 if mark else None) from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError("<file>", "top level must be a mapping", 1)
    return config_from_mapping(data or {}, _line_index(node) if node else {}, overrides)
