"""Command line front end.

    poaw simulate SCENARIO.yaml [--seed N] [--horizon N] [--out DIR] [--set key=value ...]
    poaw verify-theorem [--r R] [--P-vstake P] [--p-pools P]
    poaw emit-frontier --r 1.06 1.08 --eps 0.01 [--out DIR]
    poaw attack {o1,ssa,fork,withhold,collusion} [--seed N] [--out DIR] [...]
    poaw report RUN_DIR [--out DIR]

Exit codes: 0 success, 1 invariant breach (outputs are still written),
2 configuration or usage error, 3 empty frontier.  Every file a command
writes sits under its output directory and carries the config digest.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .chain import dump_chain
from .crypto import canonical, digest
from .econ import EmptyFrontier, default_grid, frontier_csv, frontier_table, verify_pos_dominance
from .params import PRESETS, ParamError, ProtocolParams
from .sim import attacks
from .sim.config import ConfigError, load_scenario, parse_override
from .sim.scenario import simulate

EXIT_OK, EXIT_BREACH, EXIT_CONFIG, EXIT_EMPTY = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)
    args: dict = field(default_factory=dict)

    def write(self, out: Path) -> None:
        self.outputs = sorted(set(self.outputs) | {"manifest.json"})
        _write_json(out / "manifest.json", asdict(self))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_csv(path: Path, rows: list[dict], config_digest: str, columns: Sequence[str] | None = None) -> None:
    buf = io.StringIO()
    buf.write(f"# config_digest={config_digest}\n")
    cols = list(columns or (rows[0].keys() if rows else []))
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _digest_of(obj) -> str:
    return digest(canonical(obj)).hex()


def _overrides(items: Sequence[str] | None) -> dict:
    out = {}
    for text in items or ():
        key, value = parse_override(text)
        out[key] = value
    return out


def _protocol(args) -> ProtocolParams:
    """Protocol parameters from ``--preset`` and ``--set protocol.key=value``."""
    over = _overrides(args.set)
    changes = {}
    for key, value in over.items():
        if not key.startswith("protocol."):
            raise ConfigError(key, "only protocol.* overrides apply to this command")
        changes[key.split(".", 1)[1]] = value
    try:
        return ProtocolParams.from_mapping(changes, PRESETS[args.preset])
    except ParamError as e:
        raise ConfigError(f"protocol.{e.key}", str(e).split(": ", 1)[-1]) from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    over = _overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    if args.horizon is not None:
        over["horizon"] = args.horizon
    cfg = load_scenario(args.scenario, over)
    metrics, sim = simulate(cfg)
    out = _out_dir(args)
    dg = metrics.config_digest
    _write_csv(out / "agents.csv", metrics.agent_rows(), dg)
    _write_csv(out / "competitions.csv", metrics.competition_rows(), dg,
               ("publish_ref", "client", "kind", "status", "failure", "stored_height", "n_solves",
                "winners", "winning_score", "optimum"))
    summary = metrics.summary() | {"reconciles": metrics.reconciles(), "config": cfg.to_record()}
    _write_json(out / "summary.json", summary)
    dump_chain(out / "chain.jsonl", sim.p, sim.genesis, sim.blocks, dg)
    RunManifest("simulate", dg, cfg.seed,
                outputs=["agents.csv", "competitions.csv", "summary.json", "chain.jsonl"],
                args={"scenario": Path(args.scenario).name, "overrides": {k: over[k] for k in sorted(over)}}
                ).write(out)
    print(f"{cfg.name}: {summary['sealed']}/{summary['competitions']} competitions sealed, "
          f"{len(metrics.invariant_breaches)} invariant breaches, config {dg[:16]}")
    if metrics.invariant_breaches:
        for b in metrics.invariant_breaches[:10]:
            print(f"invariant breach: {b}", file=sys.stderr)
        return EXIT_BREACH
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    p = _protocol(args)
    try:
        rep = verify_pos_dominance(p, r=args.r, P_vstake=args.P_vstake, p_pools=args.p_pools)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError("r/P_vstake/p_pools", str(e)) from None
    print(rep.render())
    if args.out:
        out = _out_dir(args)
        inputs = {"r": str(args.r if args.r is not None else p.r),
                  "P_vstake": str(args.P_vstake if args.P_vstake is not None else p.P_vstake),
                  "p_pools": str(args.p_pools if args.p_pools is not None else p.p_pools)}
        dg = _digest_of(inputs)
        _write_json(out / "theorem.json", {"config_digest": dg, "inputs": inputs, "result": rep.to_record(),
                                           "line": rep.render()})
        RunManifest("verify-theorem", dg, None, outputs=["theorem.json"], args=inputs).write(out)
    return EXIT_OK


def cmd_emit_frontier(args) -> int:
    try:
        grid = default_grid(args.grid_n, args.grid_max)
    except ValueError as e:
        raise ConfigError("grid_n", str(e)) from None
    inputs = {"r": [str(r) for r in args.r], "eps": str(args.eps), "grid_n": args.grid_n,
              "grid_max": str(args.grid_max)}
    dg = _digest_of(inputs)
    try:
        rows = frontier_table(args.r, args.eps, grid)
    except EmptyFrontier as e:
        print(f"empty_frontier: {e}", file=sys.stderr)
        return EXIT_EMPTY
    out = _out_dir(args)
    (out / "frontier.csv").write_text(frontier_csv(rows, f"config_digest={dg}"))
    RunManifest("emit-frontier", dg, None, outputs=["frontier.csv"], args=inputs).write(out)
    print(f"{len(rows)} frontier points for r in {', '.join(map(str, args.r))} -> {out / 'frontier.csv'}")
    return EXIT_OK


def _run_attack(args, p: ProtocolParams) -> attacks.AttackReport:
    seed = args.seed or 0
    kind = args.kind
    if kind == "o1":
        return attacks.run_o1_attack(p, args.trials or 10_000, seed, honest=args.honest)
    if kind == "fork":
        share = 0.1 if args.stake_share is None else args.stake_share
        return attacks.fork_attack(p, args.hash_share, share, args.trials or 1000, seed)
    if kind == "withhold":
        return attacks.withhold_attack(p, args.alpha, args.trials or 20_000, runs=args.runs, seed=seed,
                                       stake_share=args.stake_share or 0.0)
    horizon = args.horizon or 256
    if kind == "ssa":
        return attacks.ssa_attack(seed, horizon, args.honest, args.spam_rate, args.ssa_fee, p, args.load)
    return attacks.collusion_attack(seed, horizon, args.colluders, args.honest, args.defectors, p)


ATTACK_ARGS = {"o1": ("trials", "honest"), "fork": ("trials", "hash_share", "stake_share"),
               "withhold": ("trials", "alpha", "runs", "stake_share"),
               "ssa": ("horizon", "honest", "spam_rate", "ssa_fee", "load"),
               "collusion": ("horizon", "colluders", "honest", "defectors")}


def cmd_attack(args) -> int:
    p = _protocol(args)
    rep = _run_attack(args, p)
    inputs = {"attack": args.kind, "seed": args.seed or 0, "protocol": p.to_dict(),
              **{k: getattr(args, k) for k in ATTACK_ARGS[args.kind]}}
    dg = _digest_of(inputs)
    out = _out_dir(args)
    _write_json(out / "attack.json", {"config_digest": dg, **rep.to_record()})
    RunManifest("attack", dg, args.seed or 0, outputs=["attack.json"],
                args={k: v for k, v in inputs.items() if k != "protocol"}).write(out)
    status = {True: "PASS", False: "FAIL", None: "n/a"}[rep.passed]
    print(f"attack {args.kind}: {status}" + (f" flags={','.join(rep.flags)}" if rep.flags else ""))
    breaches = rep.metrics.get("invariant_breaches", 0) if isinstance(rep.metrics, dict) else 0
    return EXIT_BREACH if breaches else EXIT_OK


def _report_lines(run: Path) -> list[str]:
    man = json.loads((run / "manifest.json").read_text())
    lines = [f"# {man['command']} run", "", f"- config digest: `{man['config_digest']}`",
             f"- seed: {man['seed']}", f"- version: {man['version']}", ""]
    if (run / "summary.json").exists():
        s = json.loads((run / "summary.json").read_text())
        lines += [f"## {s['name']}", "",
                  f"- horizon: {s['horizon']}",
                  f"- competitions: {s['competitions']} ({s['sealed']} sealed, {s['failed']} failed)",
                  f"- income reconciles: {'yes' if s['reconciles'] else 'no'}",
                  f"- invariant breaches: {len(s['invariant_breaches'])}",
                  f"- mean ticket pool: {s['ticket_stats']['mean_pool']:.1f}", "",
                  "| agent | income | blocks signed | competitions won |", "|---|---:|---:|---:|"]
        with open(run / "agents.csv") as f:
            rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
        lines += [f"| {r['agent']} | {r['income']} | {r['blocks_signed']} | {r['competitions_won']} |"
                  for r in rows]
    if (run / "attack.json").exists():
        a = json.loads((run / "attack.json").read_text())
        lines += [f"## attack: {a['attack']}", "", f"- passed: {a['passed']}",
                  f"- flags: {', '.join(a['flags']) or 'none'}", ""]
        lines += [f"- {k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(a["metrics"].items())]
    if (run / "theorem.json").exists():
        t = json.loads((run / "theorem.json").read_text())
        lines += ["## payoff comparison", "", t["line"]]
    if (run / "frontier.csv").exists():
        body = [x for x in (run / "frontier.csv").read_text().splitlines() if not x.startswith("#")]
        lines += ["## frontier", "", f"{len(body) - 1} points"]
    return lines


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not (run / "manifest.json").exists():
        raise ConfigError("run_dir", f"{run} has no manifest.json")
    text = "\n".join(_report_lines(run)) + "\n"
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poaw", description="Hybrid PoW/PoS useful-work chain simulator.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default: str | None = "out"):
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key override, repeatable (e.g. protocol.r=1.2)")

    p = sub.add_parser("simulate", help="run a YAML scenario")
    p.add_argument("scenario")
    p.add_argument("--horizon", type=int)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-theorem", help="compare PoS and O(1) payoff factors")
    p.add_argument("--r", type=float)
    p.add_argument("--P-vstake", dest="P_vstake", type=float)
    p.add_argument("--p-pools", dest="p_pools", type=float)
    p.add_argument("--preset", choices=sorted(PRESETS), default="scaled")
    common(p, None)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("emit-frontier", help="admissible (P_vstake, p_pools) pairs per r")
    p.add_argument("--r", type=float, nargs="+", default=[1.06, 1.08, 1.10, 1.12])
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--grid-n", type=int, default=41)
    p.add_argument("--grid-max", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_emit_frontier)

    p = sub.add_parser("attack", help="run one attack harness")
    p.add_argument("kind", choices=sorted(ATTACK_ARGS))
    p.add_argument("--horizon", type=int)
    p.add_argument("--trials", type=int, help="cycles, trials or events, per attack")
    p.add_argument("--honest", type=int, default=1)
    p.add_argument("--hash-share", type=float, default=0.6)
    p.add_argument("--stake-share", type=float, help="adversary stake share (fork 0.1, withhold 0.0)")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--spam-rate", type=int, default=5)
    p.add_argument("--ssa-fee", type=int, default=1000)
    p.add_argument("--load", type=float, default=0.0, help="background payments per block (ssa)")
    p.add_argument("--colluders", type=int, default=4)
    p.add_argument("--defectors", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="scaled")
    common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="render a run directory as markdown")
    p.add_argument("run_dir")
    p.add_argument("--out", help="where report.md goes (default: the run directory)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
