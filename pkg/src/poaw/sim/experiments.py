"""Batch experiments: conservation under random scenarios, the dTMN failure
threshold, zero-task degeneration and the block-assembly incentive."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import competition as cp
from ..params import ATOMS_PER_COIN, ProtocolParams, expiry_for_miss_rate
from ..pools import PoolLedger, Win, main_chain_weight_allocation
from .config import AgentStrategy, SimConfig, TaskStream, rng_for
from .scenario import Simulation

COMPETITION_KINDS = frozenset({"Publish", "Ask", "Deal", "Stored", "Solve", "Validate", "Seal",
                               "MicropaymentClaim", "ChannelOpen", "Bid"})


# -- random scenarios -------------------------------------------------------------

def random_config(seed: int, horizon: int = 5000, failures: bool = True) -> SimConfig:
    """A randomized but valid scenario: mixed assembly strategies, offline
    voters, failing and dishonest storage miners, adversaries, payments."""
    rng = rng_for(seed, "random-config")
    pool = int(rng.choice([128, 256, 512]))
    r_s = int(rng.integers(3, 6))
    params = ProtocolParams(pool_target=pool, ticket_expiry=expiry_for_miss_rate(pool),
                            r_s=r_s, ticket_quota=8, B_distr=int(rng.choice([16, 32, 64])),
                            NB_freeze=int(rng.integers(0, 5)), NB_compete=int(rng.integers(2, 9)),
                            NB_validate=int(rng.integers(1, 4)), timeout_retrieve=int(rng.integers(2, 10)),
                            ping_timeout=int(rng.integers(2, 6)), settlement_delay=int(rng.integers(1, 9)),
                            P_vstake=float(rng.choice([0.1, 0.25])), p_pool1=float(rng.choice([0.05, 0.1])),
                            p_pool2=float(rng.choice([0.05, 0.1])))
    big = 10**7 * ATOMS_PER_COIN
    n_hash = int(rng.integers(1, 4))
    agents = []
    hp = rng.dirichlet(np.ones(n_hash))
    for i in range(n_hash):
        agents.append(AgentStrategy(f"pow{i}", "HashMiner", hash_power=float(hp[i]) * 0.999,
                                    assembly=str(rng.choice(["all_solves", "fee_only", "no_solves"])),
                                    tx_rate=float(rng.uniform(0, 0.5))))
    n_pos = int(rng.integers(1, 4))
    ss = rng.dirichlet(np.ones(n_pos))
    for i in range(n_pos):
        agents.append(AgentStrategy(f"pos{i}", "PoSMiner", stake_share=float(ss[i]) * 0.999, balance=big,
                                    miss_prob=float(rng.choice([0.0, 0.05, 0.3]))))
    storms = sorted(int(x) for x in rng.integers(1, horizon, size=3))
    for i in range(int(rng.integers(r_s, r_s + 4))):
        fail = None
        if failures and rng.random() < 0.4:  # scattered or clustered around a storm
            fail = int(rng.integers(1, horizon)) if rng.random() < 0.3 else storms[i % 3] + int(rng.integers(0, 8))
        agents.append(AgentStrategy(f"sm{i}", "StorageMiner", fail_at=fail,
                                    dishonest=bool(failures and rng.random() < 0.1)))
    for i in range(int(rng.integers(0, 4))):
        agents.append(AgentStrategy(f"solver{i}", "HonestSolver", solve_rate=float(rng.uniform(0.2, 1)),
                                    commit=str(rng.choice(["hash", "shard"])), balance=10**5 * ATOMS_PER_COIN))
    if rng.random() < 0.4:
        agents.append(AgentStrategy("ssa", "SSAAdversary", spam_rate=int(rng.integers(1, 4)),
                                    balance=10**5 * ATOMS_PER_COIN))
    if rng.random() < 0.3:
        for i in range(2):
            agents.append(AgentStrategy(f"cartel{i}", "Colluder", group="cartel", defect=bool(i == 0 and rng.random() < .5),
                                        balance=10**5 * ATOMS_PER_COIN))
    if rng.random() < 0.3:
        agents.append(AgentStrategy("o1", "O1Adversary", task_rate=float(rng.uniform(0.005, 0.03)),
                                    balance=10**6 * ATOMS_PER_COIN))
    agents.append(AgentStrategy("client", "Client", balance=big))
    stream = TaskStream(rate=float(rng.uniform(0.0, 0.1)), size=int(rng.integers(6, 13)),
                        pf_delay=int(rng.integers(0, 40)),
                        fee_solve=int(rng.integers(1, 50)) * ATOMS_PER_COIN)
    return SimConfig(protocol=params, agents=agents, horizon=horizon, seed=seed, task_stream=stream,
                     name=f"random-{seed}")


@dataclass
class ConservationResult:
    seed: int
    horizon: int
    breaches: list[str]
    reconciles: bool
    sealed: int
    failed: int
    failures: dict[str, int]
    claims: int
    vstakes_minted: int

    @property
    def clean(self) -> bool:
        return not self.breaches and self.reconciles


def conservation_run(seed: int, horizon: int = 5000) -> ConservationResult:
    """One randomized scenario with every invariant checked after every
    block, plus channel conservation of each claimed channel."""
    sim = Simulation(random_config(seed, horizon))
    m = sim.run()
    st = sim.state
    breaches = list(m.invariant_breaches)
    for ch in st.channels.values():
        if ch.balance_a + ch.balance_b != ch.deposit or min(ch.balance_a, ch.balance_b) < 0:
            breaches.append(f"channel {ch.channel_id} unbalanced")
    if sum(r.amount for r in st.pools.history) != st.counters["pool_paid"]:
        breaches.append("pool payouts disagree with the distribution history")
    comps = m.competitions
    return ConservationResult(seed, horizon, breaches, m.reconciles(),
                              sum(c["status"] == "sealed" for c in comps),
                              sum(c["status"] == "failed" for c in comps),
                              dict(Counter(c["failure"] for c in comps if c["failure"])),
                              m.tx_counts.get("MicropaymentClaim", 0), st.counters["vstake_minted"])


def conservation_suite(n_runs: int = 1000, horizon: int = 5000, seed0: int = 0,
                       progress=None, workers: int = 1) -> list[ConservationResult]:
    """Independent runs, optionally across ``workers`` processes.  Results
    come back sorted by seed whatever order they finish in."""
    seeds = range(seed0, seed0 + n_runs)
    if workers <= 1:
        out = []
        for k, s in enumerate(seeds):
            out.append(conservation_run(s, horizon))
            if progress:
                progress(k, out[-1])
        return out
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as ex:
        out = list(ex.map(conservation_run, seeds, [horizon] * n_runs))
    return sorted(out, key=lambda r: r.seed)


# -- dTMN failure threshold ----------------------------------------------------------

def dead_from(fail_at: int | None, formed: int, ping_timeout: int) -> float:
    """First height at which the ledger may prune a member that stops
    pinging at ``fail_at``: its last ping is at max(fail_at - 1, formed)."""
    if fail_at is None:
        return float("inf")
    return max(fail_at - 1, formed) + ping_timeout + 1


@dataclass
class ThresholdResult:
    seed: int
    checked: int
    mismatches: list[str] = field(default_factory=list)
    aborted: int = 0
    leaked: list[str] = field(default_factory=list)  # aborted competitions that paid PF or minted


def dtmn_threshold_run(seed: int, horizon: int = 400) -> ThresholdResult:
    """Random failure schedule; every competition must abort with
    ``dtmn_failed`` exactly when its live membership first drops below
    floor(r_s/2)+1 while it is still open."""
    rng = rng_for(seed, "dtmn-threshold")
    r_s = int(rng.integers(3, 7))
    params = ProtocolParams(r_s=r_s, pool_target=256, ticket_expiry=expiry_for_miss_rate(256))
    n_sm = r_s + int(rng.integers(0, 3))
    agents = [AgentStrategy("pow", "HashMiner", hash_power=1.0),
              AgentStrategy("pos", "PoSMiner", stake_share=1.0, balance=10**7 * ATOMS_PER_COIN),
              AgentStrategy("client", "Client", balance=10**7 * ATOMS_PER_COIN),
              AgentStrategy("solver", "HonestSolver", solve_rate=float(rng.uniform(0.3, 1)),
                            balance=10**5 * ATOMS_PER_COIN)]
    # correlated failures: members drop out around one storm height
    storm = int(rng.integers(horizon // 4, horizon))
    p_fail = float(rng.uniform(0.2, 0.9))
    for i in range(n_sm):
        fail = storm + int(rng.integers(0, 16)) if rng.random() < p_fail else None
        agents.append(AgentStrategy(f"sm{i}", "StorageMiner", fail_at=fail))
    cfg = SimConfig(protocol=params, agents=agents, horizon=horizon, seed=seed,
                    task_stream=TaskStream(rate=0.08, size=8), name=f"threshold-{seed}")
    sim = Simulation(cfg)
    sim.run()
    st = sim.state
    quorum = params.dtmn_quorum
    closed = {}
    for e in st.events:
        if e["event"] == "sealed":
            closed[e["publish_ref"]] = e["height"]
        elif e["event"] == "competition_failed":
            closed[e["publish_ref"]] = e["height"]
    res = ThresholdResult(seed, 0)
    accrued = {a.publish_ref for a in st.pools.pending} | {
        r["publish_ref"] for r in st.events if r["event"] == "sealed"}
    for ref, d in st.dtmns.items():
        comp = st.competitions[ref]
        deaths = sorted(dead_from(sim.agents[m].fail_at, d.formed_height, params.ping_timeout)
                        for m in d.members)
        # live count drops below quorum once len(members) - quorum + 1 members are dead
        k = len(d.members) - quorum
        F = deaths[k] if k < len(deaths) else float("inf")
        end = closed.get(ref, st.height)
        expect_abort = F <= end and not (comp.status == "sealed" and closed[ref] < F)
        aborted = comp.failure == "dtmn_failed"
        res.checked += 1
        if aborted:
            res.aborted += 1
            if closed[ref] != F:
                res.mismatches.append(f"{ref}: aborted at {closed[ref]}, oracle {F}")
            if ref in accrued or comp.winners:
                res.leaked.append(ref)
        elif expect_abort and comp.status == "open":
            res.mismatches.append(f"{ref}: still open past oracle failure {F}")
        elif expect_abort and comp.status == "sealed":
            res.mismatches.append(f"{ref}: sealed at {closed[ref]} after oracle failure {F}")
        elif expect_abort and comp.failure not in (None, "dtmn_failed") and closed[ref] >= F:
            res.mismatches.append(f"{ref}: failed as {comp.failure} at {closed[ref]}, oracle {F}")
    # vstakes are minted only by seals
    minted = 0
    for ref, comp in st.competitions.items():
        if comp.status == "sealed":
            minted += sum(cp.seal_payouts(comp.publish, comp.winners, params.P_vstake).vstakes.values())
    if minted != st.counters["vstake_minted"]:
        res.leaked.append("vstake mint outside seals")
    return res


# -- zero-task degeneration -----------------------------------------------------------

def zero_task_check(seed: int = 0, horizon: int = 512) -> dict:
    """With an empty task stream the chain is plain hybrid PoW/PoS."""
    agents = [AgentStrategy("pow1", "HashMiner", hash_power=0.6, tx_rate=0.5),
              AgentStrategy("pow2", "HashMiner", hash_power=0.4, tx_rate=0.5),
              AgentStrategy("pos1", "PoSMiner", stake_share=0.7, balance=10**7 * ATOMS_PER_COIN),
              AgentStrategy("pos2", "PoSMiner", stake_share=0.3, balance=10**7 * ATOMS_PER_COIN),
              AgentStrategy("solver", "HonestSolver"), AgentStrategy("sm0", "StorageMiner")]
    cfg = SimConfig(agents=agents, horizon=horizon, seed=seed, task_stream=TaskStream(rate=0.0))
    sim = Simulation(cfg)
    m = sim.run()
    kinds = Counter(tx.kind.value for b in sim.blocks[1:] for tx in b.txs)
    comp_txs = sum(v for k, v in kinds.items() if k in COMPETITION_KINDS)
    voted = all(len(b.votes) >= sim.p.vote_majority for b in sim.blocks[1:])
    return {"blocks": horizon, "tx_kinds": dict(kinds), "competition_txs": comp_txs,
            "competitions": len(sim.state.competitions), "every_block_voted": voted,
            "pool_total": sim.state.pools.total(), "vstakes_minted": sim.state.counters["vstake_minted"],
            "invariant_breaches": m.invariant_breaches, "reconciles": m.reconciles()}


# -- block assembly incentive ------------------------------------------------------------

def assembly_payoff(strategy: str, rng: np.random.Generator, n_windows: int = 4, B: int = 32,
                    capacity: int = 8, pf_main: int = 10_000, fee_tr: int = 1000) -> int:
    """Revenue of one signer (a third of the hash power) under ``strategy``
    when its blocks compete for the main-chain pool with ordinary txs."""
    pools = PoolLedger(B)
    income = 0
    n = 0
    for h in range(n_windows * B):
        mine = rng.random() < 1 / 3
        solves = int(rng.poisson(3))
        txs = int(rng.poisson(10))
        strat = strategy if mine else "all_solves"
        if strat == "no_solves":
            inc_solves = 0
        elif strat == "fee_only":
            inc_solves = min(solves, max(0, capacity - txs))  # solves pay the same fee, come last
        else:
            inc_solves = min(solves, capacity)
        inc_tx = min(txs, capacity - inc_solves)
        if mine:
            income += (inc_tx + inc_solves) * fee_tr
        for _ in range(inc_solves):
            n += 1
            pools.balances["main"] += pf_main
            pools.pending_wins.append(Win(f"s{n}", h, "me" if mine else "other", pf_main))
        if pools.is_window_end(h):
            for rec in pools.distribute_window(h, 0.5, 0, 0):
                if rec.recipient == "me":
                    income += rec.amount
    return income


def proposition_check(n_runs: int = 1000, seed: int = 0) -> dict:
    """Mean signer revenue per assembly strategy; including improving solves
    should be the best response when pool rewards exceed ordinary fees."""
    rng = rng_for(seed, "proposition")
    out = {}
    for strategy in ("all_solves", "fee_only", "no_solves"):
        out[strategy] = float(np.mean([assembly_payoff(strategy, rng) for _ in range(n_runs)]))
    out["argmax"] = max(("all_solves", "fee_only", "no_solves"), key=lambda s: out[s])
    return out


def pool_correlation(n_windows: int = 10_000, seed: int = 0, B: int = 32, miners: int = 4) -> float:
    """Correlation between a miner's share of winning solves in a window and
    its share of the main-chain pool payout."""
    rng = rng_for(seed, "pool-corr")
    xs, ys = [], []
    for _ in range(n_windows):
        window = [[(f"m{int(rng.integers(miners))}", int(rng.integers(1, 10**6)))
                   for _ in range(int(rng.poisson(0.5)))] for _ in range(B)]
        signer = [f"m{int(rng.integers(miners))}" for _ in range(B)]
        wins = [[pf for _, pf in blk] for blk in window]
        profits = main_chain_weight_allocation(wins)
        total = sum(profits)
        if not total:
            continue
        n_w = sum(len(w) for w in wins)
        share_w = sum(len(w) for w, s in zip(wins, signer) if s == "m0") / n_w
        share_p = sum(p for p, s in zip(profits, signer) if s == "m0") / total
        xs.append(share_w)
        ys.append(share_p)
    return float(np.corrcoef(xs, ys)[0, 1])
