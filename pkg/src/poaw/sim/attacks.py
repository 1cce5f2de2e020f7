"""Adversary harnesses.

O(1): a self-dealing client runs its own competitions through the real
competition machinery.  Fork and withholding races run on a real block
tree with synthetic voted blocks, since only PoW luck and ticket votes
matter there.  SSA and collusion run the full scenario loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import competition as cp
from ..chain import Block, BlockTree, Vote, fork_choice
from ..crypto import digest, hash_commit
from ..econ import expected_pos_factor, o1_adversary_factor
from ..params import ATOMS_PER_COIN, ProtocolParams
from ..tasks import encode_candidate, miner_solve, random_task, score_solution
from .config import AgentStrategy, SimConfig, TaskStream, rng_for
from .scenario import Metrics, run_scenario


@dataclass
class AttackReport:
    attack: str
    params: dict
    metrics: dict
    flags: list[str] = field(default_factory=list)
    passed: bool | None = None

    def to_record(self) -> dict:
        return {"attack": self.attack, "params": self.params, "metrics": self.metrics,
                "flags": self.flags, "passed": self.passed}


# -- O(1) adversary -------------------------------------------------------------

def _members(n: int) -> list[str]:
    return [f"tm{i}" for i in range(n)]


def o1_cycle(params: ProtocolParams, rng: np.random.Generator, k: int, honest: int = 0,
             kind: str | None = None, size: int = 8, inclusion: float = 0.8) -> tuple[float, bool]:
    """One self-dealt competition.  Returns (payoff factor, adversary won).

    The adversary knows the optimum in advance and submits at the first
    compete height.  ``honest`` solvers receive the task at Stored; with a
    freeze window they are ready by the same height, without one they need
    a block.  Each Solve then waits a geometric number of blocks (per-block
    inclusion chance ``inclusion``) and lands at a random position, so an
    honest solver can beat the adversary outright.
    """
    p = params
    kind = kind or ("knapsack", "clique")[int(rng.integers(2))]
    task = random_task(kind, rng, size)
    fee_solve = int(rng.integers(ATOMS_PER_COIN, 100 * ATOMS_PER_COIN))
    ref = f"o1:{k}"
    pub = cp.PublishPayload(task.slim(), ATOMS_PER_COIN, fee_solve,
                            cp.default_pf_schedule(p, fee_solve), "adversary")
    comp = cp.CompetitionState(ref, pub, p.NB_freeze, p.NB_compete, p.NB_validate)
    members = _members(p.r_s)
    comp.stored_height, comp.dtmn_members = 0, tuple(members)
    _, f, v, s = comp.boundaries()
    best = encode_candidate(miner_solve(task))
    score = score_solution(task, best)
    reveals = {}
    honest_ready = f if p.NB_freeze > 0 else f + 1
    entrants = [("adversary", f)] + [(f"honest{i}", honest_ready) for i in range(honest)]
    if honest:
        entrants = [(m, h + int(rng.geometric(inclusion)) - 1, rng.random()) for m, h in entrants]
    else:
        entrants = [(m, h, 0.0) for m, h in entrants]
    for pos, (miner, h, _) in enumerate(sorted(entrants, key=lambda e: (e[1], e[2]))):
        if h >= v:
            continue
        nonce = rng.bytes(16)
        sid = f"{ref}:{miner}"
        payload = cp.SolvePayload(miner, cp.Commitment("hash", hash_commit(best, nonce)), score, ref, members[0])
        cp.admit_solve(comp, payload, h, sid, pos, "signer")
        reveals[sid] = cp.HashReveal(best, nonce)
    keys = {m: cp.vote_key(digest(m.encode()), ref) for m in members}
    comp.validate_record = cp.validate_solutions(comp, members, reveals, task, keys, height=v)
    seal = cp.seal_competition(comp, keys, p.dtmn_quorum)
    pay = cp.seal_payouts(pub, seal.winners, p.P_vstake)
    got = pay.currency.get("adversary", 0) + pay.vstakes.get("adversary", 0)
    return got / fee_solve, "adversary" in seal.winners


def o1_payoff_mc(params: ProtocolParams | None = None, n_cycles: int = 100_000, seed: int = 0,
                 honest: int = 0) -> dict:
    """Mean payoff factor (currency + vstakes at face value, per unit of
    fee_solve) of the self-dealing client."""
    p = params or ProtocolParams()
    rng = rng_for(seed, "o1")
    factors = np.empty(n_cycles)
    wins = 0
    for k in range(n_cycles):
        factors[k], won = o1_cycle(p, rng, k, honest)
        wins += won
    analytic = float(o1_adversary_factor(p.P_vstake, p.p_pools))
    mean = float(factors.mean())
    return {"cycles": n_cycles, "mean_factor": mean, "analytic": analytic,
            "rel_error": abs(mean - analytic) / analytic, "win_rate": wins / n_cycles,
            "pos_factor": float(expected_pos_factor(p.r)), "honest": honest}


def run_o1_attack(params: ProtocolParams | None = None, n_cycles: int = 10_000, seed: int = 0,
                  honest: int = 1, control_cycles: int = 20_000) -> AttackReport:
    """Self-dealing client against a pure-PoS holder of equal capital.

    The freeze window is what keeps honest solvers level with the
    adversary; with ``NB_freeze = 0`` the report carries the
    ``freeze_window_disabled`` flag.
    """
    from .market import pos_payoff_mc

    p = params or ProtocolParams()
    solo = o1_payoff_mc(p, n_cycles, seed, 0)
    contested = o1_payoff_mc(p, n_cycles, seed, honest) if honest else None
    control = pos_payoff_mc(p, control_cycles, seed)
    flags = ["freeze_window_disabled"] if p.NB_freeze == 0 else []
    m = {"solo": solo, "contested": contested, "pos_control_factor": control.mean_payoff,
         "pos_control_cycles": control.resolved,
         "dominance": solo["mean_factor"] < control.mean_payoff}
    return AttackReport("o1", {"NB_freeze": p.NB_freeze, "honest": honest, "n_cycles": n_cycles},
                        m, flags, passed=m["dominance"] and not flags)


# -- fork race --------------------------------------------------------------------

def majority_prob(share: float, k: int = 5, need: int = 3) -> float:
    """P(Bin(k, share) >= need): a block collects enough approving votes."""
    return sum(math.comb(k, j) * share**j * (1 - share) ** (k - j) for j in range(need, k + 1))


class _Forge:
    """Builds synthetic voted blocks on a real BlockTree."""

    def __init__(self, params: ProtocolParams, seed: int):
        self.p = params
        self.n = 0
        genesis = Block(0, b"\x00" * 32, "genesis", params.pow_target, seed)
        self.tree = BlockTree(genesis, params.vote_majority)

    def block(self, parent: bytes, signer: str, n_votes: int) -> bytes:
        self.n += 1
        ph = self.tree.nodes[parent].block.height
        votes = tuple(Vote.cast(self.n * 8 + j, signer, parent) for j in range(n_votes))
        b = Block(ph + 1, parent, signer, self.p.pow_target, self.n, votes)
        return self.tree.add(b)


def fork_trial(params: ProtocolParams, hash_share: float, stake_share: float, rng: np.random.Generator,
               z: int = 6, max_events: int = 400, give_up: int = 20) -> bool:
    """Double-spend race from a common parent.

    Each PoW success belongs to the adversary with probability
    ``hash_share``.  A block needs a vote majority from the five tickets its
    parent draws; honest tickets never vote on the private branch and the
    adversary's tickets abstain on the honest one, so a block is usable with
    probability P(Bin(5, s) >= 3) or P(Bin(5, 1-s) >= 3).  The attack
    succeeds if fork choice prefers the private tip once the honest branch
    holds ``z`` confirmations.
    """
    p = params
    forge = _Forge(p, int(rng.integers(1 << 30)))
    root = forge.tree.genesis.digest
    adv_tip, hon_tip = root, root
    q_adv, q_hon = majority_prob(stake_share), majority_prob(1 - stake_share)
    k, need = p.votes_per_block, p.vote_majority
    for _ in range(max_events):
        if rng.random() < hash_share:
            if rng.random() < q_adv:
                adv_tip = forge.block(adv_tip, "adversary", int(rng.integers(need, k + 1)))
        elif rng.random() < q_hon:
            hon_tip = forge.block(hon_tip, "honest", int(rng.integers(need, k + 1)))
        t = forge.tree
        hon_h, adv_h = t.nodes[hon_tip].block.height, t.nodes[adv_tip].block.height
        if hon_h >= z and fork_choice(t, [adv_tip, hon_tip]) == adv_tip and adv_h > 0:
            return True
        if hon_h - adv_h > give_up:
            return False
    return False


def fork_attack(params: ProtocolParams | None = None, hash_share: float = 0.6, stake_share: float = 0.1,
                trials: int = 1000, seed: int = 0, z: int = 6) -> AttackReport:
    p = params or ProtocolParams()
    rng = rng_for(seed, f"fork:{hash_share}:{stake_share}")
    wins = sum(fork_trial(p, hash_share, stake_share, rng, z) for _ in range(trials))
    return AttackReport("fork", {"hash_share": hash_share, "stake_share": stake_share, "trials": trials, "z": z},
                        {"success_rate": wins / trials, "successes": wins,
                         "adversary_block_usable": majority_prob(stake_share),
                         "honest_block_usable": majority_prob(1 - stake_share)})


# -- block withholding --------------------------------------------------------------

def eyal_sirer_revenue(alpha: float, gamma: float) -> float:
    """Closed-form relative revenue of selfish mining (PoW only)."""
    a, g = alpha, gamma
    return (a * (1 - a) ** 2 * (4 * a + g * (1 - 2 * a)) - a**3) / (1 - a * (1 + (2 - a) * a))


def withhold_run(params: ProtocolParams, alpha: float, n_events: int, rng: np.random.Generator,
                 pos: bool, stake_share: float = 0.0) -> float:
    """Selfish-mining policy against honest miners that follow fork choice.

    Without votes (the control) the adversary keeps a private lead and
    reveals it to orphan honest blocks; ties fall to the digest tie-break.
    Under PoS approval a block needs three votes from its parent's tickets;
    honest holders only vote on published parents, so a private block can
    only be extended when the adversary's own tickets supply the majority.
    Returns the adversary's share of the final main chain.
    """
    p = params
    forge = _Forge(p, int(rng.integers(1 << 30)))
    t = forge.tree
    k, need = p.votes_per_block, p.vote_majority
    public: set[bytes] = {t.genesis.digest}
    private: list[bytes] = []  # unpublished adversary blocks, oldest first
    adv_tip = t.genesis.digest

    def h(d: bytes) -> int:
        return t.nodes[d].block.height

    def best_public() -> bytes:
        top = max(h(d) for d in public)
        return fork_choice(t, [d for d in public if h(d) >= top - 1])

    def publish(upto: int) -> None:
        while private and h(private[0]) <= upto:
            d = private.pop(0)
            public.discard(t.nodes[d].block.parent_digest)
            public.add(d)

    def votes_for(parent: bytes, adversary: bool) -> int:
        """Approving votes a new block on ``parent`` can collect."""
        if not pos:
            return 0
        mine = int(rng.binomial(k, stake_share))
        if not adversary:
            return k - mine  # the adversary's tickets abstain on honest blocks
        return mine + (k - mine if parent not in private else 0)

    for _ in range(n_events):
        if rng.random() < alpha:
            nv = votes_for(adv_tip, True)
            if pos and nv < need:
                continue
            tied = len([d for d in public if h(d) == h(adv_tip)]) > 1 and adv_tip in public
            adv_tip = forge.block(adv_tip, "adversary", nv)
            private.append(adv_tip)
            if tied:
                publish(h(adv_tip))
        else:
            parent = best_public()
            nv = votes_for(parent, False)
            if pos and nv < need:
                continue
            d = forge.block(parent, "honest", nv)
            public.discard(parent)
            public.add(d)
            hp = h(d)
            if not private:
                if h(adv_tip) < hp:
                    adv_tip = best_public()
                continue
            lead = h(private[-1]) - hp
            if lead < 0:
                private.clear()
                adv_tip = best_public()
            elif lead <= 1:
                publish(h(private[-1]))
            else:
                publish(hp)
        top = max(h(d) for d in public)
        public = {d for d in public if h(d) >= top - 2}
    publish(10**12)
    tip = fork_choice(t, list(public))
    chain = t.chain(tip)[1:]
    return sum(b.signer == "adversary" for b in chain) / max(1, len(chain))


def withhold_attack(params: ProtocolParams | None = None, alpha: float = 0.3, n_events: int = 20_000,
                    runs: int = 5, seed: int = 0, stake_share: float = 0.0) -> AttackReport:
    p = params or ProtocolParams()
    rng = rng_for(seed, f"withhold:{alpha}")
    control = float(np.mean([withhold_run(p, alpha, n_events, rng, False) for _ in range(runs)]))
    under_pos = float(np.mean([withhold_run(p, alpha, n_events, rng, True, stake_share) for _ in range(runs)]))
    m = {"alpha": alpha, "control_revenue": control, "pos_revenue": under_pos,
         "eyal_sirer_gamma_half": eyal_sirer_revenue(alpha, 0.5),
         "control_gain": control - alpha, "pos_gain": under_pos - alpha}
    return AttackReport("withhold", {"alpha": alpha, "n_events": n_events, "runs": runs,
                                     "stake_share": stake_share}, m,
                        passed=control > alpha and under_pos <= alpha)


# -- scenario-level attacks ---------------------------------------------------------

def _base_agents(n_storage: int = 6) -> list[AgentStrategy]:
    big = 10**6 * ATOMS_PER_COIN
    out = [AgentStrategy("client", "Client", balance=big),
           AgentStrategy("pow1", "HashMiner", hash_power=0.5),
           AgentStrategy("pow2", "HashMiner", hash_power=0.5),
           AgentStrategy("pos1", "PoSMiner", stake_share=0.5, balance=big),
           AgentStrategy("pos2", "PoSMiner", stake_share=0.5, balance=big)]
    return out + [AgentStrategy(f"sm{i}", "StorageMiner") for i in range(n_storage)]


def ssa_config(seed: int = 0, horizon: int = 256, honest: int = 1, spam_rate: int = 5,
               ssa_fee: int = 1000, params: ProtocolParams | None = None, load: float = 0.0) -> SimConfig:
    """``load`` is the background payment rate per block (fee 1000 atoms
    each) competing with the spam for block space."""
    agents = _base_agents()
    if load:
        agents[1].tx_rate = agents[2].tx_rate = load / 2
    agents += [AgentStrategy(f"honest{i}", "HonestSolver", balance=10**4 * ATOMS_PER_COIN)
               for i in range(honest)]
    agents.append(AgentStrategy("ssa", "SSAAdversary", spam_rate=spam_rate, fee_tr=ssa_fee,
                                balance=10**4 * ATOMS_PER_COIN))
    return SimConfig(protocol=params or ProtocolParams(), agents=agents, horizon=horizon, seed=seed,
                     task_stream=TaskStream(rate=0.1), name="ssa")


def ssa_attack(seed: int = 0, horizon: int = 256, honest: int = 1, spam_rate: int = 5,
               ssa_fee: int = 1000, params: ProtocolParams | None = None, load: float = 0.0) -> AttackReport:
    m = run_scenario(ssa_config(seed, horizon, honest, spam_rate, ssa_fee, params, load))
    sealed = [c for c in m.competitions if c["status"] == "sealed"]
    ssa_net = m.income_total("ssa")
    ssa_wins = sum("ssa" in c["winners"] for c in sealed)
    honest_wins = sum(any(w.startswith("honest") for w in c["winners"]) for c in sealed)
    included = sum(c["n_solves"] for c in m.competitions)
    met = {"sealed": len(sealed), "ssa_net_income": ssa_net, "ssa_wins": ssa_wins,
           "honest_wins": honest_wins, "solves_included": included,
           "ssa_solves_included": sum(c["solves_by"].get("ssa", 0) for c in m.competitions),
           "ssa_solves_sent": spam_rate * len(m.competitions),
           "ssa_solve_fees": -m.income.get("ssa", {}).get("fee_paid", 0),
           "invariant_breaches": len(m.invariant_breaches)}
    passed = (ssa_net < 0 and ssa_wins == 0) if honest else None
    return AttackReport("ssa", {"honest": honest, "spam_rate": spam_rate, "ssa_fee": ssa_fee,
                                "horizon": horizon, "seed": seed, "load": load}, met, passed=passed)


def collusion_config(seed: int = 0, horizon: int = 256, colluders: int = 4, honest: int = 1,
                     defectors: int = 0, params: ProtocolParams | None = None) -> SimConfig:
    agents = _base_agents()
    for i in range(colluders):
        agents.append(AgentStrategy(f"colluder{i}", "Colluder", group="cartel", defect=i < defectors,
                                    balance=10**4 * ATOMS_PER_COIN))
    agents += [AgentStrategy(f"honest{i}", "HonestSolver", solve_rate=1.0, balance=10**4 * ATOMS_PER_COIN)
               for i in range(honest)]
    return SimConfig(protocol=params or ProtocolParams(), agents=agents, horizon=horizon, seed=seed,
                     task_stream=TaskStream(rate=0.1), name="collusion")


def collusion_attack(seed: int = 0, horizon: int = 256, colluders: int = 4, honest: int = 1,
                     defectors: int = 0, params: ProtocolParams | None = None) -> AttackReport:
    m = run_scenario(collusion_config(seed, horizon, colluders, honest, defectors, params))
    sealed = [c for c in m.competitions if c["status"] == "sealed"]
    honest_in = sum(any(w.startswith("honest") for w in c["winners"]) for c in sealed)
    optimal = sum(c["winning_score"] == c["optimum"] for c in sealed)
    met = {"sealed": len(sealed), "honest_among_winners": honest_in,
           "honest_win_fraction": honest_in / len(sealed) if sealed else float("nan"),
           "optimal_winners": optimal,
           "best_submitted_wins": sum(c["winning_score"] == c["best_declared"] for c in sealed),
           "defector_wins": sum(any(w in {f"colluder{i}" for i in range(defectors)} for w in c["winners"])
                                for c in sealed),
           "invariant_breaches": len(m.invariant_breaches)}
    passed = (honest_in == len(sealed) and len(sealed) > 0) if honest else None
    return AttackReport("collusion", {"colluders": colluders, "honest": honest, "defectors": defectors,
                                      "horizon": horizon, "seed": seed}, met, passed=passed)


def scenario_metrics(config: SimConfig) -> Metrics:
    return run_scenario(config)
