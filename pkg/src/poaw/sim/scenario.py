"""Block-by-block scenario loop.

Each height: agents look at the ledger after the previous block and post
transactions to a shared mempool; the PoW signer (drawn by hash power)
orders the mempool by its assembly strategy and applies what is legal; the
tickets drawn by the parent's seed vote; the block is mined, added to the
block tree, and fork choice picks the tip.  Invariants are checked as the
chain grows.
"""

from __future__ import annotations

import copy
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .. import competition as cp
from ..chain import (BlockTree, Block, GenesisConfig, IllegalTx, LedgerState, Transaction, TxKind,
                     Vote, coinbase_tx, fork_choice, genesis_block, mine_block)
from ..crypto import digest, hash_commit
from ..params import MAX_TARGET
from ..storage import (DtmnFailed, MicropaymentChannel, channel_update, chunk_exchange,
                       claim_channel, signed_update)
from ..tasks import (better, brute_force_optimum, encode_candidate, miner_solve, random_candidate,
                     random_task, score_solution)
from ..tickets import stationary_ages
from .config import AgentStrategy, SimConfig, rng_for

SOLVER_KINDS = ("HonestSolver", "Colluder", "SSAAdversary")
STORAGE_CLASS = frozenset({TxKind.ASK, TxKind.DEAL, TxKind.STORED, TxKind.VALIDATE, TxKind.SEAL,
                           TxKind.MICROPAYMENT_CLAIM, TxKind.CHANNEL_OPEN, TxKind.PUBLISH})
TICKET_ELASTICITY = 8


class InvariantBreach(RuntimeError):
    pass


@dataclass
class Metrics:
    name: str
    seed: int
    horizon: int
    config_digest: str
    initial_balances: dict[str, int]
    final_balances: dict[str, int]
    income: dict[str, dict[str, int]]
    vstake_income: dict[str, dict[str, int]]
    blocks_signed: dict[str, int]
    competitions: list[dict]
    competitions_won: dict[str, int]
    pool_flows: dict[str, int]
    ticket_stats: dict[str, float]
    tx_counts: dict[str, int]
    rejections: dict[str, int]
    fork_events: int
    vote_stalls: int
    dtmn_flags: int
    invariant_breaches: list[str]
    attack_flags: list[str]
    chain_fingerprint: str
    state_fingerprint: str

    def income_total(self, agent: str) -> int:
        return sum(self.income.get(agent, {}).values())

    def reconciles(self) -> bool:
        """Every agent's income entries add up to its balance delta."""
        agents = set(self.initial_balances) | set(self.final_balances)
        return all(self.final_balances.get(a, 0) - self.initial_balances.get(a, 0) == self.income_total(a)
                   for a in agents)

    def summary(self) -> dict:
        sealed = [c for c in self.competitions if c["status"] == "sealed"]
        return {"name": self.name, "seed": self.seed, "horizon": self.horizon,
                "config_digest": self.config_digest,
                "competitions": len(self.competitions), "sealed": len(sealed),
                "failed": sum(c["status"] == "failed" for c in self.competitions),
                "blocks_signed": dict(sorted(self.blocks_signed.items())),
                "competitions_won": dict(sorted(self.competitions_won.items())),
                "pool_flows": dict(sorted(self.pool_flows.items())),
                "ticket_stats": self.ticket_stats, "tx_counts": dict(sorted(self.tx_counts.items())),
                "rejections": dict(sorted(self.rejections.items())),
                "fork_events": self.fork_events, "vote_stalls": self.vote_stalls,
                "dtmn_flags": self.dtmn_flags,
                "invariant_breaches": self.invariant_breaches, "attack_flags": self.attack_flags,
                "chain_fingerprint": self.chain_fingerprint, "state_fingerprint": self.state_fingerprint}

    def agent_rows(self) -> list[dict]:
        rows = []
        for a in sorted(set(self.initial_balances) | set(self.final_balances)):
            inc = self.income.get(a, {})
            rows.append({"agent": a, "initial": self.initial_balances.get(a, 0),
                         "final": self.final_balances.get(a, 0), "income": sum(inc.values()),
                         "coinbase": inc.get("coinbase", 0), "fees_earned": inc.get("fee_earned", 0),
                         "fees_paid": inc.get("fee_paid", 0), "stake_reward": inc.get("stake_reward", 0),
                         "solve_reward": inc.get("solve_reward", 0),
                         "pool_income": sum(v for k, v in inc.items() if k.startswith("pool_")),
                         "dtmn_fee": inc.get("dtmn_fee", 0),
                         "vstakes_minted": self.vstake_income.get(a, {}).get("seal_mint", 0),
                         "blocks_signed": self.blocks_signed.get(a, 0),
                         "competitions_won": self.competitions_won.get(a, 0)})
        return rows

    def competition_rows(self) -> list[dict]:
        cols = ("publish_ref", "client", "kind", "status", "failure", "stored_height", "n_solves",
                "winners", "winning_score", "optimum")
        return [{k: (";".join(c[k]) if isinstance(c.get(k), (list, tuple)) else c.get(k)) for k in cols}
                for c in self.competitions]


@dataclass
class _Plan:
    agent: str
    ref: str
    ready_at: int
    candidates: list[list[int]]
    source: str
    sent: bool = False


class Simulation:
    def __init__(self, config: SimConfig):
        self.cfg = config.validate()
        self.p = p = config.protocol
        self.agents = {a.id: a for a in config.agents}
        self.rng = {a.id: rng_for(config.seed, a.id) for a in config.agents}
        self.net = rng_for(config.seed, "__network__")
        self.genesis = GenesisConfig({a.id: a.balance for a in config.agents}, self._genesis_tickets())
        self.state = LedgerState(p, self.genesis, journal=True)
        g = genesis_block(self.genesis)
        self.tree = BlockTree(g, p.vote_majority)
        self.blocks: list[Block] = [g]
        self.timestamp = self.genesis.timestamp
        self.mempool: list[tuple[int, Transaction]] = []
        self.seq = 0
        self.tx_n = 0
        self.tasks: dict[str, object] = {}
        self.optima: dict[str, object] = {}
        self.task_kind: dict[str, str] = {}
        self.adversarial: dict[str, str] = {}  # publish ref -> O1 adversary id
        self.reveals: dict[str, dict[str, object]] = defaultdict(dict)
        self.plans: dict[tuple[str, str], _Plan] = {}
        self.offchain: dict[str, MicropaymentChannel] = {}
        self.channel_ref: dict[str, str] = {}
        self.inflight: set[tuple] = set()  # (kind, key) of txs waiting in the mempool
        self._keys: dict[str, tuple] = {}
        self.done: set[tuple] = set()
        self.published = 0
        self.hash_ids = [a.id for a in config.agents if a.hash_power > 0]
        w = np.array([self.agents[i].hash_power for i in self.hash_ids])
        self.hash_w = w / w.sum()
        self.pos_ids = [a.id for a in config.agents if a.stake_share > 0]
        self.storage_ids = sorted(a.id for a in config.agents if a.kind == "StorageMiner")
        self.client_id = config.task_stream.client or next(
            (a.id for a in config.agents if a.kind == "Client"), None)
        self.stats = Counter()
        self.rejections = Counter()
        self.breaches: list[str] = []
        self.flags: list[str] = []
        self.pool_sizes: list[int] = []
        if p.NB_freeze == 0 and any(a.kind == "O1Adversary" for a in config.agents):
            self.flags.append("freeze_window_disabled")

    # -- setup --------------------------------------------------------------

    def _genesis_tickets(self) -> tuple:
        p = self.p
        holders = [(a.id, a.stake_share) for a in self.cfg.agents if a.stake_share > 0]
        if not holders:
            return ()
        n = p.pool_target
        shares = np.array([s for _, s in holders]) / sum(s for _, s in holders)
        counts = np.floor(shares * n).astype(int)
        for k in np.argsort(-(shares * n - counts), kind="stable")[: n - counts.sum()]:
            counts[k] += 1
        owners = [h for (h, _), c in zip(holders, counts) for _ in range(c)]
        order = self.net_init().permutation(len(owners))
        ages = stationary_ages(n, p.pool_target, p.votes_per_block, p.ticket_expiry)
        return tuple((owners[int(order[k])], p.ticket_base_price, -ages[k]) for k in range(n))

    def net_init(self) -> np.random.Generator:
        return rng_for(self.cfg.seed, "__genesis__")

    def alive(self, agent: str, h: int) -> bool:
        a = self.agents.get(agent)
        return a is not None and (a.fail_at is None or h < a.fail_at)

    def new_id(self, agent: str) -> str:
        self.tx_n += 1
        return f"{agent}:{self.tx_n}"

    def post(self, tx: Transaction, key: tuple | None = None) -> None:
        self.seq += 1
        self.mempool.append((self.seq, tx))
        if key:
            self.inflight.add(key)
            self._keys[tx.id] = key

    # -- agent behaviour ----------------------------------------------------

    def act(self, h: int) -> None:
        st = self.state
        p = self.p
        self._buy_tickets(h)
        self._publish_tasks(h)
        for ref in list(st.open_refs):
            comp, bid = st.competitions[ref], st.book.bids[ref]
            if comp.status != "open":
                continue
            if bid.status == "open" and not bid.expired(h):
                asked = {a.miner for a in st.book.asks.get(ref, [])}
                for m in self.storage_ids:
                    key = ("ask", ref, m)
                    if m not in asked and self.alive(m, h) and key not in self.inflight:
                        self.post(Transaction(self.new_id(m), TxKind.ASK, {"bid_id": ref}, 0, m), key)
                asks = [a for a in st.book.asks.get(ref, []) if a.status == "open" and h < a.lock_until]
                key = ("deal", ref)
                if len({a.miner for a in asks}) >= p.r_s and key not in self.inflight:
                    self.post(Transaction(self.new_id(bid.client), TxKind.DEAL,
                                          {"bid_id": ref, "asks": [a.ask_id for a in asks]}, 0, bid.client), key)
            elif ref in st.dtmns and comp.stored_height is None:
                self._store(ref, h)
            elif comp.stored_height is not None:
                self._compete(ref, comp, h)
        self._claims(h)
        self._payments(h)

    def _buy_tickets(self, h: int) -> None:
        st, p = self.state, self.p
        pool = st.tickets
        maturing = sum(1 for i in pool.immature if pool.tickets[i].purchase_height + p.ticket_maturity <= h)
        price = max(1, p.ticket_base_price * (len(pool.live) + maturing) // p.pool_target)
        total_share = sum(self.agents[i].stake_share for i in self.pos_ids)
        lam = p.votes_per_block / 0.95 * (p.ticket_base_price / price) ** TICKET_ELASTICITY
        lam = min(lam, 4 * p.ticket_quota)
        for aid in self.pos_ids:
            a = self.agents[aid]
            n = int(self.rng[aid].poisson(lam * a.stake_share / total_share))
            for _ in range(n):
                self.post(Transaction(self.new_id(aid), TxKind.TICKET_PURCHASE, {"y": price, "x": 0}, a.fee_tr, aid))
        for aid, a in self.agents.items():
            v = st.vstakes.get(aid, 0)
            if a.reinvest_vstakes and v > 0 and ("vticket", aid) not in self.inflight:
                x = min(v, price)
                if st.balances.get(aid, 0) >= price - x + a.fee_tr:
                    self.post(Transaction(self.new_id(aid), TxKind.TICKET_PURCHASE, {"y": price, "x": x},
                                          a.fee_tr, aid), ("vticket", aid))

    def _publish_tasks(self, h: int) -> None:
        ts = self.cfg.task_stream
        publishers = []
        if self.client_id and ts.rate > 0:
            publishers.append((self.client_id, ts.rate, False))
        publishers += [(a.id, a.task_rate, True) for a in self.cfg.agents
                       if a.kind == "O1Adversary" and a.task_rate > 0]
        for aid, rate, adversarial in publishers:
            rng = self.rng[aid]
            if rng.random() >= rate:
                continue
            if ts.max_tasks is not None and self.published >= ts.max_tasks:
                return
            kind = ts.kinds[int(rng.integers(len(ts.kinds)))]
            task = random_task(kind, rng, ts.size)
            pf = cp.default_pf_schedule(self.p, ts.fee_solve, ts.pf_delay)
            payload = cp.PublishPayload(task.slim(), ts.fee_sub, ts.fee_solve, pf, aid)
            if self.state.balances.get(aid, 0) < ts.fee_sub + ts.fee_solve + ts.fee_tr:
                continue
            tx = Transaction(self.new_id(aid), TxKind.PUBLISH, payload, ts.fee_tr, aid)
            self.tasks[tx.id] = task
            self.task_kind[tx.id] = kind
            self.optima[tx.id] = brute_force_optimum(task)
            if adversarial:
                self.adversarial[tx.id] = aid
            self.published += 1
            self.post(tx)

    def _store(self, ref: str, h: int) -> None:
        """Replicate the data to the dTMN, then post Stored once every
        ledger-live member holds it."""
        st = self.state
        d = st.dtmns[ref]
        key = ("stored", ref)
        if key in self.inflight or d.status == "failed":
            return
        live = d.live_members()
        if not all(self.alive(m, h) for m in live) or len(live) < self.p.r_s:
            return
        trial = copy.deepcopy(d)
        try:
            chunk_exchange(trial, self.tasks[ref].data or b"\x00", self.cfg.n_chunks)
        except DtmnFailed:
            return
        comp = st.competitions[ref]
        payload = cp.StoredPayload(ref, comp.publish.slim_task, comp.publish.client, tuple(sorted(live)))
        self.post(Transaction(self.new_id(comp.publish.client), TxKind.STORED, payload, 0, comp.publish.client), key)

    def _candidates(self, agent: AgentStrategy, ref: str) -> list[list[int]]:
        task = self.tasks[ref]
        rng = self.rng[agent.id]
        best, _ = self.optima[ref]
        if agent.kind == "HonestSolver" or (agent.kind == "Colluder" and agent.defect) \
                or self.adversarial.get(ref) == agent.id:
            return [miner_solve(task)]
        if agent.kind == "Colluder":
            return [random_candidate(task, rng)]
        out = []
        for _ in range(agent.spam_rate):
            for _ in range(10):
                c = random_candidate(task, rng)
                if score_solution(task, encode_candidate(c)) != best:
                    break
            out.append(c)
        return out

    def _compete(self, ref: str, comp: cp.CompetitionState, h: int) -> None:
        if comp.status != "open":
            return
        phase = cp.phase_of(comp, h)
        _, f, v, s = comp.boundaries()
        if phase in (cp.Phase.FREEZE, cp.Phase.COMPETE):
            for aid, a in self.agents.items():
                solver = a.kind in SOLVER_KINDS or self.adversarial.get(ref) == aid
                if not solver or (aid, ref) in self.plans:
                    continue
                rng = self.rng[aid]
                delay = 0 if self.adversarial.get(ref) == aid else int(rng.geometric(max(a.solve_rate, 1e-9))) - 1
                source = comp.dtmn_members[int(rng.integers(len(comp.dtmn_members)))]
                self.plans[(aid, ref)] = _Plan(aid, ref, comp.stored_height + delay, self._candidates(a, ref), source)
                if self.adversarial.get(ref) != aid:
                    self._open_channel(aid, source, ref)
        if phase is cp.Phase.COMPETE:
            for (aid, r), plan in self.plans.items():
                if r != ref or plan.sent or h < plan.ready_at:
                    continue
                plan.sent = True
                self._submit_solves(self.agents[aid], plan, comp, h)
        elif phase is cp.Phase.VALIDATE and comp.validate_record is None:
            self._validate(ref, comp, h)
        elif phase is cp.Phase.SEAL and comp.validate_record is not None:
            self._seal(ref, comp, h)

    def _open_channel(self, aid: str, source: str, ref: str) -> None:
        deposit = self.cfg.n_chunks * self.cfg.chunk_price
        if self.state.balances.get(aid, 0) < deposit + self.agents[aid].fee_tr:
            return
        cid = f"ch:{aid}:{ref}"
        self.post(Transaction(self.new_id(aid), TxKind.CHANNEL_OPEN,
                              {"channel_id": cid, "party_b": source, "deposit": deposit},
                              self.agents[aid].fee_tr, aid), ("open", cid))
        ch = MicropaymentChannel(cid, aid, source, deposit)
        for _ in range(self.cfg.n_chunks):  # one signed update per chunk served
            channel_update(ch, signed_update(ch, self.cfg.chunk_price))
        self.offchain[cid] = ch
        self.channel_ref[cid] = ref

    def _submit_solves(self, a: AgentStrategy, plan: _Plan, comp: cp.CompetitionState, h: int) -> None:
        task = self.tasks[plan.ref]
        rng = self.rng[a.id]
        for cand in plan.candidates:
            sol = encode_candidate(cand)
            score = score_solution(task, sol)
            if score is None:
                continue
            if a.commit == "shard" and len(sol) >= 2:
                shards = cp.shard_split(sol, min(12, len(sol)), 2, list(comp.dtmn_members), rng)
                commitment, reveal = shards.commitment(), shards
            else:
                nonce = rng.bytes(16)
                commitment, reveal = cp.Commitment("hash", hash_commit(sol, nonce)), cp.HashReveal(sol, nonce)
            payload = cp.SolvePayload(a.id, commitment, score, plan.ref, plan.source)
            tx = Transaction(self.new_id(a.id), TxKind.SOLVE, payload, a.fee_tr, a.id)
            self.reveals[plan.ref][tx.id] = reveal
            self.post(tx)

    def _member_key(self, member: str, ref: str) -> bytes:
        return cp.vote_key(digest(f"{self.cfg.seed}:{member}".encode()), ref)

    def _voting_members(self, ref: str, h: int) -> list[str]:
        d = self.state.dtmns[ref]
        return [m for m in d.live_members() if self.alive(m, h)]

    def _validate(self, ref: str, comp: cp.CompetitionState, h: int) -> None:
        key = ("validate", ref)
        members = self._voting_members(ref, h)
        if key in self.inflight or not members or self.state.dtmns[ref].status == "failed":
            return
        keys = {m: self._member_key(m, ref) for m in members}
        behaviour = {}
        for m in members:
            if self.agents[m].dishonest:
                rng = self.rng[m]
                ids = [x.solve_id for x in comp.admitted_solves]
                behaviour[m] = lambda lst, rng=rng, ids=ids: [i for i in ids if rng.random() < 0.5]
                self.state.dtmns[ref].flag(h, m, "dishonest vote list")
        vp = cp.validate_solutions(comp, members, self.reveals.get(ref, {}), self.tasks[ref], keys,
                                   behaviour=behaviour)
        self.post(Transaction(self.new_id(members[0]), TxKind.VALIDATE, vp, 0, members[0]), key)

    def _seal(self, ref: str, comp: cp.CompetitionState, h: int) -> None:
        key = ("seal", ref)
        members = self._voting_members(ref, h)
        if key in self.inflight or not members:
            return
        keys = {m: self._member_key(m, ref) for m in members}
        try:
            sp = cp.seal_competition(comp, keys, self.p.dtmn_quorum)
        except cp.NoConsensus as e:
            if e.reason != "no_valid_solves":
                return  # the competition will time out
            sp = cp.SealPayload(ref, keys)
        self.post(Transaction(self.new_id(members[0]), TxKind.SEAL, sp, 0, members[0]), key)

    def _claims(self, h: int) -> None:
        st = self.state
        for cid, ch in list(self.offchain.items()):
            onchain = st.channels.get(cid)
            if onchain is not None and onchain.status != "open":
                del self.offchain[cid]
                continue
            if onchain is None or ("claim", cid) in self.inflight:
                continue
            comp = st.competitions[self.channel_ref[cid]]
            if comp.status == "open":
                continue
            claimer = ch.party_b if self.alive(ch.party_b, h) else ch.party_a
            claim = claim_channel(copy.deepcopy(ch), self.channel_ref[cid])
            self.post(Transaction(self.new_id(claimer), TxKind.MICROPAYMENT_CLAIM, claim, 0, claimer),
                      ("claim", cid))

    def _payments(self, h: int) -> None:
        ids = sorted(self.agents)
        for aid, a in self.agents.items():
            if a.tx_rate <= 0:
                continue
            rng = self.rng[aid]
            for _ in range(int(rng.poisson(a.tx_rate))):
                to = ids[int(rng.integers(len(ids)))]
                amount = int(rng.integers(1, 1000))
                fee = int(a.fee_tr * rng.uniform(0.5, 1.5))
                self.post(Transaction(self.new_id(aid), TxKind.PAYMENT, {"to": to, "amount": amount}, fee, aid))

    # -- block assembly -----------------------------------------------------

    def _order(self, strategy: str) -> list[tuple[int, Transaction]]:
        first = [e for e in self.mempool if e[1].kind in STORAGE_CLASS]
        rest = [e for e in self.mempool if e[1].kind not in STORAGE_CLASS]
        if strategy == "no_solves":
            rest = [e for e in rest if e[1].kind is not TxKind.SOLVE]
        if strategy != "all_solves":
            return first + sorted(rest, key=lambda e: (-e[1].fee_tr, e[0]))
        # improving solves first, best declared score first, then by fee
        solves = [e for e in rest if e[1].kind is TxKind.SOLVE]
        others = [e for e in rest if e[1].kind is not TxKind.SOLVE]
        improving, tail = [], []
        by_comp = defaultdict(list)
        for e in solves:
            by_comp[e[1].payload.publish_ref].append(e)
        for ref, es in by_comp.items():
            comp = self.state.competitions.get(ref)
            ttype = comp.task_type if comp else "maximize"
            best = comp.best_declared() if comp else None
            es.sort(key=lambda e: (-e[1].payload.declared_score if ttype == "maximize"
                                   else e[1].payload.declared_score, -e[1].fee_tr, e[0]))
            for e in es:
                if better(ttype, e[1].payload.declared_score, best):
                    improving.append(e)
                    best = e[1].payload.declared_score
                else:
                    tail.append(e)
        return first + improving + sorted(others + tail, key=lambda e: (-e[1].fee_tr, e[0]))

    def _votes(self, h: int) -> list[Vote]:
        st = self.state
        selected = st.expected_voters()
        if selected is None:
            return []
        while True:
            votes = []
            for t in selected:
                a = self.agents.get(t.owner)
                if a is not None and a.miss_prob > 0 and self.rng[t.owner].random() < a.miss_prob:
                    continue
                votes.append(Vote.cast(t.id, t.owner, st.tip_digest))
            if len(votes) >= self.p.vote_majority:
                return votes
            # the network waits for the absent voters to come back
            self.stats["vote_stalls"] += 1
            self.timestamp += self.p.target_interval

    def step(self, h: int) -> Block:
        st, p = self.state, self.p
        self.act(h)
        signer = self.hash_ids[int(self.net.choice(len(self.hash_ids), p=self.hash_w))]
        votes = self._votes(h)
        pings = tuple(m for m in self.storage_ids if self.alive(m, h))
        st.begin_block(h, signer, votes, pings)
        included = [coinbase_tx(h, signer, p.coinbase)]
        st.apply_tx(included[0])
        keep = []
        used = set()
        for seq, tx in self._order(self.agents[signer].assembly):
            if len(included) > p.max_block_txs:
                break
            used.add(seq)
            try:
                st.apply_tx(tx)
            except IllegalTx as e:
                self.rejections[e.reason] += 1
                self._release(tx)
                continue
            included.append(tx)
            self._release(tx)
        for seq, tx in self.mempool:
            if seq not in used:
                keep.append((seq, tx))
        # solves whose window closed and stale tickets never become legal
        self.mempool = [e for e in keep if not self._stale(e[1], h)]
        attempts = int(self.net.geometric(min(1.0, st.next_target / MAX_TARGET)))
        self.timestamp += max(1, attempts * p.target_interval * p.pow_target // MAX_TARGET)
        block = Block(h, st.tip_digest, signer, st.next_target, self.timestamp, tuple(votes),
                      tuple(included), pings)
        block, _ = mine_block(block)
        st.finish_block(block.digest, block.timestamp)
        self.tree.add(block)
        self.blocks.append(block)
        self.stats[f"signed:{signer}"] += 1
        for tx in included:
            self.stats[f"tx:{tx.kind.value}"] += 1
        return block

    def _release(self, tx: Transaction) -> None:
        key = self._keys.pop(tx.id, None)
        if key:
            self.inflight.discard(key)

    def _stale(self, tx: Transaction, h: int) -> bool:
        if tx.kind is TxKind.TICKET_PURCHASE:
            self._release(tx)
            return True  # re-priced next block
        if tx.kind is TxKind.SOLVE:
            comp = self.state.competitions.get(tx.payload.publish_ref)
            if comp is None or comp.status != "open" or cp.phase_of(comp, h + 1) is not cp.Phase.COMPETE:
                return True
        return False

    def check(self, full: bool = True) -> None:
        bad = self.state.check_invariants(full)
        if bad:
            self.breaches.extend(f"h={self.state.height}: {b}" for b in bad)

    def run(self) -> "Metrics":
        cfg = self.cfg
        for h in range(1, cfg.horizon + 1):
            self.step(h)
            self.pool_sizes.append(len(self.state.tickets.live))
            window_end = h % self.p.B_distr == 0
            if cfg.check_invariants == "block" or (cfg.check_invariants == "window" and window_end):
                self.check(full=window_end)
        self.check()
        tip = fork_choice(self.tree)
        if tip != self.blocks[-1].digest:
            self.breaches.append("fork choice left the simulated chain")
        return self.metrics()

    # -- metrics ------------------------------------------------------------

    def metrics(self) -> Metrics:
        st = self.state
        income: dict[str, Counter] = defaultdict(Counter)
        for _, acct, kind, amt in st.journal:
            income[acct][kind] += amt
        vinc: dict[str, Counter] = defaultdict(Counter)
        for _, acct, kind, amt in st.vjournal:
            vinc[acct][kind] += amt
        comps = []
        won = Counter()
        for ref, c in st.competitions.items():
            scores = {a.solve_id: a.payload.declared_score for a in c.admitted_solves}
            win_score = scores.get(c.seal_record.winning_solves[0]) if c.seal_record and c.seal_record.winning_solves else None
            comps.append({"publish_ref": ref, "client": c.publish.client, "kind": self.task_kind.get(ref),
                          "status": c.status, "failure": c.failure, "stored_height": c.stored_height,
                          "n_solves": len(c.admitted_solves), "winners": list(c.winners),
                          "winning_score": win_score, "optimum": self.optima.get(ref, (None,))[0],
                          "adversary": self.adversarial.get(ref),
                          "solvers": sorted({a.payload.miner for a in c.admitted_solves}),
                          "solves_by": dict(sorted(Counter(a.payload.miner for a in c.admitted_solves).items())),
                          "best_declared": c.best_declared()})
            for w in c.winners:
                won[w] += 1
        flows = Counter()
        for rec in st.pools.history:
            flows[rec.pool] += rec.amount
        ps = np.array(self.pool_sizes) if self.pool_sizes else np.zeros(1)
        signed = {k.split(":", 1)[1]: v for k, v in self.stats.items() if k.startswith("signed:")}
        txc = {k.split(":", 1)[1]: v for k, v in self.stats.items() if k.startswith("tx:")}
        chain_fp = digest(b"".join(b.digest for b in self.blocks)).hex()
        return Metrics(
            name=self.cfg.name, seed=self.cfg.seed, horizon=self.cfg.horizon,
            config_digest=self.cfg.digest(),
            initial_balances=dict(self.genesis.balances), final_balances=dict(st.balances),
            income={a: dict(c) for a, c in income.items()}, vstake_income={a: dict(c) for a, c in vinc.items()},
            blocks_signed=signed, competitions=comps, competitions_won=dict(won), pool_flows=dict(flows),
            ticket_stats={"final_pool": len(st.tickets.live), "mean_pool": float(ps.mean()),
                          "min_pool": int(ps.min()), "max_pool": int(ps.max()),
                          "purchases": txc.get("TicketPurchase", 0)},
            tx_counts=txc, rejections=dict(self.rejections), fork_events=0,
            vote_stalls=self.stats["vote_stalls"],
            dtmn_flags=sum(len(d.flags) for d in st.dtmns.values()),
            invariant_breaches=list(self.breaches), attack_flags=list(self.flags),
            chain_fingerprint=chain_fp, state_fingerprint=st.fingerprint().hex())


def run_scenario(config: SimConfig, strict: bool = False) -> Metrics:
    """Run ``config`` to its horizon.  With ``strict`` an invariant breach
    raises :class:`InvariantBreach` instead of being reported."""
    sim = Simulation(config)
    m = sim.run()
    if strict and m.invariant_breaches:
        raise InvariantBreach("; ".join(m.invariant_breaches[:5]))
    return m


def simulate(config: SimConfig) -> tuple[Metrics, Simulation]:
    sim = Simulation(config)
    return sim.run(), sim
