import numpy as np
import pytest

from poaw import competition as cp
from poaw.chain import Block, GenesisConfig, LedgerState, Transaction, TxKind, Vote, coinbase_tx, mine_block
from poaw.params import ATOMS_PER_COIN, ProtocolParams
from poaw.tasks import Knapsack

STORAGE = tuple(f"sm{i}" for i in range(7))


def small_params(**kw):
    base = dict(pool_target=64, ticket_expiry=200, ticket_maturity=2, settlement_delay=2, B_distr=8)
    base.update(kw)
    return ProtocolParams(**base)


def make_genesis(n_tickets=32, owners=("alice", "bob"), balance=1000 * ATOMS_PER_COIN):
    tickets = tuple((owners[i % len(owners)], ATOMS_PER_COIN, -i) for i in range(n_tickets))
    accounts = {o: balance for o in owners} | {"miner": 0, "client": balance, "solver": balance}
    accounts |= {m: 10 * ATOMS_PER_COIN for m in STORAGE}
    return GenesisConfig(accounts, tickets)


class ChainBuilder:
    """Builds valid blocks on top of a ledger state, one at a time.  Every
    storage miner pings unless ``pings`` says otherwise."""

    def __init__(self, params=None, genesis=None):
        self.params = params or small_params()
        self.genesis = genesis or make_genesis()
        self.state = LedgerState(self.params, self.genesis)
        self.blocks = []
        self.ts = 0
        self.n = 0

    def block(self, txs=(), n_votes=None, signer="miner", pings=STORAGE, approve=True):
        st = self.state
        voters = st.expected_voters() or []
        n = len(voters) if n_votes is None else n_votes
        votes = tuple(Vote.cast(t.id, t.owner, st.tip_digest, approve) for t in voters[:n])
        h = st.height + 1
        self.ts += self.params.target_interval
        body = (coinbase_tx(h, signer, self.params.coinbase),) + tuple(txs)
        b = Block(h, st.tip_digest, signer, st.next_target, self.ts, votes, body, tuple(pings))
        return mine_block(b)[0]

    def extend(self, block):
        self.state.apply_block(block)
        self.blocks.append(block)
        return block

    def step(self, txs=(), **kw):
        return self.extend(self.block(txs, **kw))

    def tx_id(self, tag):
        self.n += 1
        return f"{tag}:{self.n}"

    def open_competition(self, task=None, members=STORAGE[:5], fee_solve=10 * ATOMS_PER_COIN):
        """Publish, ask, deal and store a knapsack task; returns (ref, task)."""
        p = self.params
        task = task or Knapsack.make_task([(10, 5), (6, 4), (6, 4), (3, 1)], 8)
        pub = cp.PublishPayload(task.slim(), ATOMS_PER_COIN, fee_solve,
                                cp.default_pf_schedule(p, fee_solve), "client")
        ref = self.tx_id("publish")
        self.step([Transaction(ref, TxKind.PUBLISH, pub, 0, "client")])
        asks = [Transaction(self.tx_id("ask"), TxKind.ASK, {"bid_id": ref}, 0, m) for m in members]
        self.step(asks)
        self.step([Transaction(self.tx_id("deal"), TxKind.DEAL,
                               {"bid_id": ref, "asks": [a.id for a in asks]}, 0, "client")])
        stored = cp.StoredPayload(ref, task.slim(), "client", tuple(sorted(members)))
        self.step([Transaction(self.tx_id("stored"), TxKind.STORED, stored, 0, "client")])
        return ref, task


def payment(tx_id, sender, to, amount, fee=0):
    return Transaction(tx_id, TxKind.PAYMENT, {"to": to, "amount": amount}, fee, sender)


@pytest.fixture
def builder():
    return ChainBuilder()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
