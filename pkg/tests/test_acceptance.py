"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
under output capture) and then asserts.  Criterion 4 runs the full
1000 x 5000-block conservation suite and takes the better part of an hour
on one core.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from poaw import competition as cp
from poaw.chain import Transaction, TxKind, validate_block
from poaw.crypto import hash_commit
from poaw.econ import default_grid, frontier_table, verify_pos_dominance
from poaw.params import ATOMS_PER_COIN, PRESETS, ProtocolParams
from poaw.pools import main_chain_weight_allocation
from poaw.sim import attacks
from poaw.sim.attacks import o1_payoff_mc
from poaw.sim.experiments import conservation_suite, dtmn_threshold_run, zero_task_check
from poaw.sim.market import lottery_uniformity, pos_payoff_mc
from poaw.tasks import encode_candidate, random_task

from conftest import STORAGE, ChainBuilder, small_params
from test_competition import random_competition, run_pipeline
from test_pools import hand_allocation

SCALED = PRESETS["scaled"]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return emit


def test_criterion_01_theorem(report):
    t = time.perf_counter()
    pos = verify_pos_dominance(r=1.1, P_vstake=0.25, p_pools=0.15)
    alt = verify_pos_dominance(r=1.1, P_vstake=0.15, p_pools=0.10)
    dt = time.perf_counter() - t
    ok = (abs(pos.pos_factor - Fraction("1.095")) <= 1e-9 and abs(pos.o1_factor - Fraction("1.0625")) <= 1e-9
          and abs(alt.o1_factor - Fraction("1.035")) <= 1e-9 and dt < 1)
    report(1, ok, f"PoS {float(pos.pos_factor)}, O(1) {float(pos.o1_factor)} / {float(alt.o1_factor)}, {dt:.3f}s")


def test_criterion_02_frontier(report):
    t = time.perf_counter()
    rows = frontier_table([1.06, 1.08, 1.10, 1.12], 0.01, default_grid())
    dt = time.perf_counter() - t
    worst = max(abs((1 + r["P_vstake"]) * (1 - r["p_pools"]) - (0.95 * r["r"] + 0.05 - 0.01)) for r in rows)
    report(2, worst <= 1e-12 and dt < 1 and len(rows) > 0, f"{len(rows)} points, max residual {worst:.1e}, {dt:.3f}s")


def test_criterion_03_monte_carlo(report):
    assert SCALED.pool_target == 1024 and SCALED.ticket_maturity == 8
    t = time.perf_counter()
    o1 = o1_payoff_mc(SCALED, 100_000, seed=0)
    pos = pos_payoff_mc(SCALED, 100_000, seed=0)
    dt = time.perf_counter() - t
    pos_err = abs(pos.mean_payoff - 1.095) / 1.095
    ok = o1["cycles"] >= 100_000 and pos.resolved >= 100_000 and o1["rel_error"] <= 0.005 and pos_err <= 0.005
    report(3, ok and dt < 300, f"O(1) {o1['mean_factor']:.5f} vs {o1['analytic']}, PoS {pos.mean_payoff:.5f} vs 1.095 "
                               f"over {pos.resolved} tickets, {dt:.0f}s")


def test_criterion_04_conservation(report):
    results = conservation_suite(1000, 5000)
    dirty = [r.seed for r in results if not r.clean]
    sealed = sum(r.sealed for r in results)
    failed = sum(r.failed for r in results)
    claims = sum(r.claims for r in results)
    report(4, len(results) == 1000 and not dirty and sealed > 0 and failed > 0 and claims > 0,
           f"{len(results)} runs, {sealed} sealed, {failed} failed, {claims} channel claims, violations in {dirty[:10]}")


def _freeze_trial(rng):
    """Open one competition on a real chain and offer Solve transactions at
    every height in shuffled order, including inside the Stored block.
    Returns (solves admitted outside compete, solves admitted, blocks rejected)."""
    nbf, nbc = int(rng.integers(0, 6)), int(rng.integers(1, 6))
    b = ChainBuilder(small_params(NB_freeze=nbf, NB_compete=nbc, NB_validate=2))
    task = random_task("knapsack", rng, 6)
    fee = 10 * ATOMS_PER_COIN
    ref = b.tx_id("publish")
    pub = cp.PublishPayload(task.slim(), ATOMS_PER_COIN, fee, cp.default_pf_schedule(b.params, fee), "client")
    b.step([Transaction(ref, TxKind.PUBLISH, pub, 0, "client")])
    members = STORAGE[:5]
    asks = [Transaction(b.tx_id("ask"), TxKind.ASK, {"bid_id": ref}, 0, m) for m in members]
    b.step(asks)
    b.step([Transaction(b.tx_id("deal"), TxKind.DEAL, {"bid_id": ref, "asks": [a.id for a in asks]}, 0, "client")])
    stored = Transaction(b.tx_id("stored"), TxKind.STORED, cp.StoredPayload(ref, task.slim(), "client", members),
                         0, "client")
    rejected = 0
    for k in range(nbf + nbc + 3):
        base = [stored] if k == 0 else []
        solves = []
        for _ in range(int(rng.integers(1, 4))):
            sol = encode_candidate([int(rng.integers(6))])
            payload = cp.SolvePayload("solver", cp.Commitment("hash", hash_commit(sol, rng.bytes(16))), 1, ref, "sm0")
            solves.append(Transaction(b.tx_id("solve"), TxKind.SOLVE, payload, 0, "solver"))
        txs = base + solves
        block = b.block([txs[int(i)] for i in rng.permutation(len(txs))])
        verdict, _ = validate_block(b.state, block)
        if not verdict:
            rejected += 1
            block = b.block(base)
        b.extend(block)
    comp = b.state.competitions[ref]
    bad = [a.height for a in comp.admitted_solves if cp.phase_of(comp, a.height) is not cp.Phase.COMPETE]
    return bad, len(comp.admitted_solves), rejected


def test_criterion_05_freeze_and_phases(report):
    rng = np.random.default_rng(55)
    bad, admitted, rejected = [], 0, 0
    for _ in range(150):
        b_, a_, r_ = _freeze_trial(rng)
        bad += b_
        admitted += a_
        rejected += r_
    # phase_of against an interval table on 10^6 random points
    n = 1_000_000
    stored = rng.integers(0, 10**6, n)
    nbf, nbc, nbv = rng.integers(0, 30, n), rng.integers(1, 30, n), rng.integers(1, 30, n)
    h = stored + rng.integers(-40, 120, n)
    f, c = stored + nbf, stored + nbf + nbc
    v = c + nbv
    want = np.select([h < stored, h < f, h < c, h < v], ["store", "freeze", "compete", "validate"], "seal")
    pub = cp.PublishPayload(random_task("knapsack", rng, 4).slim(), 1, 1, {}, "c")
    mismatches = 0
    for k in range(n):
        comp = cp.CompetitionState("x", pub, int(nbf[k]), int(nbc[k]), int(nbv[k]), int(stored[k]))
        mismatches += cp.phase_of(comp, int(h[k])).value != want[k]
    report(5, not bad and mismatches == 0 and admitted > 0 and rejected > 0,
           f"{admitted} admitted solves, {len(bad)} inside a freeze window, {rejected} blocks rejected; "
           f"{mismatches} phase mismatches on {n} points")


def test_criterion_06_winner_oracle(report):
    rng = np.random.default_rng(66)
    checked = mismatches = 0
    for _ in range(1000):
        comp, task, revealed, entries, opt = random_competition(rng, max_size=20)
        valid = [e for e in entries if e[4]]
        if not valid:
            try:
                run_pipeline(comp, task, revealed)
                mismatches += 1
            except cp.NoConsensus:
                pass
            checked += 1
            continue
        best = max(e[3] for e in valid)
        first = min(e[1] for e in valid if e[3] == best)
        want = tuple(e[0] for e in sorted(valid, key=lambda e: e[2]) if e[3] == best and e[1] == first)
        mismatches += run_pipeline(comp, task, revealed).winning_solves != want or best > opt
        checked += 1
    report(6, checked == 1000 and mismatches == 0, f"{checked} competitions, {mismatches} mismatches")


def test_criterion_07_allocation_oracle(report):
    rng = np.random.default_rng(77)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        window = [[int(x) for x in rng.integers(0, 10**12, size=int(rng.poisson(0.6)))] for _ in range(n)]
        carry = int(rng.integers(0, 10**9))
        got = main_chain_weight_allocation(window, carry=carry)
        bad += got != hand_allocation(window, carry)
        if any(window):
            bad += sum(got) != carry + sum(map(sum, window))
    report(7, bad == 0, f"1000 windows, {bad} mismatches")


def test_criterion_08_ticket_statistics(report):
    lot = lottery_uniformity(SCALED, draws=100_000, seed=8)
    market = pos_payoff_mc(SCALED, 100_000, seed=8)
    ok = (lot.p_value > 0.01 and lot.draws >= 100_000 and abs(market.miss_rate - 0.05) <= 0.01
          and market.pool_within(SCALED.pool_target, 0.05))
    report(8, ok, f"chi-square p={lot.p_value:.3f}, miss rate {market.miss_rate:.4f}, "
                  f"pool {market.pool_sizes[market.burn_in:].min()}..{market.pool_sizes[market.burn_in:].max()}")


def test_criterion_09_attacks(report):
    p = ProtocolParams()
    low = attacks.fork_attack(p, 0.6, 0.1, trials=1000, seed=9).metrics["success_rate"]
    high = attacks.fork_attack(p, 0.6, 0.6, trials=1000, seed=9).metrics["success_rate"]
    withhold = [attacks.withhold_attack(p, a, 20_000, runs=5, seed=9, stake_share=s)
                for a, s in ((0.3, 0.0), (0.4, 0.0), (0.4, 0.2))]
    ssa = [attacks.ssa_attack(seed, 256, honest) for seed in range(3) for honest in (1, 2)]
    coll = [attacks.collusion_attack(seed, 256, colluders=4, honest=1) for seed in range(3)]
    sealed = sum(r.metrics["sealed"] for r in coll)
    honest_won = sum(r.metrics["honest_among_winners"] for r in coll)
    ok = (low < 0.01 and high > 0.5 and all(w.passed for w in withhold)
          and all(r.metrics["ssa_net_income"] < 0 for r in ssa) and sealed > 0 and honest_won == sealed)
    gains = ", ".join("{:+.3f}/{:+.3f}".format(w.metrics["control_gain"], w.metrics["pos_gain"]) for w in withhold)
    detail = (f"fork {low:.3f}/{high:.3f}; withholding gain control/PoS {gains}; SSA net "
              f"{max(r.metrics['ssa_net_income'] for r in ssa)} at best; collusion {honest_won}/{sealed}")
    report(9, ok, detail)


def test_criterion_10_dtmn_threshold(report):
    results = [dtmn_threshold_run(seed, 400) for seed in range(100)]
    mismatches = [m for r in results for m in r.mismatches]
    leaked = [x for r in results for x in r.leaked]
    aborted = sum(r.aborted for r in results)
    checked = sum(r.checked for r in results)
    report(10, not mismatches and not leaked and aborted > 0 and checked > aborted,
           f"{checked} competitions, {aborted} aborted, {len(mismatches)} mismatches, {len(leaked)} leaks")


def test_criterion_11_zero_tasks(report):
    rep = zero_task_check(seed=11, horizon=512)
    ok = (rep["competition_txs"] == 0 and rep["competitions"] == 0 and rep["every_block_voted"]
          and rep["pool_total"] == 0 and rep["vstakes_minted"] == 0 and not rep["invariant_breaches"]
          and rep["reconciles"])
    report(11, ok, f"{rep['blocks']} blocks, tx kinds {sorted(rep['tx_kinds'])}")
