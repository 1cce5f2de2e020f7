import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poaw import competition as cp
from poaw.crypto import hash_commit
from poaw.params import ProtocolParams
from poaw.tasks import Clique, Knapsack, brute_force_optimum, encode_candidate, random_candidate, random_task

MEMBERS = [f"sm{i}" for i in range(5)]
KEYS = {m: cp.vote_key(m.encode() * 4, "pub") for m in MEMBERS}


def make_comp(task=None, stored=100, nbf=4, nbc=10, nbv=3, fee_solve=1000):
    task = task or Knapsack.make_task([(10, 5), (6, 4), (6, 4)], 8)
    pub = cp.PublishPayload(task.slim(), 10, fee_solve, cp.default_pf_schedule(ProtocolParams(), fee_solve), "c")
    return cp.CompetitionState("pub", pub, nbf, nbc, nbv, stored, tuple(MEMBERS)), task


def solve_for(task, chosen, miner="m", nonce=b"n" * 16, declared=None):
    sol = encode_candidate(chosen)
    score = Knapsack.score(task.instance, chosen) if declared is None else declared
    payload = cp.SolvePayload(miner, cp.Commitment("hash", hash_commit(sol, nonce)), score, "pub", "sm0")
    return payload, cp.HashReveal(sol, nonce)


def run_pipeline(comp, task, revealed, behaviour=None, quorum=3):
    s, f, c, v = comp.boundaries()
    comp.validate_record = cp.validate_solutions(comp, MEMBERS, revealed, task, KEYS, c, behaviour)
    return cp.seal_competition(comp, KEYS, quorum)


# -- phases ---------------------------------------------------------------------

def test_phase_boundaries():
    comp, _ = make_comp()
    assert cp.phase_of(comp, 99) is cp.Phase.STORE
    assert cp.phase_of(comp, 100) is cp.Phase.FREEZE
    assert cp.phase_of(comp, 104) is cp.Phase.COMPETE
    assert cp.phase_of(comp, 114) is cp.Phase.VALIDATE
    assert cp.phase_of(comp, 117) is cp.Phase.SEAL


def test_unstored_competition_is_in_store_phase():
    comp, _ = make_comp(stored=None)
    assert cp.phase_of(comp, 10**6) is cp.Phase.STORE


@given(st.integers(0, 10**6), st.integers(0, 50), st.integers(1, 50), st.integers(1, 50), st.integers(0, 2 * 10**6))
def test_phase_matches_interval_table(stored, nbf, nbc, nbv, h):
    comp, _ = make_comp(stored=stored, nbf=nbf, nbc=nbc, nbv=nbv)
    table = [(stored, "freeze"), (stored + nbf, "compete"), (stored + nbf + nbc, "validate"),
             (stored + nbf + nbc + nbv, "seal")]
    want = "store"
    for start, name in table:
        if h >= start:
            want = name
    assert cp.phase_of(comp, h).value == want


# -- admission --------------------------------------------------------------------

def test_admit_around_freeze_end():
    comp, task = make_comp()
    payload, _ = solve_for(task, [1, 2])
    with pytest.raises(cp.SolveRejected) as e:
        cp.admit_solve(comp, payload, 103)
    assert e.value.reason == "frozen"
    cp.admit_solve(comp, payload, 104, "s1")
    with pytest.raises(cp.SolveRejected) as e:
        cp.admit_solve(comp, payload, 114)
    assert e.value.reason == "wrong_phase"
    assert [a.solve_id for a in comp.admitted_solves] == ["s1"]


@settings(max_examples=300)
@given(st.integers(0, 200))
def test_no_admission_inside_freeze(h):
    comp, task = make_comp()
    payload, _ = solve_for(task, [0])
    try:
        cp.admit_solve(comp, payload, h)
    except cp.SolveRejected as e:
        assert not 104 <= h < 114
        assert e.reason == ("frozen" if 100 <= h < 104 else "wrong_phase")
    else:
        assert 104 <= h < 114


def test_malformed_commitment_rejected():
    comp, _ = make_comp()
    bad = cp.SolvePayload("m", cp.Commitment("hash", b"short"), 3, "pub", "sm0")
    with pytest.raises(cp.SolveRejected) as e:
        cp.admit_solve(comp, bad, 105)
    assert e.value.reason == "malformed_commitment"
    nan = cp.SolvePayload("m", cp.Commitment("hash", b"x" * 32), float("nan"), "pub", "sm0")
    with pytest.raises(cp.SolveRejected):
        cp.admit_solve(comp, nan, 105)


def test_unknown_or_closed_competition():
    with pytest.raises(cp.SolveRejected) as e:
        cp.admit_solve(None, solve_for(make_comp()[1], [0])[0], 5)
    assert e.value.reason == "unknown_competition"


# -- shards -----------------------------------------------------------------------

def test_twelve_shards_over_seven_members():
    sol = bytes(range(60))
    members = [f"m{i}" for i in range(7)]
    ss = cp.shard_split(sol, 12, 2, members, np.random.default_rng(0))
    idx = [s.index for s in ss.shards]
    assert len(idx) == 12 and idx == sorted(set(idx)) and 1 <= idx[0] and idx[-1] <= 100_000
    assert all(len(v) <= 2 for v in ss.assignment.values())
    assert sorted(i for v in ss.assignment.values() for i in v) == idx
    assert cp.shard_assemble(ss) == sol


def test_single_shard_is_identity():
    ss = cp.shard_split(b"hello", 1, 1, ["a"], np.random.default_rng(1))
    assert ss.shards[0].payload == b"hello" and cp.shard_assemble(ss) == b"hello"


def test_shard_round_trip_many_strings():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        sol = rng.bytes(int(rng.integers(1, 80)))
        n = int(rng.integers(1, len(sol) + 1))
        ss = cp.shard_split(sol, n, 2, MEMBERS, rng)
        shuffled = [ss.shards[int(k)] for k in rng.permutation(n)]
        assert cp.shard_assemble(shuffled) == sol
        assert cp.open_commitment(ss.commitment(), shuffled) == sol


def test_shard_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(cp.ShardError) as e:
        cp.shard_split(b"", 1, 1, ["a"], rng)
    assert e.value.reason == "empty_solution"
    with pytest.raises(cp.ShardError) as e:
        cp.shard_split(b"abcdef", 5, 1, ["a"], rng, index_space=4)
    assert e.value.reason == "index_space_too_small"


def test_shard_subset_does_not_open():
    ss = cp.shard_split(b"0123456789", 4, 1, MEMBERS, np.random.default_rng(3))
    com = ss.commitment()
    assert com.well_formed()
    for k in range(4):
        subset = ss.shards[:k] + ss.shards[k + 1:]
        assert cp.open_commitment(com, subset) is None
    tampered = (cp.Shard(ss.shards[0].index, b"X"),) + ss.shards[1:]
    assert cp.open_commitment(com, tampered) is None


# -- commitments ------------------------------------------------------------------

def test_hash_commitment_binding_under_bit_flips():
    rng = np.random.default_rng(4)
    sol, nonce = encode_candidate([0, 3, 5, 7]), rng.bytes(16)
    com = cp.Commitment("hash", hash_commit(sol, nonce))
    assert cp.open_commitment(com, cp.HashReveal(sol, nonce)) == sol
    for _ in range(10_000):
        buf = bytearray(sol + nonce)
        bit = int(rng.integers(len(buf) * 8))
        buf[bit // 8] ^= 1 << (bit % 8)
        s2, n2 = bytes(buf[:len(sol)]), bytes(buf[len(sol):])
        assert cp.open_commitment(com, cp.HashReveal(s2, n2)) is None


def test_wrong_variant_does_not_open():
    com = cp.Commitment("hash", hash_commit(b"[1]", b"n"))
    assert cp.open_commitment(com, [cp.Shard(1, b"[1]")]) is None
    assert cp.open_commitment(cp.Commitment("other", b"x" * 32), None) is None


# -- validation and sealing -------------------------------------------------------

def test_irrelevant_solves_are_dropped():
    comp, task = make_comp()
    good, good_r = solve_for(task, [1, 2], "a")
    liar, liar_r = solve_for(task, [0], "b", declared=12)  # real score 10
    swap, swap_r = solve_for(task, [0], "c")
    for k, p in enumerate((good, liar, swap)):
        cp.admit_solve(comp, p, 105, f"s{k}", k)
    revealed = {"s0": good_r, "s1": liar_r, "s2": cp.HashReveal(encode_candidate([1]), b"n" * 16)}
    assert cp.member_vote_list(comp, task, revealed) == ["s0"]


def test_earlier_equal_score_wins_alone():
    task = Knapsack.make_task([(5, 1), (9, 1), (9, 1)], 1)
    comp, _ = make_comp(task)
    revealed = {}
    for k, (chosen, h) in enumerate([([0], 104), ([1], 105), ([2], 106)]):
        p, r = solve_for(task, chosen, f"m{k}", nonce=bytes([k]) * 16)
        cp.admit_solve(comp, p, h, f"s{k}", 0)
        revealed[f"s{k}"] = r
    seal = run_pipeline(comp, task, revealed)
    assert seal.winning_solves == ("s1",) and seal.winners == ("m1",)


def test_equal_scores_in_one_block_are_co_winners():
    task = Knapsack.make_task([(9, 1), (9, 1)], 1)
    comp, _ = make_comp(task)
    revealed = {}
    for k in range(2):
        p, r = solve_for(task, [k], f"m{k}", nonce=bytes([k]) * 16)
        cp.admit_solve(comp, p, 107, f"s{k}", k)
        revealed[f"s{k}"] = r
    seal = run_pipeline(comp, task, revealed)
    assert seal.winners == ("m0", "m1")
    pay = cp.seal_payouts(comp.publish, seal.winners, 0.25)
    assert pay.total_currency == comp.publish.fee_solve
    assert pay.pool_credits == {"main": 100, "storage": 50}
    assert pay.currency == {"m0": 425, "m1": 425} and pay.vstakes == {"m0": 106, "m1": 106}


def test_no_valid_solves_fails():
    comp, task = make_comp()
    p, r = solve_for(task, [0, 1, 2])  # over capacity, declared None
    p = cp.SolvePayload(p.miner, p.commitment, 22, "pub", "sm0")
    cp.admit_solve(comp, p, 105, "s0")
    with pytest.raises(cp.NoConsensus) as e:
        run_pipeline(comp, task, {"s0": r})
    assert e.value.reason == "no_valid_solves"


def test_seal_needs_quorum_of_keys():
    comp, task = make_comp()
    p, r = solve_for(task, [1, 2])
    cp.admit_solve(comp, p, 105, "s0")
    s, f, c, v = comp.boundaries()
    comp.validate_record = cp.validate_solutions(comp, MEMBERS, {"s0": r}, task, KEYS, c)
    few = {m: KEYS[m] for m in MEMBERS[:2]}
    with pytest.raises(cp.NoConsensus):
        cp.seal_competition(comp, few, 3)
    assert cp.seal_competition(comp, KEYS, 3).winning_solves == ("s0",)


def test_minority_of_lying_members_cannot_change_result():
    comp, task = make_comp()
    p, r = solve_for(task, [1, 2], "honest")
    q, rq = solve_for(task, [0], "friend", nonce=b"q" * 16)
    cp.admit_solve(comp, p, 105, "s0")
    cp.admit_solve(comp, q, 104, "s1")
    drop_best = {m: (lambda lst: [x for x in lst if x != "s0"]) for m in MEMBERS[:2]}
    seal = run_pipeline(comp, task, {"s0": r, "s1": rq}, drop_best)
    assert seal.winners == ("honest",)


def test_validate_only_in_validate_phase():
    comp, task = make_comp()
    with pytest.raises(cp.CompetitionError) as e:
        cp.validate_solutions(comp, MEMBERS, {}, task, KEYS, 105)
    assert e.value.reason == "not_in_validate_phase"
    other = Knapsack.make_task([(1, 1)], 1)
    with pytest.raises(cp.CompetitionError) as e:
        cp.validate_solutions(comp, MEMBERS, {}, other, KEYS)
    assert e.value.reason == "task_mismatch"


def _oracle_score(task, chosen):
    if task.scoring_fn == "knapsack":
        items = json.loads(task.data)["items"]
        if any(not 0 <= i < len(items) for i in chosen):
            return None
        if sum(items[i][1] for i in chosen) > task.constraints["capacity"]:
            return None
        return sum(items[i][0] for i in chosen)
    edges = {tuple(e) for e in json.loads(task.data)["edges"]}
    ok = all((min(a, b), max(a, b)) in edges for a in chosen for b in chosen if a != b)
    return len(chosen) if ok else None


def random_competition(rng, max_size=12):
    """Random task of 3..max_size items and random solves; entries are
    (solve id, height, position, declared, honest)."""
    kind = "knapsack" if rng.random() < 0.5 else "clique"
    task = random_task(kind, rng, size=int(rng.integers(3, max_size + 1)))
    comp, _ = make_comp(task)
    opt, opt_set = brute_force_optimum(task)
    revealed, entries, payloads = {}, [], {}
    for k in range(int(rng.integers(1, 9))):
        chosen = opt_set if rng.random() < 0.3 else random_candidate(task, rng)
        true = _oracle_score(task, chosen)
        declared = true if true is not None and rng.random() < 0.85 else (true or 0) + 1
        sid = f"s{k}"
        payloads[sid], revealed[sid] = solve_for(task, chosen, f"m{k}", rng.bytes(16), declared)
        entries.append((sid, 104 + int(rng.integers(0, 4)), k, declared, declared == true))
    for sid, h, pos, _, _ in sorted(entries, key=lambda e: (e[1], e[2])):
        cp.admit_solve(comp, payloads[sid], h, sid, pos)
    return comp, task, revealed, entries, opt


def test_winner_matches_brute_force_oracle():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        comp, task, revealed, entries, opt = random_competition(rng)
        valid = [e for e in entries if e[4]]
        if not valid:
            with pytest.raises(cp.NoConsensus):
                run_pipeline(comp, task, revealed)
            continue
        best = max(e[3] for e in valid)
        first = min(e[1] for e in valid if e[3] == best)
        want = tuple(e[0] for e in sorted(valid, key=lambda e: e[2]) if e[3] == best and e[1] == first)
        assert run_pipeline(comp, task, revealed).winning_solves == want
        assert best <= opt


# -- tasks ------------------------------------------------------------------------

def test_knapsack_scoring():
    task = Knapsack.make_task([(10, 5), (6, 4), (6, 4)], 8)
    assert Knapsack.score(task.instance, [1, 2]) == 12
    assert Knapsack.score(task.instance, [0, 1]) is None
    assert Knapsack.score(task.instance, []) == 0
    assert brute_force_optimum(task)[0] == 12


def test_clique_brute_force():
    task = Clique.make_task(5, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)])
    assert brute_force_optimum(task) == (3, [0, 1, 2])


def test_task_file_round_trip(tmp_path):
    task = Knapsack.make_task([(3, 2), (4, 3)], 4)
    terms = cp.TaskTerms(5, 100, 1, cp.default_pf_schedule(ProtocolParams(), 100, b=3))
    path = tmp_path / "task.json"
    cp.dump_task_file(path, task, terms)
    t2, terms2 = cp.load_task_file(path)
    assert t2 == task and terms2 == terms
    assert cp.dumps_task_file(t2, terms2) == path.read_text()


def test_task_file_rejects_unknown_format():
    with pytest.raises(ValueError):
        cp.loads_task_file('{"format": "other"}')


def test_publish_payload_validation():
    slim = Knapsack.make_task([(1, 1)], 1).slim()
    with pytest.raises(ValueError):
        cp.PublishPayload(slim, 0, 10, {}, "c")
    with pytest.raises(ValueError):
        cp.PublishPayload(slim, 1, 10, {"main": cp.PromisedFee(10, 0.7), "storage": cp.PromisedFee(10, 0.6)}, "c")
    with pytest.raises(ValueError):
        cp.PublishPayload(slim, 1, 10, {"elsewhere": cp.PromisedFee(10, 0.1)}, "c")
