from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from poaw.econ import (EmptyFrontier, default_grid, efficiency_ratio, expected_pos_factor, frontier_csv,
                       frontier_table, o1_adversary_factor, proposition_precondition, solve_param_frontier,
                       transfer_time_estimate, verify_pos_dominance)
from poaw.params import PRESETS, ProtocolParams
from poaw.sim.market import ticket_market


def test_pos_factor_examples():
    assert expected_pos_factor(Fraction(11, 10)) == Fraction(1095, 1000)
    assert expected_pos_factor(1.2) == Fraction(119, 100)
    assert expected_pos_factor(1) == 1


def test_o1_factor_examples():
    assert o1_adversary_factor(0.25, 0.15) == Fraction(10625, 10000)
    assert o1_adversary_factor(0.15, 0.10) == Fraction(1035, 1000)
    assert o1_adversary_factor(0.7, 1) == 0


def test_default_dominance_report():
    rep = verify_pos_dominance(ProtocolParams())  # r 1.1, P_vstake 0.25, pools 0.10 + 0.05
    assert rep.dominance and rep.solver_upside and rep.bounds_hold
    assert rep.render() == "PoS 1.095, O(1) 1.0625, dominance: yes, solver upside: yes"
    assert rep.margin == Fraction(325, 10000)


def test_dominance_fails_with_large_vstake_share():
    rep = verify_pos_dominance(r=1.1, P_vstake=0.5, p_pools=0)
    assert not rep.dominance and rep.o1_factor == Fraction(3, 2)


def test_no_solver_upside_when_pools_take_everything():
    rep = verify_pos_dominance(r=1.1, P_vstake=0.25, p_pools=1)
    assert rep.o1_factor == 0 and not rep.solver_upside


# -- frontier -----------------------------------------------------------------------

def test_frontier_point_example():
    pts = solve_param_frontier(1.1, 0.01, [0.25])
    assert pts[0].p_pools == Fraction(132, 1000)


def test_frontier_points_meet_target():
    for r in (1.06, 1.08, 1.10, 1.12):
        target = expected_pos_factor(r) - Fraction(1, 100)
        for pt in solve_param_frontier(r, 0.01, default_grid()):
            assert pt.o1_factor == target
            assert 0 <= pt.p_pools <= 1


def test_frontier_float_table_within_tolerance():
    rows = frontier_table([1.06, 1.12], 0.01, default_grid())
    for row in rows:
        lhs = (1 + row["P_vstake"]) * (1 - row["p_pools"])
        assert abs(lhs - (0.95 * row["r"] + 0.05 - 0.01)) <= 1e-12


def test_empty_frontier():
    with pytest.raises(EmptyFrontier):
        solve_param_frontier(1.0, 0.01, default_grid())
    with pytest.raises(EmptyFrontier):
        solve_param_frontier(1.1, 0.01, [])


def test_single_grid_point_gives_single_row():
    assert len(frontier_table([1.1], 0.01, [Fraction(1, 4)])) == 1


def test_frontier_csv_round_trips_floats():
    rows = frontier_table([1.1], 0.01, default_grid(5))
    text = frontier_csv(rows, "config_digest=x")
    lines = text.splitlines()
    assert lines[0] == "# config_digest=x" and lines[1] == "r,P_vstake,p_pools,o1_factor"
    assert [float(x) for x in lines[2].split(",")] == [rows[0][k] for k in ("r", "P_vstake", "p_pools", "o1_factor")]


@given(st.fractions(min_value=Fraction(106, 100), max_value=3), st.fractions(min_value=0, max_value=Fraction(1, 20)))
def test_frontier_is_dominated(r, eps):
    try:
        pts = solve_param_frontier(r, eps, default_grid(11, 2.0))
    except EmptyFrontier:
        return
    for pt in pts:
        assert pt.o1_factor <= expected_pos_factor(r)


# -- small helpers ------------------------------------------------------------------

def test_efficiency_ratio():
    assert efficiency_ratio(10, 5) == 10
    assert efficiency_ratio(10, 10) == 1
    with pytest.raises(ValueError):
        efficiency_ratio(0, 1)


def test_transfer_time():
    assert transfer_time_estimate(100 * 10**6, 24e6) == pytest.approx(33.33, abs=0.01)
    assert transfer_time_estimate(100 * 10**6, 8e6) == 100
    with pytest.raises(ValueError):
        transfer_time_estimate(1, 0)


def test_proposition_precondition():
    assert proposition_precondition(10.0, 1.0)
    assert not proposition_precondition(1.0, 1.0)


# -- ticket market (short run) --------------------------------------------------------

def test_short_market_holds_pool_near_target():
    p = PRESETS["scaled"]
    rep = ticket_market(p, n_blocks=3000, seed=3)
    assert rep.pool_within(p.pool_target, 0.05)
    assert 0.02 < rep.miss_rate < 0.09
