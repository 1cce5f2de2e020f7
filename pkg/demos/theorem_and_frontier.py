"""Walk through the payoff comparison between honest ticket holding and the
self-dealing O(1) client, then print a slice of the parameter frontier and
check one point by Monte Carlo.

    python demos/theorem_and_frontier.py
"""

from poaw.econ import default_grid, frontier_table, verify_pos_dominance
from poaw.params import PRESETS
from poaw.sim.attacks import o1_payoff_mc


def main():
    for pv, pp in [(0.25, 0.15), (0.15, 0.10), (0.5, 0.0)]:
        rep = verify_pos_dominance(r=1.1, P_vstake=pv, p_pools=pp)
        print(f"P_vstake={pv:<5} p_pools={pp:<5} -> {rep.render()}")

    print("\nfrontier at eps 0.01 (every fifth grid point):")
    rows = frontier_table([1.06, 1.10], 0.01, default_grid())
    for row in rows[::5]:
        print("  r={r:.2f}  P_vstake={P_vstake:.3f}  p_pools={p_pools:.4f}  o1={o1_factor:.4f}".format(**row))

    # the simulated self-dealer should land on the analytic factor
    p = PRESETS["scaled"]
    mc = o1_payoff_mc(p, 5_000, seed=1)
    print(f"\nO(1) Monte Carlo over {mc['cycles']} cycles: {mc['mean_factor']:.5f} "
          f"(analytic {mc['analytic']}, PoS {mc['pos_factor']})")


if __name__ == "__main__":
    main()
