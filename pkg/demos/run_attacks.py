"""Run each attack harness once at a modest size and print its headline
numbers.  Takes well under a minute on one core.

    python demos/run_attacks.py
"""

from poaw.params import ProtocolParams
from poaw.sim import attacks


def main():
    p = ProtocolParams()
    for stake in (0.1, 0.3, 0.6):
        rep = attacks.fork_attack(p, 0.6, stake, trials=300, seed=1)
        print(f"fork, 60% hash, {stake:.0%} stake: success {rep.metrics['success_rate']:.3f}")

    # stake share 0.4 with alpha 0.4 is where withholding starts to pay again
    for alpha, stake in [(0.3, 0.0), (0.4, 0.0), (0.4, 0.4)]:
        m = attacks.withhold_attack(p, alpha, 5_000, runs=2, seed=1, stake_share=stake).metrics
        print(f"withhold alpha={alpha} stake={stake}: PoW-only gain {m['control_gain']:+.3f}, "
              f"with votes {m['pos_gain']:+.3f}")

    rep = attacks.run_o1_attack(p, n_cycles=2_000, seed=1)
    print(f"O(1): solo {rep.metrics['solo']['mean_factor']:.4f}, "
          f"against an honest solver {rep.metrics['contested']['mean_factor']:.4f}")

    for honest in (0, 1):
        m = attacks.ssa_attack(seed=1, horizon=192, honest=honest).metrics
        print(f"SSA with {honest} honest solver(s): net {m['ssa_net_income']} atoms, wins {m['ssa_wins']}")

    m = attacks.collusion_attack(seed=1, horizon=192).metrics
    print(f"collusion: honest solver among winners in {m['honest_among_winners']}/{m['sealed']} sealed")


if __name__ == "__main__":
    main()
