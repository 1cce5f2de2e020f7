"""Proof-of-useful-work ledger simulator.

Hybrid PoW/PoS chain whose fees reward solving optimisation tasks, with
storage networks, reward pools and virtual stakes.
"""

__version__ = "0.1.0"
