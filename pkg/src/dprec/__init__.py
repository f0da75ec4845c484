"""Coded, differentially private communication for federated learning.

Core pieces: deterministic stream-addressable randomness (:mod:`.rng`),
tiny models and non-i.i.d. data handling (:mod:`.params`), the coded
update codec (:mod:`.codec`), the Renyi privacy accountant
(:mod:`.accountant`), the round-based simulator (:mod:`.federation`),
and a CLI (:mod:`.cli`).
"""

__version__ = "0.1.0"
