"""Weighted Byzantine fault tolerant consensus for a simulated multi-LLM network."""
from .consensus import ConsensusMode, Scenario, run_round
from .core import Block, Chain, Proof, digest, make_proof, verify_proof
from .simulation import build_scenario, run_simulation

__all__ = ["Block", "Chain", "ConsensusMode", "Proof", "Scenario", "build_scenario", "digest",
           "make_proof", "run_round", "run_simulation", "verify_proof"]
__version__ = "0.1.0"
