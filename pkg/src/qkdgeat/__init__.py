"""Finite-size key rates for prepare-and-measure QKD via the generalized
entropy accumulation theorem, with certified numerical tradeoff functions."""

from . import cli, decoy, keyrate, protocol, qcore, simrun, tradeoff

__all__ = ["cli", "decoy", "keyrate", "protocol", "qcore", "simrun", "tradeoff"]
__version__ = "0.1.0"
