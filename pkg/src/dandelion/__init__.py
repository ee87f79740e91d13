"""Deterministic simulator of committee-based agreement on single blocks and on multiplexed macroblocks."""

__version__ = "0.1.0"
