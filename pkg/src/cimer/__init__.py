"""Imitation-then-emulation learning of prehensile skills from state-only observations."""

__version__ = "0.1.0"
