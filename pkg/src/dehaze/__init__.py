"""Dual-path image dehazing: windowed attention + selective-scan state space,
fused per pixel by weights derived from a haze-density map."""

__version__ = "0.1.0"
