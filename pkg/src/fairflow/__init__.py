"""Multi-flow congestion-control simulation, multi-agent training and evaluation."""

__version__ = "0.1.0"
