"""Scenario-tree stochastic MPC with implicit dual control for interactive planning."""

__version__ = "0.1.0"
