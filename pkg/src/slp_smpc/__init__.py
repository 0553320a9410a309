"""Stochastic MPC with system-level disturbance-feedback policies."""

__version__ = "0.1.0"
