"""Classic and implicit stochastic approximation, with estimation procedures
and Monte Carlo diagnostics."""

__version__ = "0.1.0"
