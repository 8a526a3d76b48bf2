"""Predictor-corrector transformer blocks, the ODE solvers behind them, and
desk-scale language-model experiments."""

__version__ = "0.1.0"
