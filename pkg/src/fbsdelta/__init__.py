"""Exact solvers and maximum-principle checks for coupled forward-backward difference systems on scenario trees."""

__version__ = "0.1.0"
