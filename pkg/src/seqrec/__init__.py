"""Sequence-aware recommendation with uplift ranking, baselines and an offline harness."""

__version__ = "0.1.0"
