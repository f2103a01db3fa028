"""Colorectal cancer natural-history microsimulation, Bayesian calibration by
incremental mixture importance sampling, and cost-effectiveness / value of
information analysis under alternative characterizations of calibrated
parameter uncertainty."""

__version__ = "0.1.0"
