"""Numerical laboratory for ergodic control of dissipative SDEs with degenerate
additive noise: simulation, control randomization, penalized and constrained
BSDE solvers, ergodic extraction and a 1-D dynamic-programming oracle."""

__version__ = "0.1.0"
