"""Desk-scale numerical laboratory for infinite-horizon forward-backward
stochastic Volterra systems with delay and jumps.

Pipeline: simulate the forward Volterra state, solve the backward equation by
truncated-horizon Picard iteration in a weighted norm, assemble the
Hamiltonian and adjoint system, and optimize controls by projected
conditional-gradient ascent.
"""

__version__ = "0.1.0"
