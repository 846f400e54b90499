"""Computational tools for limit theorems of slowly mixing dynamical systems.

Modules:
  seq_algebra   weighted sequence spaces with convolution, norms and inversion
  tower_core    intermittent interval map and exact finite towers
  transfer_ops  discretized induced transfer operators and their spectra
  renewal       renewal sequences, iterate decompositions, perturbed envelopes
  limit_lab     Monte Carlo experiments for distributional limit laws
  cli           command line front end
"""

from .errors import NumericalError, PreconditionError

__all__ = ["NumericalError", "PreconditionError"]
__version__ = "0.1.0"
