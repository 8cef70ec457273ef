"""Posterior and pseudo-posterior convergence-rate checks over finite sieve priors."""

__version__ = "0.1.0"
