"""Stability-enhanced Gaussian process lab: semi-contracting LTI priors,
a synthetic spiralling-particle video simulator, and a GP-VAE training stack.
"""

__version__ = "0.1.0"
