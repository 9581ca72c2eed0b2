"""Bayesian 3D convolutional networks for volumetric scans.

Variational layers (mean-field, Flipout, local reparameterization, MC
dropout, multiplicative normalizing flows), calibration metrics, Monte-Carlo
predictive intervals and patch-level Shapley attribution, all running on a
small float64 reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
