"""Extended-Kalman variational autoencoder laboratory.

A numpy-only implementation of a deep state-space model whose latent
dynamics are locally linear mixtures of learned base matrices, trained
either by constrained optimization with a multiplicative Lagrange
multiplier or by a beta-annealing baseline, plus a pixel-pendulum
benchmark, evaluation metrics, and latent-space policy learning.
"""

from . import autodiff, control, evaluation, gauss, model, nn, pendulum, ssm, training

__all__ = [
    "autodiff", "control", "evaluation", "gauss", "model", "nn",
    "pendulum", "ssm", "training",
]

__version__ = "0.1.0"
