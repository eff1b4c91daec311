"""Mutual-information-maximizing variational autoencoders.

Small research stack: a from-scratch reverse-mode autodiff core over 2-D
float64 arrays, fully connected encoder/decoder/critic networks, the
information-maximizing training objective plus ELBO / beta / MMD baselines,
an evaluation battery (MI estimation, active units, likelihood, probes),
IDX data loading, and a CLI for training, evaluation, and sweeps.
"""

__version__ = "0.1.0"
