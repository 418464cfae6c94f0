"""Differentially private model-based offline RL toolkit.

Pipeline: collect an offline dataset with scripted behavior policies,
train a trajectory-level DP ensemble of Gaussian dynamics models, account
the privacy budget, then optimize a SAC policy inside the resulting
uncertainty-penalized model without touching the dataset again.
"""

__version__ = "0.1.0"
