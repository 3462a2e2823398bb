"""Neural posterior principal components at desk scale.

Train MLP heads that emit, in one forward pass, the top-K principal
directions and variances of a posterior distribution, and validate them
against the closed-form Gaussian-mixture posterior via Wasserstein-2
distance.
"""

from . import autodiff, cli, errors, evaluation, gmm, linalg, losses, models, training

__all__ = [
    "autodiff",
    "cli",
    "errors",
    "evaluation",
    "gmm",
    "linalg",
    "losses",
    "models",
    "training",
]

__version__ = "0.1.0"
