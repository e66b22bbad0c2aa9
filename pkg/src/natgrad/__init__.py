"""Numerical laboratory for Fisher-preconditioned optimisation.

The package builds and compares natural-gradient update rules that replace the
exact Fisher information matrix with cheaper curvature proxies: the empirical
Fisher (outer products of per-sample gradients), an improved empirical Fisher
that rescales each per-sample gradient by its squared logit-space norm, and a
Monte-Carlo sampled Fisher built from gradients under labels drawn from the
model's own predictive distribution.  Around those updates it provides an
alignment indicator for ranking update quality against the exact
natural-gradient direction, damping sweeps, continuous-time convergence bound
checks, two analytically tractable two-parameter toy problems, and a small
training harness with a command-line front end.
"""

__version__ = "0.1.0"

from natgrad import (  # noqa: F401
    curvature,
    datasets,
    evaluation,
    linalg,
    models,
    optim,
    toyviz,
    updates,
)

__all__ = [
    "__version__",
    "curvature",
    "datasets",
    "evaluation",
    "linalg",
    "models",
    "optim",
    "toyviz",
    "updates",
]
