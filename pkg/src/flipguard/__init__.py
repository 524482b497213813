"""Regression-aware updates of (adversarially) robust classifiers.

A small numpy autodiff engine, MLP models, L-infinity attacks, the
congruent update objectives, flip metrics, a consistency experiment for the
constrained estimator, and a reproducible experiment harness.
"""

__version__ = "0.1.0"
