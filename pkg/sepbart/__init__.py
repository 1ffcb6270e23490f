"""
SepBART - heterogeneous effects of multivariate continuous exposures.

This package fits a separable Bayesian additive regression tree model,
y = f(x) + g(w) + sum_j h_j(x_j, w) + noise, and derives conditional and
average effects of an exposure contrast together with the relative
importance of each covariate as an effect modifier.
"""

__version__ = "0.1.0"

__all__ = ["cli", "dataset", "diagnostics", "errors", "estimands", "model", "sim",
           "softbart", "trees", "tsbart", "utils"]
