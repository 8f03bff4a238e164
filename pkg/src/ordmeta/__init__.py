"""Bayesian meta-analysis of ordinal diagnostic test accuracy data.

Cumulative ordinal counts with missing thresholds are modeled with
probit-link ordinal regression: per-group location parameters, latent
cutpoints (fixed or study-specific with an induced-Dirichlet hierarchy),
and a factorized-binomial likelihood that conditions across missing
thresholds.  Fitting is gradient-based MCMC; the package also provides a
network-meta-analysis layer, K-fold ELPD model comparison, and a
simulation harness with MCSE-based adaptive stopping.
"""

import jax

# Double precision everywhere: the likelihood ratios and Jacobian
# determinants tested against 1e-10..1e-12 tolerances are meaningless in
# float32.  Must run before any jax.numpy array is created.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
