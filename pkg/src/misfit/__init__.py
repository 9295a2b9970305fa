"""Consistency of maximum likelihood under misspecified nuisance components.

Submodules:
    groups: transformation groups, symmetric parametrizations, antisymmetry checks.
    families: mixing distributions with log densities, score terms and samplers.
    mixture: doubly-stochastic pair models and their marginal likelihoods.
    inference: fitting, expected information and the sandwich covariance.
    conditions: residual checkers with three-way verdicts and orthogonalization.
    glm: canonical-link GLMs with dispersion models.
    config, scenarios, cli: scenario configs, Monte Carlo studies, command line.
"""

__version__ = "0.1.0"
