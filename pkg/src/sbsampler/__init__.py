"""Schrodinger bridge samplers.

Regression-based approximate iterative proportional fitting, the sequential
bridge SMC sampler, SMC/particle-filter baselines, and exact Gaussian
oracles for validating all of the above.
"""

__version__ = "0.1.0"

from .linalg import Gaussian, bures, gaussian_kl, log_sum_exp, w2_gaussian
from .policy import PolicySequence, QuadraticPolicy, fit_quadratic, identity_policy
from .targets import AnnealingPath, LogisticModel, LqgModel, Schedule
from .ipf import EarlyStopConfig, IpfConfig, ReferenceProcess, approximate_ipf
from .ssb import (
    AdaptiveSpec,
    ParticleEnsemble,
    SsbConfig,
    ess,
    estimate,
    estimate_logZ,
    smc_sampler,
    ssb_sampler,
    systematic_resample,
)

__all__ = [
    "AdaptiveSpec",
    "AnnealingPath",
    "EarlyStopConfig",
    "Gaussian",
    "IpfConfig",
    "LogisticModel",
    "LqgModel",
    "ParticleEnsemble",
    "PolicySequence",
    "QuadraticPolicy",
    "ReferenceProcess",
    "Schedule",
    "SsbConfig",
    "approximate_ipf",
    "bures",
    "ess",
    "estimate",
    "estimate_logZ",
    "fit_quadratic",
    "gaussian_kl",
    "identity_policy",
    "log_sum_exp",
    "smc_sampler",
    "ssb_sampler",
    "systematic_resample",
    "w2_gaussian",
]
