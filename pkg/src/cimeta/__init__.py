"""Transporting treatment effects from individual participant data to a target population.

The package is organised bottom-up:

``ipd_core``
    dataset model, CSV loading, target/contributing partition, study summaries.
``numerics``
    least squares, logistic IRLS, mixed-type kernel participation model.
``transport``
    outcome-model, IPW (plain and Hajek) and doubly-robust estimators with weight diagnostics.
``aggregate_ma``
    fixed-effect, DerSimonian-Laird and meta-regression baselines.
``evaluate``
    leave-one-study-out harness, accuracy metrics, stratified bootstrap, effect-modifier screening.
``cli``
    the ``cimeta`` command.
"""

from .aggregate_ma import fixed_effect, meta_regression, random_effects_dl
from .evaluate import (
    ESTIMATOR_IDS, BootstrapSpec, EstimatorSettings, avg_abs_diff, bootstrap_ci, loso_evaluate,
    run_estimator, screen_effect_modifiers, st_abs_diff,
)
from .ipd_core import (
    Covariate, CovariateSchema, DataError, IndividualRecord, MetaDataset, load_dataset, partition,
    study_summaries,
)
from .transport import (
    InfiniteWeightError, TransportError, compute_transport_weights, estimate_dr, estimate_ipw,
    estimate_om, fit_outcome_models, fit_participation, fit_treatment_model,
)

__version__ = "0.1.0"

__all__ = [
    "Covariate", "CovariateSchema", "DataError", "IndividualRecord", "MetaDataset", "load_dataset",
    "partition", "study_summaries", "fixed_effect", "random_effects_dl", "meta_regression",
    "fit_outcome_models", "estimate_om", "fit_participation", "fit_treatment_model",
    "compute_transport_weights", "estimate_ipw", "estimate_dr", "TransportError", "InfiniteWeightError",
    "ESTIMATOR_IDS", "EstimatorSettings", "BootstrapSpec", "run_estimator", "loso_evaluate",
    "avg_abs_diff", "st_abs_diff", "bootstrap_ci", "screen_effect_modifiers",
]
