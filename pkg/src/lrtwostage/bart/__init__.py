"""Bayesian additive regression trees for Stage-1 prognostic scores."""
from .model import (
    BartChain,
    BartHyper,
    DecisionTree,
    DegenerateResponseError,
    ScoreDraws,
    VipResult,
    acceptance_rate,
    calibrate_lambda,
    cut_grid,
    fit_bart,
    ols_sigma,
    posterior_predictive_pvalue,
    posterior_predictive_rates,
    predict_posterior,
    prior_tree_sizes,
    vip,
)

__all__ = [
    "BartChain", "BartHyper", "DecisionTree", "DegenerateResponseError", "ScoreDraws",
    "VipResult", "acceptance_rate", "calibrate_lambda", "cut_grid", "fit_bart", "ols_sigma",
    "posterior_predictive_pvalue", "posterior_predictive_rates", "predict_posterior",
    "prior_tree_sizes", "vip",
]
