"""Rank-similarity counterfactual estimators for randomized trials with
noncompliance: decomposed intention-to-treat effects (by take-up status),
quantile effects, clustered exchangeable-bootstrap inference, a latent-rank
diagnostic, and a Monte Carlo harness."""

__version__ = "0.1.0"

from .bootstrap import BandResult, BootstrapPlan, bootstrap_pipeline, summarize, uniform_band
from .counterfactual import (
    CounterfactualCdf,
    cf_mean,
    cf_quantile,
    conditional_cf_cdf,
    two_sided_cf_cdf,
    unconditional_cf_cdf,
)
from .dataset import (
    SubgroupKey,
    T0,
    T0D0,
    T1,
    T1D0,
    T1D1,
    TrialDataset,
    DataError,
    filter_positive_proxy,
    load_csv,
    select,
    threshold_grid,
)
from .dataset import from_arrays
from .diagnostics import CellScheme, MeansTestResult, latent_ranks, means_test
from .distreg import (
    ThresholdCdfModel,
    WeightVector,
    fit_model,
    fit_threshold,
    invert_quantile,
    monotone_rearrange,
    predict_cdf,
)
from .effects import (
    EffectEstimate,
    EstimatorSettings,
    att_envelope,
    compute_estimates,
    itt,
    itt_by_takeup,
    iv_att,
    late_net,
    ols_baselines,
    quantile_difference,
    two_sided_ittna,
    weighted_quantile,
)
from .links import LinkFunction, evaluate, fisher_weight, get_link
from .montecarlo import (
    DgpConfig,
    SimulationReport,
    generate_e1,
    generate_e2,
    run_study,
    truth_oracle,
)
