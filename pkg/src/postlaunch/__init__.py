"""Post-launch treatment-effect estimation without a live control group.

Two-phase counterfactual prediction for panel data: covariate-based
approximate-nearest-neighbor donor filtering, then high-dimensional
vertical regression (periods as observations, donors as features) with
bias-aware hyperparameter tuning, plus the A/B-ST / A/A-ST validation
protocol and a synthetic-panel oracle for end-to-end checks.
"""

from .effects import (
    EffectReport,
    estimate_effects,
    infer_pvalue,
    placebo_pvalue,
    sample_split_debias,
)
from .errors import PostLaunchError
from .matching import (
    AnnIndex,
    AnnParams,
    DonorFilter,
    build_index,
    exclude_spillover,
    match_donors,
    quantile_alignment,
    subsample_donors,
)
from .panel import (
    CovariateTable,
    OutcomeView,
    PanelMatrix,
    load_covariates,
    load_panel,
    split_views,
)
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .regress import (
    CounterfactualPrediction,
    FittedModel,
    ModelSpec,
    fit_predict,
    hard_threshold_rank,
    knn_predict,
    lasso_fit,
    latent_donors,
    pcr_lasso_predict,
    pcr_predict,
    pcr_ridge_predict,
    ridge_fit,
)
from .tuning import (
    CvPlan,
    LossReport,
    SelectionResult,
    bias,
    debiased_loss,
    default_candidates,
    make_cv_plan,
    relative_error,
    select_model,
)
from .validation import (
    ExperimentBundle,
    SimConfig,
    SimulatedExperiment,
    StalenessStudy,
    ValidationVerdict,
    aa_st_pass_rule,
    aa_st_validate,
    ab_ground_truth,
    ab_st_pass_rule,
    ab_st_validate,
    run_and_validate,
    simulate_panel,
    staleness_study,
    validate_bundle,
)

__version__ = "0.1.0"
