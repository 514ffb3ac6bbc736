"""Trial-based cost-effectiveness analysis with repeated measures under MAR.

Fits mixed models for repeated measures by maximum likelihood on each
subject's observed rows, aggregates coefficients into QALY and total-cost
contrasts, bootstraps the pipeline for cost-effectiveness inference, and
ships complete-case and multiple-imputation comparators plus a simulation
lab for validation.
"""

from .cea import (
    CeaDraws,
    CeaSummary,
    Icer,
    PointEstimate,
    bootstrap_cea,
    ceac,
    default_threshold_grid,
    icer,
    percentile_ci,
    render_plots,
    summarize,
)
from .comparators import (
    CcaResult,
    MethodComparison,
    MiResult,
    RubinPooled,
    cca,
    compare_methods,
    mi_analyze,
    mi_impute,
    pool_rubin,
)
from .contrasts import (
    ArmContrasts,
    CeaReport,
    ContrastResult,
    QalyWeights,
    auc,
    cea_report,
    linear_contrast,
    marginal_means,
    qaly_by_arm,
    qaly_weights,
    totalcost_by_arm,
)
from .dataset import (
    ColumnMap,
    DescriptiveTable,
    PatternTable,
    SubjectRecord,
    TrialDataset,
    descriptives,
    load_long,
    mean_impute_covariates,
    pattern_table,
    save_long,
    validation_warnings,
)
from .errors import (
    ConvergenceError,
    DataError,
    ModelError,
    RankDeficiencyError,
    TrialCeaError,
)
from .mmrm import (
    CompoundSymmetry,
    FittedMmrm,
    MmrmSpec,
    RandomInterceptDiag,
    Unstructured,
    build_design,
    coefficient_labels,
    fit,
    loglik,
    marginal_covariance,
    profile_beta,
    profiled_loglik_and_gradient,
    wald_ci,
)
from .simulate import (
    BiasStudy,
    MarBaseline,
    MarMonotone,
    Mcar,
    NoMissing,
    SimConfig,
    TrialTruth,
    apply_mechanism,
    bias_study,
    gen_trial,
    trial_truth,
)

__version__ = "0.1.0"
