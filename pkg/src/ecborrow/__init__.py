"""Case-weighted adaptive power priors for hybrid control-arm analyses.

Augments a randomised trial's control arm with external controls under a
piecewise-exponential proportional-hazards model.  Each external control
earns per-interval compatibility weights from predictive checks against the
randomised controls; the weights are shrunk and optionally discounted by
simulation-calibrated maps before entering a weighted-likelihood power
prior.  A commensurate-prior baseline and an operating-characteristics
simulation harness round out the toolkit.
"""

from .calibration import (
    CalibrationParams,
    average_weight,
    calibrate_c,
    calibrate_p,
    discount,
    shrink,
    transform,
)
from .commensurate import (
    CommensurateDraws,
    CommensurateState,
    log_posterior_commensurate,
    sample_mcmc,
    split_rhat,
    test_superiority_mcmc,
)
from .errors import (
    CalibrationFailure,
    ConvergenceWarning,
    DomainError,
    EcborrowError,
    EmptyExternal,
    HarnessError,
    InsufficientEvents,
    NoConvergence,
    ParseError,
    ShapeError,
    SingularDesign,
)
from .gaussian import analytic_type1, gaussian_oracle, least_favourable_a0
from .inference import (
    LaplacePosterior,
    PoissonRows,
    bic,
    expand_rows,
    fit,
    gradient,
    hazard_ratio_summary,
    hessian,
    log_posterior,
    marginal_treatment,
    test_superiority,
)
from .simulate import (
    MethodSpec,
    OperatingCharacteristics,
    ScenarioResult,
    ScenarioSpec,
    generate_trial,
    method_from_name,
    run_scenario,
    weight_summary,
)
from .survival import (
    EXTERNAL,
    RCT,
    PiecewiseHazard,
    RiskDecomposition,
    SubjectRecord,
    TimePartition,
    build_partition,
    decompose,
    event_cdf,
    log_hazard,
    sample_observation,
    sample_time,
)
from .weights import (
    CensoringModel,
    PredictiveSampleSet,
    WeightMatrix,
    box_p_value,
    compute_all,
    fit_censoring,
    predictive_samples,
    terminal_weight,
    truncated_weight,
)

__version__ = "0.1.0"
