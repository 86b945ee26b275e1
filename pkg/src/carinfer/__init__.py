"""Covariate-adjusted randomization and post-randomization inference."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BudgetError,
    CarInferError,
    DegenerateTestError,
    InputError,
    InvalidContrastError,
    NumericalError,
    RerandomizationBudgetError,
    SingularCovarianceError,
    SingularDesignError,
    TruncationBudgetError,
)
from .inference import (  # noqa: E402
    CovariateTest,
    Decision,
    TreatmentTest,
    asymptotic_power,
    covariate_statistic,
    traditional_decision,
    treatment_statistic,
)
from .laws import (  # noqa: E402
    CriticalValue,
    NuisanceParams,
    NullLaw,
    corrected_critical,
    corrected_p_value,
    estimate_nuisance,
    null_law_for,
    nuisance_from_dgp,
    sample_truncated,
)
from .model import (  # noqa: E402
    Dataset,
    DesignMatrix,
    DGPSpec,
    FitResult,
    WorkingModelSpec,
    build_design,
    generate_covariates,
    ols_fit,
    realize_responses,
)
from .randomizers import (  # noqa: E402
    Assignment,
    ImbalanceReport,
    ProcedureConfig,
    allocate,
    complete_randomization,
    da_bcd_allocate,
    imbalance_report,
    imbalance_vector,
    mahalanobis,
    psr_allocate,
    rerandomize,
)
from .special import v_a  # noqa: E402
