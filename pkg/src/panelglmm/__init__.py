"""Regularized EM for Poisson and Gaussian GLMMs on balanced panels.

The linear predictor is ``X beta + U1 xi1 + U2 xi2`` with an i.i.d.
individual effect ``xi1`` and a stationary AR(1) time effect ``xi2``.
"""

from .errors import (
    ConditioningError,
    ConfigError,
    DataContractError,
    DegenerateFitError,
    DimensionError,
    DivergenceError,
    LinearizationError,
    MStepError,
    PanelGLMMError,
    RelevanceError,
    SelectionError,
    SingularSystemError,
    SpecError,
    StationarityError,
)
from .inference import (
    LinearizedLMM,
    PosteriorMoments,
    hat_matrix_apply,
    marginal_covariance,
    penalized_marginal_loglik,
    posterior_xi,
    ridge_gls_beta,
)
from .linearize import WorkingModel, linearize, working_response, working_variance
from .model import (
    DesignSet,
    FamilyLink,
    GaussianIdentity,
    ModelParams,
    PanelLayout,
    PoissonLog,
    RandomEffectState,
    ar1_covariance,
    ar1_logdet,
    ar1_precision,
    build_designs,
    complete_loglik,
    family_link,
    linear_predictor,
    mean_response,
    random_effect_covariance,
)
from .ridge_em import (
    FitConfig,
    FitResult,
    QPenStats,
    default_lambda_grid,
    em_sweeps,
    fit,
    gcv_score,
    m_step,
    penalized_e_step,
    profile_rho,
    q_pen,
    select_lambda,
)
from .sc_em import (
    ComponentBasis,
    CVSelection,
    SCConfig,
    build_component_basis,
    component_objective,
    cv_tune,
    extract_component,
    fit_hd,
    oof_deviance,
    structural_relevance,
)
from .simulate import SimSpec, StudyResult, StudySpec, gen_ar1_path, gen_panel, run_study

__version__ = "0.1.0"
