"""R2D2 shrinkage priors and MCMC samplers for Gaussian-process spatial regression."""

from spatial_r2d2.distributions import (
    GbpParams,
    GigParams,
    RandomStream,
    SingularMatrixError,
    bp_sample_mixture,
    chol_spd,
    dirichlet_sample,
    gbp_pdf,
    gbp_sample,
    gbp_sample_ratio,
    gig_sample,
    mvn_sample,
)
from spatial_r2d2.inference import (
    SummaryRow,
    ess,
    prob_positive,
    r2_per_draw,
    sim_metrics,
    summarize,
)
from spatial_r2d2.mcmc_engine import (
    PC,
    PRIOR_FAMILIES,
    R2D2,
    VAGUE,
    ChainState,
    HyperParams,
    McmcConfig,
    McmcError,
    ModelData,
    PosteriorSamples,
    adapt_proposals,
    initial_state,
    linear_predictor,
    prior_draw_state,
    run_chain,
    run_chain_baseline,
)
from spatial_r2d2.r2d2_prior import (
    DegeneratePriorError,
    PriorShapeScale,
    R2Hyper,
    VarianceSplit,
    closed_form_blocked_cs,
    closed_form_cs,
    moment_match,
    prior_r2_simulate,
    shape_scale_from_matrix,
    standardize_columns,
    w_prior_moments,
    w_prior_sample,
)
from spatial_r2d2.spatial_core import (
    CorrelationKernel,
    Locations,
    center_apply,
    correlation_matrix,
    distance_matrix,
    trace_pair,
)

__version__ = "0.1.0"
