"""Latent style allocation: two-level mixtures for return-impact locations.

The package groups 2-D serve-return impact locations by receiver, models
each receiver as a mixture over latent styles, each style as a mixture
over shared Gaussian location patterns, and fits everything by penalized
EM on the exact marginal likelihood.  Flat baseline families, k-fold
predictive model selection, synthetic data generation, dataset ingest,
and a CLI ride along.
"""

from .errors import StyleAllocError
from .model import (
    GaussianComponent,
    LsaParams,
    PatternSimplex,
    ReturnObservation,
    StickBreakingBetas,
    StyleSimplex,
    component_mean,
    log_posterior_unnorm,
    log_prior,
    marginal_loglik,
    marginal_loglik_point,
    marginal_loglik_points,
    mvn_logpdf,
    stick_break,
)
from .sampler import (
    GridSpec,
    SimConfig,
    draw_params,
    posterior_predictive_grid,
    sample_dataset,
)
from .inference import (
    FitConfig,
    FitReport,
    Responsibilities,
    e_step,
    fit,
    fit_gradient,
    m_step_gaussians,
    m_step_pi,
    m_step_theta,
    map_pattern_assignments,
)
from .baselines import (
    BaselineKind,
    BaselineParams,
    baseline_fit,
    baseline_loglik,
    baseline_loglik_point,
    baseline_loglik_points,
)
from .selection import (
    ElpdReport,
    GridResult,
    ModelSpec,
    compare_families,
    grid_search,
    kfold_elpd,
    psis_smooth,
)
from .dataio import (
    Dataset,
    FilterReport,
    RawReturnRecord,
    apply_filters,
    encode_covariates,
    load_csv,
    read_density_grid,
    read_model_file,
    write_density_grid,
    write_model_file,
    write_records_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
