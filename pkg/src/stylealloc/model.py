"""Core two-level mixture model for return-impact locations.

A dataset holds 2-D impact locations ``y`` (lateral, depth) grouped by
receiver ``i`` and tagged with the opposing server ``j`` and a covariate
vector ``x``.  Each receiver owns a distribution ``pi_i`` over K latent
styles; each style k owns a distribution ``theta_k`` over M shared
location patterns; each pattern m is a Gaussian component whose mean
depends linearly on the covariates,

    mu = (alpha_m + eta_i - delta_j) x,        Sigma_m fixed per pattern.

Style rows ``theta_k`` come from a stick-breaking map of a strictly
column-ordered coefficient matrix ``beta`` so that styles are identified
by their weight on the first pattern.  Marginalizing the two discrete
latents gives an exact per-point likelihood: a K*M-component Gaussian
mixture evaluated with log-sum-exp.  Everything here is that exact
marginal plus the matching log prior; no sampling-based approximations
are involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln, expit, gammaln, logsumexp

from .errors import (
    DimensionMismatch,
    EmptyData,
    InvalidSimplex,
    NonPdCovariance,
    OrderingViolation,
)

# Impact locations are always (lateral, depth) pairs.
N_DIMS = 2

# Tolerance for "rows sum to one" checks on stored simplexes.
SIMPLEX_ATOL = 1e-12

LOG_2PI = math.log(2.0 * math.pi)


def _readonly(values, dtype=float):
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


def _check_simplex_rows(rows, what):
    if np.any(rows < 0.0) or not np.all(np.isfinite(rows)):
        raise InvalidSimplex(f"{what} entries must be finite and non-negative")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InvalidSimplex(f"{what} rows must sum to 1 (worst deviation {worst:.3e})")


@dataclass(frozen=True, eq=False)
class ReturnObservation:
    """One return: who hit it, against whom, where it landed, under what context.

    Parameters
    ----------
    receiver_id : int
        Dense receiver index in ``[0, R)``.
    server_id : int
        Dense server index in ``[0, S)``.
    location : ndarray, shape (2,)
        Impact location (lateral, depth) in meters.
    covariates : ndarray, shape (P,)
        Encoded context vector; the first column is the intercept under
        the built-in encodings.
    """

    receiver_id: int
    server_id: int
    location: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "receiver_id", int(self.receiver_id))
        object.__setattr__(self, "server_id", int(self.server_id))
        object.__setattr__(self, "location", _readonly(self.location))
        object.__setattr__(self, "covariates", _readonly(self.covariates))
        if self.receiver_id < 0 or self.server_id < 0:
            raise DimensionMismatch("receiver_id and server_id must be non-negative")
        if self.location.shape != (N_DIMS,):
            raise DimensionMismatch(
                f"location must have shape ({N_DIMS},), got {self.location.shape}"
            )
        if self.covariates.ndim != 1 or self.covariates.shape[0] < 1:
            raise DimensionMismatch("covariates must be a non-empty 1-D vector")
        if not np.all(np.isfinite(self.location)) or not np.all(
            np.isfinite(self.covariates)
        ):
            raise DimensionMismatch("observation fields must be finite")


@dataclass(frozen=True, eq=False)
class StickBreakingBetas:
    """Ordered stick-breaking coefficients, one row per style.

    ``beta`` has shape (K, M-1).  Column m feeds the break for pattern m,
    and every column must be strictly ascending in k; that ordering is what
    pins down the style labels.  K*(M-1) free parameters in total.
    """

    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _readonly(self.beta))
        if self.beta.ndim != 2:
            raise DimensionMismatch("beta must be a 2-D array of shape (K, M-1)")
        if self.beta.shape[0] < 1:
            raise DimensionMismatch("beta needs at least one style row")
        if not np.all(np.isfinite(self.beta)):
            raise DimensionMismatch("beta entries must be finite")
        if self.beta.shape[0] > 1 and self.beta.shape[1] > 0:
            if not np.all(np.diff(self.beta, axis=0) > 0.0):
                raise OrderingViolation(
                    "each beta column must be strictly increasing across styles"
                )

    @property
    def n_styles(self):
        return self.beta.shape[0]

    @property
    def n_patterns(self):
        return self.beta.shape[1] + 1


@dataclass(frozen=True, eq=False)
class PatternSimplex:
    """Rows of per-style pattern weights; shape (K, M), each row a simplex."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _readonly(self.theta))
        if self.theta.ndim != 2 or self.theta.shape[1] < 1:
            raise DimensionMismatch("theta must be a 2-D array of shape (K, M)")
        _check_simplex_rows(self.theta, "theta")


@dataclass(frozen=True, eq=False)
class StyleSimplex:
    """Rows of per-receiver style weights; shape (R, K), each row a simplex."""

    pi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", _readonly(self.pi))
        if self.pi.ndim != 2 or self.pi.shape[1] < 1:
            raise DimensionMismatch("pi must be a 2-D array of shape (R, K)")
        _check_simplex_rows(self.pi, "pi")


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """One location pattern: a coefficient matrix and a 2x2 covariance factor.

    Parameters
    ----------
    alpha : ndarray, shape (2, P)
        Pattern-specific mean coefficients.
    sigma_chol : ndarray, shape (2, 2)
        Lower Cholesky factor of the component covariance.
    scale_vec : ndarray, shape (2,)
        Marginal standard deviations; must equal the row norms of
        ``sigma_chol``.  Stored separately because the scale prior reads it
        directly.
    """

    alpha: np.ndarray
    sigma_chol: np.ndarray
    scale_vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _readonly(self.alpha))
        object.__setattr__(self, "sigma_chol", _readonly(self.sigma_chol))
        object.__setattr__(self, "scale_vec", _readonly(self.scale_vec))
        if self.alpha.ndim != 2 or self.alpha.shape[0] != N_DIMS:
            raise DimensionMismatch(
                f"alpha must have shape ({N_DIMS}, P), got {self.alpha.shape}"
            )
        if self.sigma_chol.shape != (N_DIMS, N_DIMS):
            raise DimensionMismatch("sigma_chol must be 2x2")
        if self.scale_vec.shape != (N_DIMS,):
            raise DimensionMismatch("scale_vec must have length 2")
        if abs(self.sigma_chol[0, 1]) != 0.0:
            raise NonPdCovariance("sigma_chol must be lower triangular")
        if np.any(np.diag(self.sigma_chol) <= 0.0) or not np.all(
            np.isfinite(self.sigma_chol)
        ):
            raise NonPdCovariance("sigma_chol needs strictly positive diagonal")
        row_norms = np.sqrt(np.sum(self.sigma_chol**2, axis=1))
        if not np.allclose(self.scale_vec, row_norms, rtol=1e-8, atol=1e-12):
            raise NonPdCovariance("scale_vec must match the row norms of sigma_chol")

    @classmethod
    def from_scales(cls, alpha, scales, corr):
        """Build from marginal scales ``(s1, s2)`` and a correlation ``corr``."""
        s1, s2 = float(scales[0]), float(scales[1])
        r = float(corr)
        if not (s1 > 0.0 and s2 > 0.0):
            raise NonPdCovariance("scales must be strictly positive")
        if not -1.0 < r < 1.0:
            raise NonPdCovariance("correlation must lie strictly inside (-1, 1)")
        chol = np.array([[s1, 0.0], [s2 * r, s2 * math.sqrt(1.0 - r * r)]])
        return cls(alpha=alpha, sigma_chol=chol, scale_vec=np.array([s1, s2]))

    @classmethod
    def from_covariance(cls, alpha, cov, jitter=0.0):
        """Build from a covariance matrix, optionally ridged by ``jitter``."""
        cov = np.asarray(cov, dtype=float) + float(jitter) * np.eye(N_DIMS)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonPdCovariance("covariance is not positive definite") from exc
        return cls(alpha=alpha, sigma_chol=chol, scale_vec=np.sqrt(np.diag(cov)))

    @property
    def covariance(self):
        return self.sigma_chol @ self.sigma_chol.T

    @property
    def corr(self):
        """Off-diagonal correlation implied by the Cholesky factor."""
        return float(self.sigma_chol[1, 0] / self.scale_vec[1])


@dataclass(frozen=True, eq=False)
class LsaParams:
    """Full parameter set for the two-level mixture.

    Hyperparameters ride along so that priors, sampling, and fitting all
    read one object.  ``theta`` is derived from ``betas`` on demand.
    """

    betas: StickBreakingBetas
    pi: StyleSimplex
    components: tuple
    eta: np.ndarray
    delta: np.ndarray
    alpha0: float = 1.0
    prior_scales: float = 2.5
    lkj_eta: float = 1.0
    halft_scale: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "eta", _readonly(self.eta))
        object.__setattr__(self, "delta", _readonly(self.delta))
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "prior_scales", float(self.prior_scales))
        object.__setattr__(self, "lkj_eta", float(self.lkj_eta))
        object.__setattr__(self, "halft_scale", float(self.halft_scale))
        if len(self.components) != self.betas.n_patterns:
            raise DimensionMismatch(
                f"expected {self.betas.n_patterns} components, got {len(self.components)}"
            )
        if not all(isinstance(c, GaussianComponent) for c in self.components):
            raise DimensionMismatch("components must be GaussianComponent instances")
        if self.pi.pi.shape[1] != self.betas.n_styles:
            raise DimensionMismatch("pi columns must match the style count")
        p = self.components[0].alpha.shape[1]
        if any(c.alpha.shape[1] != p for c in self.components):
            raise DimensionMismatch("all components must share one covariate width")
        for name, arr in (("eta", self.eta), ("delta", self.delta)):
            if arr.ndim != 3 or arr.shape[1] != N_DIMS or arr.shape[2] != p:
                raise DimensionMismatch(
                    f"{name} must have shape (n, {N_DIMS}, {p}), got {arr.shape}"
                )
        for name, val in (
            ("alpha0", self.alpha0),
            ("prior_scales", self.prior_scales),
            ("lkj_eta", self.lkj_eta),
            ("halft_scale", self.halft_scale),
        ):
            if not (np.isfinite(val) and val > 0.0):
                raise DimensionMismatch(f"{name} must be finite and positive")

    @property
    def n_styles(self):
        return self.betas.n_styles

    @property
    def n_patterns(self):
        return self.betas.n_patterns

    @property
    def n_receivers(self):
        return self.pi.pi.shape[0]

    @property
    def n_servers(self):
        return self.delta.shape[0]

    @property
    def n_covariates(self):
        return self.components[0].alpha.shape[1]

    @cached_property
    def theta(self):
        """Pattern weights implied by the stick-breaking coefficients."""
        return stick_break(self.betas)

    @cached_property
    def _log_pi(self):
        with np.errstate(divide="ignore"):
            return np.log(self.pi.pi)

    @cached_property
    def _log_theta(self):
        with np.errstate(divide="ignore"):
            return np.log(self.theta.theta)

    def replace(self, **changes):
        """Return a copy with the given fields swapped out."""
        current = {
            "betas": self.betas,
            "pi": self.pi,
            "components": self.components,
            "eta": self.eta,
            "delta": self.delta,
            "alpha0": self.alpha0,
            "prior_scales": self.prior_scales,
            "lkj_eta": self.lkj_eta,
            "halft_scale": self.halft_scale,
        }
        current.update(changes)
        return LsaParams(**current)


def stick_break(betas):
    """Map ordered coefficients to pattern weights, one simplex row per style.

    Break fractions are ``nu = sigmoid(beta)``.  Weight m is ``nu_m`` times
    the stick left after the first m-1 breaks, and the last pattern takes
    whatever remains, so each row sums to one by construction.  The leftover
    stick is accumulated as a product of ``sigmoid(-beta)`` terms; that form
    stays accurate when ``nu`` saturates near one.

    Parameters
    ----------
    betas : StickBreakingBetas or array-like, shape (K, M-1)

    Returns
    -------
    PatternSimplex
        Shape (K, M) weights; column 0 is strictly increasing in k because
        the first beta column is.
    """
    if not isinstance(betas, StickBreakingBetas):
        betas = StickBreakingBetas(np.asarray(betas, dtype=float))
    b = betas.beta
    k, m_minus_1 = b.shape
    nu = expit(b)
    one_minus_nu = expit(-b)
    # remaining[:, j] is the stick left before break j; final column is the
    # leftover that becomes the last pattern's weight.
    remaining = np.ones((k, m_minus_1 + 1))
    np.cumprod(one_minus_nu, axis=1, out=remaining[:, 1:])
    theta = np.empty((k, m_minus_1 + 1))
    theta[:, :m_minus_1] = nu * remaining[:, :m_minus_1]
    theta[:, m_minus_1] = remaining[:, m_minus_1]
    return PatternSimplex(theta)


def component_mean(component, eta_r, delta_s, x):
    """Mean of one component for one observation context.

    Computes ``(alpha + eta_r - delta_s) @ x``; the receiver shifts the
    pattern mean and the server shifts it back.

    Parameters
    ----------
    component : GaussianComponent
    eta_r : ndarray, shape (2, P)
        Receiver offset coefficients.
    delta_s : ndarray, shape (2, P)
        Server offset coefficients.
    x : ndarray, shape (P,)

    Returns
    -------
    ndarray, shape (2,)
    """
    eta_r = np.asarray(eta_r, dtype=float)
    delta_s = np.asarray(delta_s, dtype=float)
    x = np.asarray(x, dtype=float)
    p = component.alpha.shape[1]
    if eta_r.shape != (N_DIMS, p) or delta_s.shape != (N_DIMS, p):
        raise DimensionMismatch(f"offsets must have shape ({N_DIMS}, {p})")
    if x.shape != (p,):
        raise DimensionMismatch(f"x must have shape ({p},), got {x.shape}")
    return (component.alpha + eta_r - delta_s) @ x


def mvn_logpdf(y, mean, sigma_chol):
    """Gaussian log density evaluated through a lower Cholesky factor.

    Parameters
    ----------
    y, mean : ndarray, shape (d,)
    sigma_chol : ndarray, shape (d, d)
        Lower triangular with positive diagonal.

    Returns
    -------
    float
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(sigma_chol, dtype=float)
    if y.ndim != 1 or y.shape != mean.shape:
        raise DimensionMismatch("y and mean must be 1-D vectors of equal length")
    d = y.shape[0]
    if chol.shape != (d, d):
        raise DimensionMismatch("sigma_chol shape must match the vector length")
    diag = np.diag(chol)
    if np.any(diag <= 0.0) or np.any(np.triu(chol, k=1) != 0.0):
        raise NonPdCovariance("sigma_chol must be lower triangular with positive diagonal")
    z = solve_triangular(chol, y - mean, lower=True)
    return float(-0.5 * (d * LOG_2PI + z @ z) - np.sum(np.log(diag)))


def stack_observations(data):
    """Pack a list of observations into dense arrays.

    Returns
    -------
    tuple
        ``(Y, X, r_idx, s_idx)`` with shapes (N, 2), (N, P), (N,), (N,).
    """
    if len(data) == 0:
        raise EmptyData("no observations to stack")
    p = data[0].covariates.shape[0]
    if any(obs.covariates.shape[0] != p for obs in data):
        raise DimensionMismatch("observations disagree on covariate length")
    y = np.stack([obs.location for obs in data])
    x = np.stack([obs.covariates for obs in data])
    r_idx = np.array([obs.receiver_id for obs in data], dtype=np.intp)
    s_idx = np.array([obs.server_id for obs in data], dtype=np.intp)
    return y, x, r_idx, s_idx


def _check_indices(params, r_idx, s_idx, p):
    if p != params.n_covariates:
        raise DimensionMismatch(
            f"covariates have width {p}, parameters expect {params.n_covariates}"
        )
    if r_idx.size and int(r_idx.max()) >= params.n_receivers:
        raise DimensionMismatch("receiver_id out of range for pi")
    if s_idx.size and int(s_idx.max()) >= params.n_servers:
        raise DimensionMismatch("server_id out of range for delta")


def component_log_densities(components, eta, delta, y, x, r_idx, s_idx):
    """Per-observation, per-component Gaussian log densities.

    Shared by the full model and the flat baselines, which use the same
    component structure under different mixing weights.

    Returns
    -------
    ndarray, shape (N, M)
    """
    n = y.shape[0]
    m_count = len(components)
    # (alpha_m + eta_r - delta_s) x  =  alpha_m x + (eta_r - delta_s) x
    off = np.einsum("ndp,np->nd", eta[r_idx] - delta[s_idx], x)
    out = np.empty((n, m_count))
    for m, comp in enumerate(components):
        mu = x @ comp.alpha.T + off
        diff = y - mu
        z = solve_triangular(comp.sigma_chol, diff.T, lower=True)
        logdet = np.sum(np.log(np.diag(comp.sigma_chol)))
        out[:, m] = -0.5 * (N_DIMS * LOG_2PI + np.sum(z * z, axis=0)) - logdet
    return out


def loglik_grid(params, y, x, r_idx, s_idx):
    """Joint log weights ``log pi_ik + log theta_km + log N_m(y_n)``.

    Returns
    -------
    ndarray, shape (N, K, M)
        Log-sum-exp over the trailing two axes gives the per-point marginal
        log likelihood; normalizing instead gives posterior responsibilities.
    """
    _check_indices(params, r_idx, s_idx, x.shape[1])
    dens = component_log_densities(
        params.components, params.eta, params.delta, y, x, r_idx, s_idx
    )
    return (
        params._log_pi[r_idx][:, :, None]
        + params._log_theta[None, :, :]
        + dens[:, None, :]
    )


def marginal_loglik_points(params, data):
    """Exact marginal log likelihood of each observation.

    Returns
    -------
    ndarray, shape (N,)
    """
    y, x, r_idx, s_idx = stack_observations(data)
    grid = loglik_grid(params, y, x, r_idx, s_idx)
    return logsumexp(grid.reshape(grid.shape[0], -1), axis=1)


def marginal_loglik_point(params, obs):
    """Exact marginal log likelihood of a single observation."""
    return float(marginal_loglik_points(params, [obs])[0])


def marginal_loglik(params, data, sequential=False):
    """Total marginal log likelihood of a dataset.

    Parameters
    ----------
    params : LsaParams
    data : list of ReturnObservation
    sequential : bool
        When true, evaluate one observation at a time instead of in a
        single vectorized batch.  Same accumulation, smaller footprint;
        exists so the two paths can be cross-checked.

    Returns
    -------
    float
    """
    if len(data) == 0:
        raise EmptyData("no observations")
    if sequential:
        points = np.array([marginal_loglik_point(params, obs) for obs in data])
    else:
        points = marginal_loglik_points(params, data)
    return float(np.sum(points))


def _dirichlet_logpdf(row, alpha0):
    k = row.shape[0]
    const = gammaln(k * alpha0) - k * gammaln(alpha0)
    if alpha0 == 1.0:
        return const
    with np.errstate(divide="ignore"):
        logs = np.log(row)
    # alpha0 > 1 turns a zero entry into -inf (density zero), as it should
    return const + (alpha0 - 1.0) * float(np.sum(logs))


def dirichlet_rows_logpdf(rows, alpha0):
    """Sum of symmetric Dirichlet log densities over simplex rows."""
    rows = np.asarray(rows, dtype=float)
    _check_simplex_rows(rows, "weights")
    return float(sum(_dirichlet_logpdf(row, alpha0) for row in rows))


def lkj_corr_logpdf(corr, lkj_eta):
    """Log density of a 2x2 correlation under the LKJ shape parameter."""
    if not -1.0 < corr < 1.0:
        raise NonPdCovariance("correlation must lie strictly inside (-1, 1)")
    return float(
        (lkj_eta - 1.0) * math.log1p(-corr * corr)
        - ((2.0 * lkj_eta - 1.0) * math.log(2.0) + betaln(lkj_eta, lkj_eta))
    )


def half_t1_logpdf(s, scale):
    """Log density of a half-Student-t with one degree of freedom."""
    if s <= 0.0:
        return -math.inf
    z = s / scale
    return math.log(2.0) - math.log(math.pi) - math.log(scale) - math.log1p(z * z)


def gaussian_matrix_logpdf(arr, scale):
    """Sum of independent N(0, scale^2) log densities over all entries."""
    arr = np.asarray(arr, dtype=float)
    n = arr.size
    return float(-0.5 * np.sum((arr / scale) ** 2) - n * (0.5 * LOG_2PI + math.log(scale)))


def log_prior(params):
    """Log prior density of a full parameter set.

    Independent pieces: standard normal on each stick-breaking coefficient
    (ordering is a relabeling constraint, not a reweighting), symmetric
    Dirichlet rows on ``pi``, zero-mean normals on all mean coefficients,
    and per component an LKJ term on the correlation plus half-Student-t(1)
    terms on the two scales.

    Returns
    -------
    float
    """
    total = -0.5 * float(np.sum(params.betas.beta**2))
    total -= params.betas.beta.size * 0.5 * LOG_2PI
    total += dirichlet_rows_logpdf(params.pi.pi, params.alpha0)
    total += gaussian_matrix_logpdf(params.eta, params.prior_scales)
    total += gaussian_matrix_logpdf(params.delta, params.prior_scales)
    for comp in params.components:
        total += gaussian_matrix_logpdf(comp.alpha, params.prior_scales)
        total += lkj_corr_logpdf(comp.corr, params.lkj_eta)
        total += half_t1_logpdf(float(comp.scale_vec[0]), params.halft_scale)
        total += half_t1_logpdf(float(comp.scale_vec[1]), params.halft_scale)
    return float(total)


def log_posterior_unnorm(params, data):
    """Marginal log likelihood plus log prior (unnormalized log posterior)."""
    return marginal_loglik(params, data) + log_prior(params)
