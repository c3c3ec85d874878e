"""Shared fixtures: instance builders and independent oracle densities."""
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, logit
from scipy.stats import multivariate_normal

from stylealloc.model import (
    GaussianComponent,
    LsaParams,
    ReturnObservation,
    StickBreakingBetas,
    StyleSimplex,
)
from stylealloc.sampler import draw_params_for_shape


def random_ordered_beta(n_styles, n_patterns, rng, spread=2.0):
    """Random stick coefficients with every column strictly increasing."""
    raw = rng.normal(scale=spread, size=(n_styles, n_patterns - 1))
    return np.sort(raw, axis=0) + np.arange(n_styles)[:, None] * 1e-6


def random_params(n_styles, n_patterns, n_receivers, n_servers, n_covariates, rng):
    """A prior-style random parameter set for a given shape."""
    return draw_params_for_shape(
        n_styles, n_patterns, n_receivers, n_servers, n_covariates, rng
    )


def tame_components(params, rng):
    """Swap in well-conditioned random components.

    Prior draws occasionally produce near-singular covariances that a
    linear-space oracle cannot evaluate; this keeps scales and
    correlations inside a comfortably invertible range while leaving the
    rest of the parameter set untouched.
    """
    comps = tuple(
        GaussianComponent.from_scales(
            alpha=rng.normal(scale=1.5, size=(2, params.n_covariates)),
            scales=rng.uniform(0.35, 1.5, size=2),
            corr=float(rng.uniform(-0.7, 0.7)),
        )
        for _ in range(params.n_patterns)
    )
    return params.replace(components=comps)


def random_data(params, n_points, rng, x_scale=1.0):
    """Observations drawn from the model so densities stay representable.

    Locations come from the mixture itself (style then pattern then the
    Gaussian), which keeps the linear-space oracle well away from
    underflow even when prior-drawn scales are extreme.
    """
    p = params.n_covariates
    theta = params.theta.theta
    obs = []
    for _ in range(n_points):
        x = np.ones(p)
        if p > 1:
            x[1:] = rng.normal(scale=x_scale, size=p - 1)
        r = int(rng.integers(params.n_receivers))
        s = int(rng.integers(params.n_servers))
        k = int(rng.choice(params.n_styles, p=params.pi.pi[r]))
        m = int(rng.choice(params.n_patterns, p=theta[k]))
        comp = params.components[m]
        mean = (comp.alpha + params.eta[r] - params.delta[s]) @ x
        y = mean + comp.sigma_chol @ rng.standard_normal(2)
        obs.append(
            ReturnObservation(
                receiver_id=r, server_id=s, location=y, covariates=x
            )
        )
    return obs


def stick_break_reference(beta):
    """Independent scalar-loop stick-breaking implementation."""
    beta = np.asarray(beta, dtype=float)
    k, m1 = beta.shape
    theta = np.zeros((k, m1 + 1))
    for i in range(k):
        rem = 1.0
        for j in range(m1):
            nu = expit(beta[i, j])
            theta[i, j] = rem * nu
            rem *= 1.0 - nu
        theta[i, m1] = rem
    return theta


def brute_force_point_density(params, y, x, receiver, server):
    """Linear-space double sum over styles and patterns via scipy."""
    theta = stick_break_reference(params.betas.beta)
    pi_row = params.pi.pi[receiver]
    total = 0.0
    for k in range(params.n_styles):
        for m in range(params.n_patterns):
            comp = params.components[m]
            mean = (comp.alpha + params.eta[receiver] - params.delta[server]) @ x
            dens = multivariate_normal(mean=mean, cov=comp.covariance).pdf(y)
            total += pi_row[k] * theta[k, m] * dens
    return total


def brute_force_responsibilities(params, y, x, receiver, server):
    """Joint posterior over (style, pattern) for one point, linear space."""
    theta = stick_break_reference(params.betas.beta)
    pi_row = params.pi.pi[receiver]
    joint = np.zeros((params.n_styles, params.n_patterns))
    for k in range(params.n_styles):
        for m in range(params.n_patterns):
            comp = params.components[m]
            mean = (comp.alpha + params.eta[receiver] - params.delta[server]) @ x
            dens = multivariate_normal(mean=mean, cov=comp.covariance).pdf(y)
            joint[k, m] = pi_row[k] * theta[k, m] * dens
    return joint / joint.sum()


def separated_truth(n_receivers=12, n_servers=6, pi_conc=0.95, seed=7):
    """Well-separated three-style, three-pattern truth with no offsets.

    Sticks give theta rows (0.06, 0.169, 0.771), (0.20, 0.608, 0.192),
    (0.72, 0.224, 0.056); receivers cycle through three style archetypes.
    """
    nu = np.array([[0.06, 0.18], [0.20, 0.76], [0.72, 0.80]])
    beta = logit(nu)
    rng = np.random.default_rng(seed)
    lo = (1.0 - pi_conc) / 2.0
    rows = []
    for i in range(n_receivers):
        row = np.full(3, lo)
        row[i % 3] = pi_conc
        row = row + rng.uniform(0.0, 0.01, size=3)
        rows.append(row / row.sum())
    means = np.array([[-2.2, 1.2], [0.0, 3.2], [2.2, 1.2]])
    scales = np.array([[0.55, 0.50], [0.60, 0.55], [0.55, 0.50]])
    corrs = (0.15, -0.10, 0.10)
    comps = tuple(
        GaussianComponent.from_scales(
            alpha=means[m][:, None], scales=scales[m], corr=corrs[m]
        )
        for m in range(3)
    )
    return LsaParams(
        betas=StickBreakingBetas(beta),
        pi=StyleSimplex(np.array(rows)),
        components=comps,
        eta=np.zeros((n_receivers, 2, 1)),
        delta=np.zeros((n_servers, 2, 1)),
    )


def align_means(true_means, fit_means):
    """Hungarian match on Euclidean distance; returns per-pair errors."""
    cost = np.linalg.norm(
        np.asarray(true_means)[:, None, :] - np.asarray(fit_means)[None, :, :],
        axis=2,
    )
    rows, cols = linear_sum_assignment(cost)
    return cost[rows, cols]
