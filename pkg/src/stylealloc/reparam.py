"""Unconstrained reparameterization and exact posterior gradients.

Gradient-based steps (the inner stick-breaking update and the whole-model
quasi-Newton fallback) work on a flat vector with no constraints:

* each ``beta`` column as its first entry plus log-increments, which keeps
  the column strictly ascending;
* each ``pi`` row as K-1 softmax logits with the last category pinned at 0;
* mean coefficient blocks as-is;
* each covariance as ``(log s1, log s2, atanh r)``.

``pack``/``unpack`` convert in both directions, and
``log_posterior_and_grad`` evaluates the unnormalized log posterior
together with its exact gradient in these coordinates.  The gradient of
the likelihood goes through the mixture responsibilities: holding the
per-point posterior over (style, pattern) fixed, the marginal likelihood
differentiates like a responsibility-weighted complete-data likelihood.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit, logsumexp

from .errors import DimensionMismatch, InvalidSimplex
from .model import (
    GaussianComponent,
    LsaParams,
    PatternSimplex,
    StickBreakingBetas,
    StyleSimplex,
    log_prior,
    loglik_grid,
    stack_observations,
)

_TINY = 1e-300


def unconstrained_dim(params):
    """Length of the packed vector for a parameter set of this shape."""
    k, m = params.n_styles, params.n_patterns
    r, s, p = params.n_receivers, params.n_servers, params.n_covariates
    return k * (m - 1) + r * (k - 1) + 2 * p * (m + r + s) + 3 * m


def pack_betas(beta):
    """Flatten an ordered coefficient matrix column by column.

    Each column becomes its first entry followed by the logs of its
    successive increments.
    """
    beta = np.asarray(beta, dtype=float)
    cols = []
    for j in range(beta.shape[1]):
        col = beta[:, j]
        diffs = np.diff(col)
        if np.any(diffs <= 0.0):
            raise DimensionMismatch("beta columns must be strictly increasing")
        cols.append(np.concatenate(([col[0]], np.log(diffs))))
    if not cols:
        return np.empty(0)
    return np.concatenate(cols)


def unpack_betas(u, n_styles, n_patterns):
    """Inverse of :func:`pack_betas`; returns a raw (K, M-1) array.

    Log-increments are clipped to [-25, 50]: the cap keeps line searches
    probing huge steps finite, and the floor keeps consecutive rows
    strictly separated even when an optimizer drives two styles together,
    so the result always satisfies the ordering constraint.  Round trips
    are exact for increments inside that range.
    """
    u = np.asarray(u, dtype=float)
    k, m = n_styles, n_patterns
    if u.shape != (k * (m - 1),):
        raise DimensionMismatch("packed beta vector has the wrong length")
    beta = np.empty((k, m - 1))
    for j in range(m - 1):
        block = u[j * k : (j + 1) * k]
        beta[0, j] = block[0]
        beta[1:, j] = block[0] + np.cumsum(np.exp(np.clip(block[1:], -25.0, 50.0)))
    return beta


def _pack_simplex_rows(rows):
    rows = np.asarray(rows, dtype=float)
    if np.any(rows <= 0.0):
        raise InvalidSimplex("packing needs strictly positive simplex entries")
    logs = np.log(rows)
    return (logs[:, :-1] - logs[:, -1:]).ravel()


def _unpack_simplex_rows(u, n_rows, n_cols):
    z = np.asarray(u, dtype=float).reshape(n_rows, n_cols - 1)
    logits = np.concatenate([z, np.zeros((n_rows, 1))], axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def pack(params):
    """Map a parameter set to its unconstrained vector."""
    parts = [pack_betas(params.betas.beta), _pack_simplex_rows(params.pi.pi)]
    for comp in params.components:
        parts.append(comp.alpha.ravel())
    parts.append(params.eta.ravel())
    parts.append(params.delta.ravel())
    for comp in params.components:
        s1, s2 = comp.scale_vec
        parts.append(
            np.array([math.log(s1), math.log(s2), math.atanh(comp.corr)])
        )
    return np.concatenate(parts)


def unpack(u, template):
    """Rebuild a parameter set from its unconstrained vector.

    Shapes and hyperparameters come from ``template``.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (unconstrained_dim(template),):
        raise DimensionMismatch("packed vector has the wrong length")
    k, m = template.n_styles, template.n_patterns
    r, s, p = template.n_receivers, template.n_servers, template.n_covariates
    pos = 0

    def take(count):
        nonlocal pos
        out = u[pos : pos + count]
        pos += count
        return out

    beta = unpack_betas(take(k * (m - 1)), k, m)
    pi = _unpack_simplex_rows(take(r * (k - 1)), r, k)
    alphas = [take(2 * p).reshape(2, p) for _ in range(m)]
    eta = take(r * 2 * p).reshape(r, 2, p)
    delta = take(s * 2 * p).reshape(s, 2, p)
    comps = []
    for j in range(m):
        block = take(3)
        lo, hi = -50.0, 50.0
        comps.append(
            GaussianComponent.from_scales(
                alphas[j],
                (
                    math.exp(min(max(block[0], lo), hi)),
                    math.exp(min(max(block[1], lo), hi)),
                ),
                math.tanh(block[2]),
            )
        )
    return LsaParams(
        betas=StickBreakingBetas(beta),
        pi=StyleSimplex(pi),
        components=tuple(comps),
        eta=eta,
        delta=delta,
        alpha0=template.alpha0,
        prior_scales=template.prior_scales,
        lkj_eta=template.lkj_eta,
        halft_scale=template.halft_scale,
    )


def stick_raw(beta):
    """Stick-breaking weights from a raw coefficient array, no validation.

    Same map as the typed version; used inside optimizers where transient
    iterates may violate the strict-ordering check.
    """
    beta = np.asarray(beta, dtype=float)
    k, m_minus_1 = beta.shape
    nu = expit(beta)
    one_minus = expit(-beta)
    remaining = np.ones((k, m_minus_1 + 1))
    np.cumprod(one_minus, axis=1, out=remaining[:, 1:])
    theta = np.empty((k, m_minus_1 + 1))
    theta[:, :m_minus_1] = nu * remaining[:, :m_minus_1]
    theta[:, m_minus_1] = remaining[:, m_minus_1]
    return theta


def theta_grad_to_beta(g_theta, beta):
    """Chain a gradient in pattern weights back to the coefficients.

    Parameters
    ----------
    g_theta : ndarray, shape (K, M)
        Partial derivatives with respect to each pattern weight.
    beta : ndarray, shape (K, M-1)

    Returns
    -------
    ndarray, shape (K, M-1)
    """
    beta = np.asarray(beta, dtype=float)
    g_theta = np.asarray(g_theta, dtype=float)
    k, m_minus_1 = beta.shape
    if g_theta.shape != (k, m_minus_1 + 1):
        raise DimensionMismatch("g_theta shape must be (K, M)")
    if m_minus_1 == 0:
        return np.zeros((k, 0))
    nu = expit(beta)
    one_minus = np.maximum(expit(-beta), _TINY)
    remaining = np.ones((k, m_minus_1))
    np.cumprod(one_minus[:, :-1], axis=1, out=remaining[:, 1:])
    theta = np.empty((k, m_minus_1 + 1))
    theta[:, :m_minus_1] = nu * remaining
    theta[:, m_minus_1] = remaining[:, -1] * one_minus[:, -1]
    # weight m depends on break j < m only through the leftover stick, so
    # d theta_m / d nu_j = -theta_m / (1 - nu_j)
    prod = g_theta * theta
    tail = np.cumsum(prod[:, ::-1], axis=1)[:, ::-1]
    suffix = tail[:, 1:]
    d_nu = g_theta[:, :m_minus_1] * remaining - suffix / one_minus
    return d_nu * nu * one_minus


def beta_grad_to_unconstrained(g_beta, beta):
    """Chain a gradient in beta to the packed (first entry, log-increment) form."""
    g_beta = np.asarray(g_beta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    k, m_minus_1 = beta.shape
    out = np.empty(k * m_minus_1)
    for j in range(m_minus_1):
        g = g_beta[:, j]
        tail = np.cumsum(g[::-1])[::-1]
        block = out[j * k : (j + 1) * k]
        block[0] = tail[0]
        if k > 1:
            block[1:] = tail[1:] * np.diff(beta[:, j])
    return out


def _simplex_grad_to_logits(g_rows, rows):
    inner = np.sum(rows * g_rows, axis=1, keepdims=True)
    full = rows * (g_rows - inner)
    return full[:, :-1].ravel()


def log_posterior_and_grad(params, data):
    """Unnormalized log posterior and its gradient in packed coordinates.

    Returns
    -------
    tuple
        ``(value, grad)`` with ``grad`` of length ``unconstrained_dim(params)``.
    """
    y, x, r_idx, s_idx = stack_observations(data)
    return log_posterior_and_grad_arrays(params, y, x, r_idx, s_idx)


def log_posterior_and_grad_arrays(params, y, x, r_idx, s_idx):
    """Array-level core of :func:`log_posterior_and_grad`."""
    n = y.shape[0]
    k, m = params.n_styles, params.n_patterns
    n_recv, n_serv, p = params.n_receivers, params.n_servers, params.n_covariates

    grid = loglik_grid(params, y, x, r_idx, s_idx)
    point_ll = logsumexp(grid.reshape(n, -1), axis=1)
    value = float(np.sum(point_ll)) + log_prior(params)
    resp = np.exp(grid - point_ll[:, None, None])

    style_resp = resp.sum(axis=2)
    rho = resp.sum(axis=1)
    n_km = resp.sum(axis=0)

    # pi block
    pi = params.pi.pi
    counts = np.zeros((n_recv, k))
    np.add.at(counts, r_idx, style_resp)
    g_pi = (counts + params.alpha0 - 1.0) / np.maximum(pi, _TINY)
    g_logits = _simplex_grad_to_logits(g_pi, pi)

    # beta block
    theta = params.theta.theta
    g_theta = n_km / np.maximum(theta, _TINY)
    g_beta = theta_grad_to_beta(g_theta, params.betas.beta) - params.betas.beta
    g_beta_u = beta_grad_to_unconstrained(g_beta, params.betas.beta)

    # mean blocks
    ps2 = params.prior_scales**2
    off = np.einsum("ndp,np->nd", params.eta[r_idx] - params.delta[s_idx], x)
    lams = []
    g_alpha = np.empty((m, 2, p))
    g_mu_sum = np.zeros((n, 2))
    cov_stats = []
    for j, comp in enumerate(params.components):
        lam = cho_solve((comp.sigma_chol, True), np.eye(2))
        lams.append(lam)
        diff = y - (x @ comp.alpha.T + off)
        g_mu = rho[:, j : j + 1] * (diff @ lam.T)
        g_alpha[j] = g_mu.T @ x - comp.alpha / ps2
        g_mu_sum += g_mu
        w_mat = np.einsum("n,ni,nj->ij", rho[:, j], diff, diff)
        cov_stats.append((w_mat, float(rho[:, j].sum())))

    outer = g_mu_sum[:, :, None] * x[:, None, :]
    g_eta = np.zeros((n_recv, 2, p))
    np.add.at(g_eta, r_idx, outer)
    g_eta -= params.eta / ps2
    g_delta = np.zeros((n_serv, 2, p))
    np.add.at(g_delta, s_idx, outer)
    g_delta = -g_delta - params.delta / ps2

    # covariance blocks
    g_cov = np.empty((m, 3))
    for j, comp in enumerate(params.components):
        lam = lams[j]
        w_mat, t_tot = cov_stats[j]
        g_sigma = 0.5 * (lam @ w_mat @ lam - t_tot * lam)
        s1, s2 = float(comp.scale_vec[0]), float(comp.scale_vec[1])
        r = comp.corr
        g11, g12, g22 = g_sigma[0, 0], g_sigma[0, 1], g_sigma[1, 1]
        d_s1 = 2.0 * g11 * s1 + 2.0 * g12 * s2 * r
        d_s2 = 2.0 * g22 * s2 + 2.0 * g12 * s1 * r
        d_r = 2.0 * g12 * s1 * s2
        gam2 = params.halft_scale**2
        d_s1 += -2.0 * s1 / (gam2 + s1 * s1)
        d_s2 += -2.0 * s2 / (gam2 + s2 * s2)
        d_r += -(params.lkj_eta - 1.0) * 2.0 * r / (1.0 - r * r)
        g_cov[j] = (d_s1 * s1, d_s2 * s2, d_r * (1.0 - r * r))

    grad = np.concatenate(
        [g_beta_u, g_logits]
        + [g_alpha[j].ravel() for j in range(m)]
        + [g_eta.ravel(), g_delta.ravel()]
        + [g_cov[j] for j in range(m)]
    )
    return value, grad
