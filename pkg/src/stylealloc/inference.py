"""Penalized EM fitting of the two-level mixture.

The objective is the exact marginal log likelihood plus the log prior; no
approximation of the marginal is involved anywhere.  The E step computes
posterior responsibilities over the joint (style, pattern) grid in closed
form.  The M step walks the blocks in a fixed order, each block moving to
(or toward) its exact conditional maximizer given the responsibilities:

* ``pi`` rows: Dirichlet-regularized counts, floored and renormalized;
* ``beta``: an inner quasi-Newton solve in the ordered parameterization,
  rejected if it would lower its own subproblem objective;
* mean coefficients: exact penalized weighted least squares, backfitting
  the pattern, receiver, and server blocks (each an exact conditional
  solve of a concave quadratic, so every sweep is monotone);
* covariances: an exact conditional maximum-a-posteriori solve per
  component via a three-parameter inner optimization, keeping the current
  value whenever no better point is found.

Every accepted step therefore does not decrease the objective, which makes
the whole loop monotone up to floating-point slack.  The one exception is
the empty-pattern rescue, which deliberately re-seeds a dead component's
mean and restarts the iteration; fits that trigger it report the count in
``diagnostics['rescues']``.

``fit`` restarts from multiple initializations and returns the best run.
``fit_gradient`` optimizes the same objective directly with a quasi-Newton
method in unconstrained coordinates; it exists as a fallback for fits
where EM stalls, and as an independent check that both optimizers climb
the same surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from sklearn.cluster import AgglomerativeClustering, KMeans

from .errors import (
    AllZeroRow,
    DimensionMismatch,
    EmptyData,
    InnerOptFailure,
    NoValidRestart,
    StyleAllocError,
)
from .model import (
    GaussianComponent,
    LsaParams,
    N_DIMS,
    StickBreakingBetas,
    StyleSimplex,
    half_t1_logpdf,
    lkj_corr_logpdf,
    log_prior,
    loglik_grid,
    stack_observations,
)
from .reparam import (
    beta_grad_to_unconstrained,
    log_posterior_and_grad_arrays,
    pack,
    pack_betas,
    stick_raw,
    theta_grad_to_beta,
    unpack,
    unpack_betas,
)
from .sampler import draw_params_for_shape

# Simplex floor applied to weight M-steps; keeps weights strictly interior
# so packing and log terms stay finite.
WEIGHT_FLOOR = 1e-12

# Ridge added to empirical covariances before factorization.
COV_JITTER = 1e-8

# A pattern whose total responsibility falls below this fraction of N is
# considered dead and gets re-seeded.
DEAD_PATTERN_FRAC = 1e-6

_INIT_SCHEMES = ("kmeans-pattern-means", "prior-draw", "user-supplied")


@dataclass(frozen=True, eq=False)
class FitConfig:
    """Knobs for EM and quasi-Newton fits.

    ``alpha0 … halft_scale`` become the hyperparameters of the fitted
    parameter set.  ``mean_sweeps`` counts backfitting rounds over the
    mean blocks per M step.  ``fit_offsets=False`` pins the receiver and
    server offsets at zero, which reduces the mean structure to shared
    pattern coefficients only.
    """

    max_iters: int = 500
    rel_tol: float = 1e-7
    n_restarts: int = 5
    init_scheme: str = "kmeans-pattern-means"
    seed: int = 0
    inner_max_iters: int = 200
    inner_gtol: float = 1e-8
    mean_sweeps: int = 2
    fit_offsets: bool = True
    init_params: object = None
    alpha0: float = 1.0
    prior_scales: float = 2.5
    lkj_eta: float = 1.0
    halft_scale: float = 2.0

    def __post_init__(self):
        if self.init_scheme not in _INIT_SCHEMES:
            raise DimensionMismatch(f"init_scheme must be one of {_INIT_SCHEMES}")
        if self.init_scheme == "user-supplied" and self.init_params is None:
            raise DimensionMismatch("user-supplied init needs init_params")
        if self.max_iters < 1 or self.n_restarts < 1 or self.mean_sweeps < 1:
            raise DimensionMismatch("iteration counts must be at least 1")
        for name in ("rel_tol", "inner_gtol", "alpha0", "prior_scales", "lkj_eta", "halft_scale"):
            if not float(getattr(self, name)) > 0.0:
                raise DimensionMismatch(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Posterior weights over the joint (style, pattern) grid.

    ``r`` has shape (N, K*M) with the pattern index fastest; each row sums
    to one.
    """

    r: np.ndarray
    n_styles: int
    n_patterns: int

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        r.setflags(write=False)
        object.__setattr__(self, "r", r)
        if r.ndim != 2 or r.shape[1] != self.n_styles * self.n_patterns:
            raise DimensionMismatch("responsibility matrix has the wrong width")
        if np.any(r < 0.0):
            raise DimensionMismatch("responsibilities must be non-negative")
        sums = r.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise DimensionMismatch("responsibility rows must sum to 1")

    @property
    def grid(self):
        """View shaped (N, K, M)."""
        return self.r.reshape(self.r.shape[0], self.n_styles, self.n_patterns)

    @property
    def pattern_marginals(self):
        """Per-point pattern weights, styles summed out; shape (N, M)."""
        return self.grid.sum(axis=1)


@dataclass(eq=False)
class FitReport:
    """Everything a fit produced.

    ``objective_trace`` holds the penalized objective after initialization
    and after every EM iteration of the winning restart.
    """

    params: object
    objective_trace: list
    converged: bool
    n_iters: int
    responsibilities: Responsibilities
    per_point_loglik: np.ndarray
    restart_objectives: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def objective(self):
        return self.objective_trace[-1]


def _e_arrays(params, y, x, r_idx, s_idx):
    grid = loglik_grid(params, y, x, r_idx, s_idx)
    n = grid.shape[0]
    point_ll = logsumexp(grid.reshape(n, -1), axis=1)
    resp = np.exp(grid - point_ll[:, None, None])
    return resp, point_ll


def e_step(params, data):
    """Exact posterior responsibilities of every observation.

    Returns
    -------
    Responsibilities
    """
    y, x, r_idx, s_idx = stack_observations(data)
    resp, _ = _e_arrays(params, y, x, r_idx, s_idx)
    return Responsibilities(
        r=resp.reshape(resp.shape[0], -1),
        n_styles=params.n_styles,
        n_patterns=params.n_patterns,
    )


def _m_step_pi_arrays(style_resp, r_idx, n_receivers, alpha0):
    k = style_resp.shape[1]
    counts = np.zeros((n_receivers, k))
    np.add.at(counts, r_idx, style_resp)
    present = np.bincount(r_idx, minlength=n_receivers)
    if np.any(present == 0):
        missing = int(np.flatnonzero(present == 0)[0])
        raise AllZeroRow(f"receiver {missing} has no observations")
    raw = np.maximum(counts + (alpha0 - 1.0), WEIGHT_FLOOR)
    return raw / raw.sum(axis=1, keepdims=True)


def m_step_pi(resp, data, alpha0, n_receivers=None):
    """Dirichlet-regularized style weights, one row per receiver.

    Maximizes the weight block of the EM objective: responsibilities
    summed over patterns give per-style counts, the prior adds
    ``alpha0 - 1``, and rows are floored at a tiny epsilon before
    renormalizing so they stay strictly interior.

    Returns
    -------
    StyleSimplex
    """
    r_idx = np.array([obs.receiver_id for obs in data], dtype=np.intp)
    if r_idx.shape[0] != resp.r.shape[0]:
        raise DimensionMismatch("responsibilities and data disagree on N")
    if n_receivers is None:
        n_receivers = int(r_idx.max()) + 1 if r_idx.size else 0
    pi = _m_step_pi_arrays(resp.grid.sum(axis=2), r_idx, n_receivers, alpha0)
    return StyleSimplex(pi)


def _beta_objective(u, n_km, n_styles, n_patterns):
    beta = unpack_betas(u, n_styles, n_patterns)
    theta = stick_raw(beta)
    safe = np.maximum(theta, 1e-300)
    value = float(np.sum(n_km * np.log(safe))) - 0.5 * float(np.sum(beta**2))
    g_theta = n_km / safe
    g_beta = theta_grad_to_beta(g_theta, beta) - beta
    grad = beta_grad_to_unconstrained(g_beta, beta)
    return -value, -grad


def m_step_theta(resp, betas, inner_max_iters=200, inner_gtol=1e-8):
    """Inner quasi-Newton update of the stick-breaking coefficients.

    Maximizes the responsibility-weighted log pattern weights plus the
    standard normal penalty, in the ordered (first entry, log-increment)
    coordinates.

    Raises
    ------
    InnerOptFailure
        If the optimizer cannot match the starting objective or its
        result does not form a valid ordered matrix; callers keep the
        previous coefficients in that case.
    """
    k, m = betas.n_styles, betas.n_patterns
    if m == 1:
        return betas
    n_km = resp.grid.sum(axis=0)
    if n_km.shape != (k, m):
        raise DimensionMismatch("responsibilities disagree with beta shape")
    u0 = pack_betas(betas.beta)
    f0, _ = _beta_objective(u0, n_km, k, m)
    result = minimize(
        _beta_objective,
        u0,
        args=(n_km, k, m),
        method="L-BFGS-B",
        jac=True,
        options={"maxiter": inner_max_iters, "gtol": inner_gtol},
    )
    if not np.isfinite(result.fun) or result.fun > f0 + 1e-9 * (1.0 + abs(f0)):
        raise InnerOptFailure("stick-breaking update failed to improve")
    try:
        return StickBreakingBetas(unpack_betas(result.x, k, m))
    except StyleAllocError as exc:
        raise InnerOptFailure("stick-breaking update left degenerate columns") from exc


def _kron2_blocks(lam, g):
    p = g.shape[0]
    out = np.empty((2 * p, 2 * p))
    out[:p, :p] = lam[0, 0] * g
    out[:p, p:] = lam[0, 1] * g
    out[p:, :p] = lam[1, 0] * g
    out[p:, p:] = lam[1, 1] * g
    return out


def _lam_of(s1, s2, r):
    det = (s1 * s2) ** 2 * (1.0 - r * r)
    return (
        np.array([[s2 * s2, -s1 * s2 * r], [-s1 * s2 * r, s1 * s1]]) / det,
        det,
    )


def _cov_objective(u, w_mat, t_tot, halft_scale, lkj_eta):
    # clamp log-scales so line-search probes stay finite
    s1 = math.exp(min(max(u[0], -50.0), 50.0))
    s2 = math.exp(min(max(u[1], -50.0), 50.0))
    r = math.tanh(u[2])
    r = max(min(r, 1.0 - 1e-12), -1.0 + 1e-12)
    lam, det = _lam_of(s1, s2, r)
    value = -0.5 * (t_tot * math.log(det) + float(np.sum(lam * w_mat)))
    value += half_t1_logpdf(s1, halft_scale) + half_t1_logpdf(s2, halft_scale)
    value += lkj_corr_logpdf(r, lkj_eta)
    g_sigma = 0.5 * (lam @ w_mat @ lam - t_tot * lam)
    g11, g12, g22 = g_sigma[0, 0], g_sigma[0, 1], g_sigma[1, 1]
    d_s1 = 2.0 * g11 * s1 + 2.0 * g12 * s2 * r - 2.0 * s1 / (halft_scale**2 + s1 * s1)
    d_s2 = 2.0 * g22 * s2 + 2.0 * g12 * s1 * r - 2.0 * s2 / (halft_scale**2 + s2 * s2)
    d_r = 2.0 * g12 * s1 * s2 - (lkj_eta - 1.0) * 2.0 * r / (1.0 - r * r)
    grad = np.array([d_s1 * s1, d_s2 * s2, d_r * (1.0 - r * r)])
    return -value, -grad


def _cov_map(w_mat, t_tot, comp, halft_scale, lkj_eta, inner_max_iters, inner_gtol):
    """Exact conditional covariance update; never returns a worse point."""
    s1, s2 = float(comp.scale_vec[0]), float(comp.scale_vec[1])
    r0 = max(min(comp.corr, 0.999), -0.999)
    u_curr = np.array([math.log(s1), math.log(s2), math.atanh(r0)])
    f_curr, _ = _cov_objective(u_curr, w_mat, t_tot, halft_scale, lkj_eta)
    starts = [u_curr]
    if t_tot > 1e-12:
        emp = w_mat / t_tot + COV_JITTER * np.eye(2)
        e1, e2 = math.sqrt(emp[0, 0]), math.sqrt(emp[1, 1])
        er = max(min(emp[0, 1] / (e1 * e2), 0.99), -0.99)
        starts.append(np.array([math.log(e1), math.log(e2), math.atanh(er)]))
    best_f, best_u = f_curr, u_curr
    for u0 in starts:
        result = minimize(
            _cov_objective,
            u0,
            args=(w_mat, t_tot, halft_scale, lkj_eta),
            method="L-BFGS-B",
            jac=True,
            options={"maxiter": inner_max_iters, "gtol": inner_gtol},
        )
        if np.isfinite(result.fun) and result.fun < best_f:
            best_f, best_u = result.fun, result.x
    s1n = math.exp(min(max(best_u[0], -50.0), 50.0))
    s2n = math.exp(min(max(best_u[1], -50.0), 50.0))
    return s1n, s2n, math.tanh(best_u[2])


def _update_gaussians_arrays(
    rho,
    y,
    x,
    r_idx,
    s_idx,
    components,
    eta,
    delta,
    prior_scales,
    halft_scale,
    lkj_eta,
    fit_offsets=True,
    mean_sweeps=2,
    inner_max_iters=200,
    inner_gtol=1e-8,
    xxt=None,
):
    """Shared Gaussian-block M step over a flat (N, M) responsibility array."""
    n, p = x.shape
    m_count = rho.shape[1]
    n_recv = eta.shape[0]
    n_serv = delta.shape[0]
    ps2 = prior_scales**2
    if xxt is None:
        xxt = x[:, :, None] * x[:, None, :]
    alphas = [np.array(c.alpha) for c in components]
    scales = [(float(c.scale_vec[0]), float(c.scale_vec[1])) for c in components]
    corrs = [c.corr for c in components]
    eta = np.array(eta)
    delta = np.array(delta)
    lams = [_lam_of(s[0], s[1], r)[0] for s, r in zip(scales, corrs)]

    g_m = np.empty((m_count, p, p))
    for j in range(m_count):
        g_m[j] = np.einsum("n,npq->pq", rho[:, j], xxt)

    for _ in range(mean_sweeps):
        # pattern coefficients, independent across patterns given offsets
        off = np.einsum("ndp,np->nd", eta[r_idx] - delta[s_idx], x)
        resid = y - off
        for j in range(m_count):
            lam = lams[j]
            a_mat = _kron2_blocks(lam, g_m[j]) + np.eye(2 * p) / ps2
            weighted = rho[:, j : j + 1] * (resid @ lam.T)
            rhs = np.concatenate([x.T @ weighted[:, 0], x.T @ weighted[:, 1]])
            alphas[j] = np.linalg.solve(a_mat, rhs).reshape(2, p)
        if not fit_offsets:
            break

        # grouped sufficient statistics for the offset solves
        g_rm = np.zeros((n_recv, m_count, p, p))
        g_sm = np.zeros((n_serv, m_count, p, p))
        for j in range(m_count):
            contrib = rho[:, j, None, None] * xxt
            np.add.at(g_rm[:, j], r_idx, contrib)
            np.add.at(g_sm[:, j], s_idx, contrib)

        # receiver offsets
        rhs_r = np.zeros((n_recv, 2 * p))
        dx = np.einsum("ndp,np->nd", delta[s_idx], x)
        for j in range(m_count):
            f_res = y - x @ alphas[j].T + dx
            weighted = rho[:, j : j + 1] * (f_res @ lams[j].T)
            block = np.concatenate(
                [weighted[:, 0:1] * x, weighted[:, 1:2] * x], axis=1
            )
            np.add.at(rhs_r, r_idx, block)
        for i in range(n_recv):
            a_mat = np.eye(2 * p) / ps2
            for j in range(m_count):
                a_mat += _kron2_blocks(lams[j], g_rm[i, j])
            eta[i] = np.linalg.solve(a_mat, rhs_r[i]).reshape(2, p)

        # server offsets
        rhs_s = np.zeros((n_serv, 2 * p))
        ex = np.einsum("ndp,np->nd", eta[r_idx], x)
        for j in range(m_count):
            g_res = y - x @ alphas[j].T - ex
            weighted = rho[:, j : j + 1] * (g_res @ lams[j].T)
            block = np.concatenate(
                [weighted[:, 0:1] * x, weighted[:, 1:2] * x], axis=1
            )
            np.add.at(rhs_s, s_idx, block)
        for i in range(n_serv):
            a_mat = np.eye(2 * p) / ps2
            for j in range(m_count):
                a_mat += _kron2_blocks(lams[j], g_sm[i, j])
            delta[i] = np.linalg.solve(a_mat, -rhs_s[i]).reshape(2, p)

    # covariances from final residuals
    new_comps = []
    off = np.einsum("ndp,np->nd", eta[r_idx] - delta[s_idx], x)
    for j in range(m_count):
        diff = y - (x @ alphas[j].T + off)
        w_mat = np.einsum("n,ni,nj->ij", rho[:, j], diff, diff)
        t_tot = float(rho[:, j].sum())
        template = GaussianComponent.from_scales(alphas[j], scales[j], corrs[j])
        s1, s2, r = _cov_map(
            w_mat, t_tot, template, halft_scale, lkj_eta, inner_max_iters, inner_gtol
        )
        new_comps.append(GaussianComponent.from_scales(alphas[j], (s1, s2), r))
    return tuple(new_comps), eta, delta


def m_step_gaussians(resp, data, params, config=None):
    """Gaussian-block M step: pattern coefficients, offsets, covariances.

    Returns
    -------
    tuple
        ``(components, eta, delta)`` maximizing (means) or not decreasing
        (covariances) their blocks of the EM objective.
    """
    cfg = config if config is not None else FitConfig()
    y, x, r_idx, s_idx = stack_observations(data)
    if resp.r.shape[0] != y.shape[0]:
        raise DimensionMismatch("responsibilities and data disagree on N")
    return _update_gaussians_arrays(
        resp.pattern_marginals,
        y,
        x,
        r_idx,
        s_idx,
        params.components,
        params.eta,
        params.delta,
        params.prior_scales,
        params.halft_scale,
        params.lkj_eta,
        fit_offsets=cfg.fit_offsets,
        mean_sweeps=cfg.mean_sweeps,
        inner_max_iters=cfg.inner_max_iters,
        inner_gtol=cfg.inner_gtol,
    )


def _sorted_beta_draw(rng, k, m):
    return np.sort(rng.standard_normal((k, m - 1)), axis=0)


def _init_kmeans(y, x, r_idx, s_idx, k, m, n_recv, n_serv, cfg, seed_seq):
    n, p = x.shape
    rng = np.random.default_rng(seed_seq)
    km_seed = int(seed_seq.generate_state(1)[0] % (2**31))
    n_centers = min(k * m, n)
    km = KMeans(n_clusters=n_centers, init="k-means++", n_init=1, random_state=km_seed)
    labels = km.fit_predict(y)
    centers = km.cluster_centers_
    sizes = np.bincount(labels, minlength=n_centers).astype(float)
    if m == 1 or n_centers <= m:
        groups = np.arange(n_centers) % m
    else:
        groups = AgglomerativeClustering(n_clusters=m, linkage="ward").fit_predict(
            centers
        )
    means = np.zeros((m, N_DIMS))
    for g in range(m):
        mask = groups == g
        if mask.any():
            means[g] = np.average(centers[mask], axis=0, weights=sizes[mask])
        else:
            means[g] = y.mean(axis=0)
    order = np.lexsort((means[:, 1], means[:, 0]))
    global_cov = np.cov(y.T) if n > 1 else np.eye(N_DIMS)
    comps = []
    for rank, g in enumerate(order):
        member = np.isin(labels, np.flatnonzero(groups == g))
        pts = y[member]
        cov = np.cov(pts.T) if pts.shape[0] > 2 else global_cov
        alpha = np.zeros((N_DIMS, p))
        alpha[:, 0] = means[g]
        comps.append(GaussianComponent.from_covariance(alpha, cov, jitter=COV_JITTER))
    beta = _sorted_beta_draw(rng, k, m)
    pi = np.full((n_recv, k), 1.0 / k)
    return LsaParams(
        betas=StickBreakingBetas(beta),
        pi=StyleSimplex(pi),
        components=tuple(comps),
        eta=np.zeros((n_recv, N_DIMS, p)),
        delta=np.zeros((n_serv, N_DIMS, p)),
        alpha0=cfg.alpha0,
        prior_scales=cfg.prior_scales,
        lkj_eta=cfg.lkj_eta,
        halft_scale=cfg.halft_scale,
    )


def _init_prior_draw(y, x, k, m, n_recv, n_serv, cfg, seed_seq):
    rng = np.random.default_rng(seed_seq)
    params = draw_params_for_shape(
        k,
        m,
        n_recv,
        n_serv,
        x.shape[1],
        rng,
        alpha0=cfg.alpha0,
        prior_scales=cfg.prior_scales,
        lkj_eta=cfg.lkj_eta,
        halft_scale=cfg.halft_scale,
    )
    # prior scale draws are heavy tailed; clamp them to a sane range and
    # pull component intercepts toward the data so EM has traction
    spread = float(np.std(y)) + 1e-3
    center = y.mean(axis=0)
    comps = []
    for comp in params.components:
        scales = np.clip(comp.scale_vec, 0.1 * spread, 10.0 * spread)
        alpha = np.array(comp.alpha)
        alpha[:, 0] = center + np.clip(alpha[:, 0], -2.0 * spread, 2.0 * spread)
        comps.append(GaussianComponent.from_scales(alpha, scales, comp.corr))
    return params.replace(components=tuple(comps))


def _initial_params(y, x, r_idx, s_idx, k, m, n_recv, n_serv, cfg, seed_seq):
    if cfg.init_scheme == "user-supplied":
        params = cfg.init_params
        if params.n_styles != k or params.n_patterns != m:
            raise DimensionMismatch("init_params shape disagrees with fit request")
        if params.n_covariates != x.shape[1]:
            raise DimensionMismatch("init_params covariate width disagrees with data")
        if params.n_receivers != n_recv or params.n_servers != n_serv:
            raise DimensionMismatch("init_params roster sizes disagree with data")
        return params
    if cfg.init_scheme == "prior-draw":
        return _init_prior_draw(y, x, k, m, n_recv, n_serv, cfg, seed_seq)
    return _init_kmeans(y, x, r_idx, s_idx, k, m, n_recv, n_serv, cfg, seed_seq)


def _rescue_dead_patterns(params, dead, point_ll, y, x, r_idx, s_idx):
    """Re-seed the mean of each dead pattern at a poorly explained point."""
    order = np.argsort(point_ll)
    comps = list(params.components)
    used = 0
    for j in np.flatnonzero(dead):
        idx = int(order[min(used, len(order) - 1)])
        used += 1
        x0 = x[idx, 0]
        comp = comps[j]
        alpha = np.array(comp.alpha)
        if abs(x0) > 1e-12:
            off = (params.eta[r_idx[idx]] - params.delta[s_idx[idx]]) @ x[idx]
            rest = alpha[:, 1:] @ x[idx, 1:] if alpha.shape[1] > 1 else 0.0
            alpha[:, 0] = (y[idx] - off - rest) / x0
        comps[j] = GaussianComponent(
            alpha=alpha, sigma_chol=comp.sigma_chol, scale_vec=comp.scale_vec
        )
    return params.replace(components=tuple(comps))


def _em_single(y, x, r_idx, s_idx, k, m, n_recv, n_serv, cfg, seed_seq):
    params = _initial_params(y, x, r_idx, s_idx, k, m, n_recv, n_serv, cfg, seed_seq)
    n = y.shape[0]
    resp, point_ll = _e_arrays(params, y, x, r_idx, s_idx)
    obj = float(point_ll.sum()) + log_prior(params)
    trace = [obj]
    converged = False
    rescues = 0
    inner_failures = 0
    xxt = x[:, :, None] * x[:, None, :]
    for _ in range(cfg.max_iters):
        dead = resp.sum(axis=(0, 1)) < DEAD_PATTERN_FRAC * n
        if dead.any():
            params = _rescue_dead_patterns(params, dead, point_ll, y, x, r_idx, s_idx)
            resp, point_ll = _e_arrays(params, y, x, r_idx, s_idx)
            rescues += int(dead.sum())
            obj = float(point_ll.sum()) + log_prior(params)
            trace[-1] = obj

        style_resp = resp.sum(axis=2)
        rho = resp.sum(axis=1)
        new_pi = StyleSimplex(
            _m_step_pi_arrays(style_resp, r_idx, n_recv, cfg.alpha0)
        )
        resp_obj = Responsibilities(
            r=resp.reshape(n, -1), n_styles=k, n_patterns=m
        )
        try:
            new_betas = m_step_theta(
                resp_obj, params.betas, cfg.inner_max_iters, cfg.inner_gtol
            )
        except InnerOptFailure:
            new_betas = params.betas
            inner_failures += 1
        comps, eta, delta = _update_gaussians_arrays(
            rho,
            y,
            x,
            r_idx,
            s_idx,
            params.components,
            params.eta,
            params.delta,
            cfg.prior_scales,
            cfg.halft_scale,
            cfg.lkj_eta,
            fit_offsets=cfg.fit_offsets,
            mean_sweeps=cfg.mean_sweeps,
            inner_max_iters=cfg.inner_max_iters,
            inner_gtol=cfg.inner_gtol,
            xxt=xxt,
        )
        params = params.replace(
            betas=new_betas, pi=new_pi, components=comps, eta=eta, delta=delta
        )
        resp, point_ll = _e_arrays(params, y, x, r_idx, s_idx)
        new_obj = float(point_ll.sum()) + log_prior(params)
        trace.append(new_obj)
        if abs(new_obj - obj) <= cfg.rel_tol * (abs(obj) + 1e-12):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    resp_obj = Responsibilities(r=resp.reshape(n, -1), n_styles=k, n_patterns=m)
    diagnostics = {"rescues": rescues, "inner_opt_failures": inner_failures}
    return params, trace, converged, resp_obj, point_ll, diagnostics


def _prepare_fit(data, n_styles, n_patterns):
    if len(data) == 0:
        raise EmptyData("cannot fit an empty dataset")
    if n_styles < 1 or n_patterns < 1:
        raise DimensionMismatch("style and pattern counts must be at least 1")
    y, x, r_idx, s_idx = stack_observations(data)
    n_recv = int(r_idx.max()) + 1
    n_serv = int(s_idx.max()) + 1
    present = np.bincount(r_idx, minlength=n_recv)
    if np.any(present == 0):
        missing = int(np.flatnonzero(present == 0)[0])
        raise AllZeroRow(f"receiver {missing} has no observations")
    return y, x, r_idx, s_idx, n_recv, n_serv


def fit(data, n_styles, n_patterns, config=None):
    """Fit the two-level mixture by penalized EM with restarts.

    Runs ``config.n_restarts`` independent initializations (seeded
    deterministically from ``config.seed``) and keeps the one with the
    best final objective.  Restarts that fail with a package error are
    recorded as NaN in ``restart_objectives``; every restart's objective
    trace is kept in ``diagnostics['restart_traces']``.

    Returns
    -------
    FitReport

    Raises
    ------
    NoValidRestart
        If every restart failed.
    """
    cfg = config if config is not None else FitConfig()
    y, x, r_idx, s_idx, n_recv, n_serv = _prepare_fit(data, n_styles, n_patterns)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)
    best = None
    restart_objectives = []
    restart_traces = []
    failures = []
    for seed_seq in seeds:
        try:
            outcome = _em_single(
                y, x, r_idx, s_idx, n_styles, n_patterns, n_recv, n_serv, cfg, seed_seq
            )
        except StyleAllocError as exc:
            restart_objectives.append(float("nan"))
            restart_traces.append([])
            failures.append(str(exc))
            continue
        restart_objectives.append(outcome[1][-1])
        restart_traces.append([float(v) for v in outcome[1]])
        if best is None or outcome[1][-1] > best[1][-1]:
            best = outcome
    if best is None:
        raise NoValidRestart(f"all restarts failed: {failures}")
    params, trace, converged, resp, point_ll, diagnostics = best
    diagnostics = dict(diagnostics)
    diagnostics["restart_failures"] = failures
    diagnostics["restart_traces"] = restart_traces
    return FitReport(
        params=params,
        objective_trace=[float(v) for v in trace],
        converged=converged,
        n_iters=len(trace) - 1,
        responsibilities=resp,
        per_point_loglik=point_ll,
        restart_objectives=restart_objectives,
        diagnostics=diagnostics,
    )


def fit_gradient(data, n_styles, n_patterns, config=None):
    """Fit by direct quasi-Newton ascent on the penalized objective.

    Same initialization and restart scheme as :func:`fit`, but all blocks
    move together through the unconstrained parameterization.  Meant as a
    fallback for fits where EM stalls and as a cross-check of the
    objective and its gradient.

    Returns
    -------
    FitReport
    """
    cfg = config if config is not None else FitConfig()
    y, x, r_idx, s_idx, n_recv, n_serv = _prepare_fit(data, n_styles, n_patterns)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)
    best = None
    restart_objectives = []
    failures = []
    for seed_seq in seeds:
        try:
            params0 = _initial_params(
                y, x, r_idx, s_idx, n_styles, n_patterns, n_recv, n_serv, cfg, seed_seq
            )
            # interior starting weights keep the packing finite
            pi0 = np.maximum(params0.pi.pi, 1e-10)
            params0 = params0.replace(
                pi=StyleSimplex(pi0 / pi0.sum(axis=1, keepdims=True))
            )
            u0 = pack(params0)
            template = params0

            def neg_obj(u):
                try:
                    candidate = unpack(u, template)
                    value, grad = log_posterior_and_grad_arrays(
                        candidate, y, x, r_idx, s_idx
                    )
                except (StyleAllocError, FloatingPointError):
                    return np.inf, np.zeros_like(u)
                if not np.isfinite(value):
                    return np.inf, np.zeros_like(u)
                return -value, -grad

            trace = [-neg_obj(u0)[0]]
            result = minimize(
                neg_obj,
                u0,
                method="L-BFGS-B",
                jac=True,
                options={"maxiter": cfg.max_iters, "gtol": cfg.inner_gtol},
            )
            params = unpack(result.x, template)
            trace.append(float(-result.fun))
            converged = bool(result.success)
        except StyleAllocError as exc:
            restart_objectives.append(float("nan"))
            failures.append(str(exc))
            continue
        restart_objectives.append(trace[-1])
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace, converged)
    if best is None:
        raise NoValidRestart(f"all restarts failed: {failures}")
    params, trace, converged = best
    resp, point_ll = _e_arrays(params, y, x, r_idx, s_idx)
    n = y.shape[0]
    return FitReport(
        params=params,
        objective_trace=[float(v) for v in trace],
        converged=converged,
        n_iters=len(trace) - 1,
        responsibilities=Responsibilities(
            r=resp.reshape(n, -1), n_styles=n_styles, n_patterns=n_patterns
        ),
        per_point_loglik=point_ll,
        restart_objectives=restart_objectives,
        diagnostics={"restart_failures": failures},
    )


def map_pattern_assignments(report):
    """Hard (style, pattern) assignment of each observation.

    Returns
    -------
    ndarray, shape (N, 2)
        Column 0 holds style indices, column 1 pattern indices, both by
        joint posterior mode.
    """
    resp = report.responsibilities
    flat = np.argmax(resp.r, axis=1)
    styles, patterns = np.divmod(flat, resp.n_patterns)
    return np.stack([styles, patterns], axis=1)
