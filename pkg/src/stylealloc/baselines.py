"""Flat baseline families sharing the component structure.

Three reference models bracket the two-level mixture from below:

``mvn``
    One Gaussian component per context (M = 1, no mixing).
``finite-mixture``
    M components under a single global weight vector shared by all
    receivers.
``mixed-membership``
    M components with one weight vector per receiver; equivalently the
    full model with the style level cut out.

All three reuse the same per-component mean structure
``(alpha_m + eta_i - delta_j) x``, the same covariance parameterization,
and the same priors on those blocks; weight vectors carry the same
symmetric Dirichlet prior as the style rows.  The families nest: an
``mvn`` is a one-component ``finite-mixture``, a ``finite-mixture`` is a
``mixed-membership`` whose rows are all equal, and a ``mixed-membership``
is the full model with one style per receiver worth of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import (
    AllZeroRow,
    DimensionMismatch,
    EmptyData,
    NoValidRestart,
    StyleAllocError,
)
from .model import (
    GaussianComponent,
    N_DIMS,
    component_log_densities,
    dirichlet_rows_logpdf,
    gaussian_matrix_logpdf,
    half_t1_logpdf,
    lkj_corr_logpdf,
    stack_observations,
)
from .inference import (
    COV_JITTER,
    FitConfig,
    FitReport,
    Responsibilities,
    WEIGHT_FLOOR,
    _update_gaussians_arrays,
)
from sklearn.cluster import KMeans

_TAGS = ("mvn", "finite-mixture", "mixed-membership")


@dataclass(frozen=True, eq=False)
class BaselineKind:
    """Which flat family, and how many components it carries."""

    tag: str
    n_patterns: int = 1

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise DimensionMismatch(f"tag must be one of {_TAGS}")
        if self.n_patterns < 1:
            raise DimensionMismatch("n_patterns must be at least 1")
        if self.tag == "mvn" and self.n_patterns != 1:
            raise DimensionMismatch("mvn has exactly one component")


@dataclass(frozen=True, eq=False)
class BaselineParams:
    """Parameters of one flat family.

    ``weights`` has shape (M,) for ``mvn`` and ``finite-mixture`` and
    (R, M) for ``mixed-membership``.
    """

    tag: str
    components: tuple
    weights: np.ndarray
    eta: np.ndarray
    delta: np.ndarray
    alpha0: float = 1.0
    prior_scales: float = 2.5
    lkj_eta: float = 1.0
    halft_scale: float = 2.0

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise DimensionMismatch(f"tag must be one of {_TAGS}")
        object.__setattr__(self, "components", tuple(self.components))
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        eta = np.array(self.eta, dtype=float)
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        delta = np.array(self.delta, dtype=float)
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        m = len(self.components)
        if self.tag == "mvn" and m != 1:
            raise DimensionMismatch("mvn has exactly one component")
        expect_ndim = 2 if self.tag == "mixed-membership" else 1
        if w.ndim != expect_ndim or w.shape[-1] != m:
            raise DimensionMismatch("weights shape disagrees with the family")
        rows = w if w.ndim == 2 else w[None, :]
        if np.any(rows < 0.0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-12):
            raise DimensionMismatch("weights must be simplex rows")
        p = self.components[0].alpha.shape[1]
        for name, arr in (("eta", eta), ("delta", delta)):
            if arr.ndim != 3 or arr.shape[1] != N_DIMS or arr.shape[2] != p:
                raise DimensionMismatch(f"{name} must have shape (n, {N_DIMS}, {p})")

    @property
    def n_patterns(self):
        return len(self.components)

    @property
    def n_receivers(self):
        return self.eta.shape[0]

    @property
    def n_servers(self):
        return self.delta.shape[0]

    @property
    def n_covariates(self):
        return self.components[0].alpha.shape[1]

    def replace(self, **changes):
        current = {
            "tag": self.tag,
            "components": self.components,
            "weights": self.weights,
            "eta": self.eta,
            "delta": self.delta,
            "alpha0": self.alpha0,
            "prior_scales": self.prior_scales,
            "lkj_eta": self.lkj_eta,
            "halft_scale": self.halft_scale,
        }
        current.update(changes)
        return BaselineParams(**current)


def _log_weight_rows(params, r_idx):
    with np.errstate(divide="ignore"):
        if params.weights.ndim == 2:
            if r_idx.size and int(r_idx.max()) >= params.weights.shape[0]:
                raise DimensionMismatch("receiver_id out of range for weights")
            return np.log(params.weights[r_idx])
        return np.broadcast_to(
            np.log(params.weights), (r_idx.shape[0], params.n_patterns)
        )


def _baseline_grid(params, y, x, r_idx, s_idx):
    if x.shape[1] != params.n_covariates:
        raise DimensionMismatch("covariate width disagrees with parameters")
    if s_idx.size and int(s_idx.max()) >= params.n_servers:
        raise DimensionMismatch("server_id out of range for delta")
    if r_idx.size and int(r_idx.max()) >= params.n_receivers:
        raise DimensionMismatch("receiver_id out of range for eta")
    dens = component_log_densities(
        params.components, params.eta, params.delta, y, x, r_idx, s_idx
    )
    return _log_weight_rows(params, r_idx) + dens


def baseline_loglik_points(params, data):
    """Exact per-observation log likelihood under a flat family."""
    y, x, r_idx, s_idx = stack_observations(data)
    return logsumexp(_baseline_grid(params, y, x, r_idx, s_idx), axis=1)


def baseline_loglik_point(params, obs):
    """Exact log likelihood of one observation under a flat family."""
    return float(baseline_loglik_points(params, [obs])[0])


def baseline_loglik(params, data):
    """Total log likelihood of a dataset under a flat family."""
    if len(data) == 0:
        raise EmptyData("no observations")
    return float(np.sum(baseline_loglik_points(params, data)))


def baseline_log_prior(params):
    """Log prior density; identical block priors to the full model."""
    rows = params.weights if params.weights.ndim == 2 else params.weights[None, :]
    total = dirichlet_rows_logpdf(rows, params.alpha0)
    total += gaussian_matrix_logpdf(params.eta, params.prior_scales)
    total += gaussian_matrix_logpdf(params.delta, params.prior_scales)
    for comp in params.components:
        total += gaussian_matrix_logpdf(comp.alpha, params.prior_scales)
        total += lkj_corr_logpdf(comp.corr, params.lkj_eta)
        total += half_t1_logpdf(float(comp.scale_vec[0]), params.halft_scale)
        total += half_t1_logpdf(float(comp.scale_vec[1]), params.halft_scale)
    return float(total)


def baseline_log_posterior(params, data):
    """Log likelihood plus log prior (unnormalized log posterior)."""
    return baseline_loglik(params, data) + baseline_log_prior(params)


def _m_step_weights(resp, r_idx, params):
    alpha0 = params.alpha0
    if params.tag == "mixed-membership":
        n_recv = params.n_receivers
        counts = np.zeros((n_recv, resp.shape[1]))
        np.add.at(counts, r_idx, resp)
        present = np.bincount(r_idx, minlength=n_recv)
        if np.any(present == 0):
            missing = int(np.flatnonzero(present == 0)[0])
            raise AllZeroRow(f"receiver {missing} has no observations")
        raw = np.maximum(counts + (alpha0 - 1.0), WEIGHT_FLOOR)
        return raw / raw.sum(axis=1, keepdims=True)
    raw = np.maximum(resp.sum(axis=0) + (alpha0 - 1.0), WEIGHT_FLOOR)
    return raw / raw.sum()


def _init_baseline(y, x, kind, n_recv, n_serv, cfg, seed_seq):
    n, p = x.shape
    m = kind.n_patterns
    rng = np.random.default_rng(seed_seq)
    if cfg.init_scheme == "user-supplied":
        params = cfg.init_params
        if not isinstance(params, BaselineParams) or params.tag != kind.tag:
            raise DimensionMismatch("init_params must match the requested family")
        if params.n_patterns != m or params.n_covariates != p:
            raise DimensionMismatch("init_params shape disagrees with fit request")
        return params
    global_cov = np.cov(y.T) if n > 1 else np.eye(N_DIMS)
    if cfg.init_scheme == "prior-draw":
        spread = float(np.std(y)) + 1e-3
        center = y.mean(axis=0)
        comps = []
        for _ in range(m):
            alpha = rng.normal(0.0, cfg.prior_scales, size=(N_DIMS, p))
            alpha[:, 0] = center + np.clip(alpha[:, 0], -2.0 * spread, 2.0 * spread)
            scales = np.clip(
                np.abs(rng.standard_cauchy(N_DIMS)) * cfg.halft_scale,
                0.1 * spread,
                10.0 * spread,
            )
            corr = 2.0 * rng.beta(cfg.lkj_eta, cfg.lkj_eta) - 1.0
            comps.append(GaussianComponent.from_scales(alpha, scales, corr))
        if kind.tag == "mixed-membership":
            weights = rng.dirichlet(np.full(m, cfg.alpha0), size=n_recv)
        else:
            weights = rng.dirichlet(np.full(m, cfg.alpha0))
    else:
        km_seed = int(seed_seq.generate_state(1)[0] % (2**31))
        n_centers = min(m, n)
        km = KMeans(
            n_clusters=n_centers, init="k-means++", n_init=1, random_state=km_seed
        )
        labels = km.fit_predict(y)
        centers = km.cluster_centers_
        order = np.lexsort((centers[:, 1], centers[:, 0]))
        comps = []
        for rank in range(m):
            c = order[rank % n_centers]
            pts = y[labels == c]
            cov = np.cov(pts.T) if pts.shape[0] > 2 else global_cov
            alpha = np.zeros((N_DIMS, p))
            alpha[:, 0] = centers[c]
            comps.append(
                GaussianComponent.from_covariance(alpha, cov, jitter=COV_JITTER)
            )
        if kind.tag == "mixed-membership":
            weights = np.full((n_recv, m), 1.0 / m)
        else:
            weights = np.full(m, 1.0 / m)
    if kind.tag == "mvn":
        weights = np.ones(1)
    return BaselineParams(
        tag=kind.tag,
        components=tuple(comps),
        weights=weights,
        eta=np.zeros((n_recv, N_DIMS, p)),
        delta=np.zeros((n_serv, N_DIMS, p)),
        alpha0=cfg.alpha0,
        prior_scales=cfg.prior_scales,
        lkj_eta=cfg.lkj_eta,
        halft_scale=cfg.halft_scale,
    )


def _baseline_em_single(y, x, r_idx, s_idx, kind, n_recv, n_serv, cfg, seed_seq):
    params = _init_baseline(y, x, kind, n_recv, n_serv, cfg, seed_seq)
    n = y.shape[0]
    grid = _baseline_grid(params, y, x, r_idx, s_idx)
    point_ll = logsumexp(grid, axis=1)
    resp = np.exp(grid - point_ll[:, None])
    obj = float(point_ll.sum()) + baseline_log_prior(params)
    trace = [obj]
    converged = False
    xxt = x[:, :, None] * x[:, None, :]
    for _ in range(cfg.max_iters):
        weights = _m_step_weights(resp, r_idx, params)
        comps, eta, delta = _update_gaussians_arrays(
            resp,
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
            weights=weights, components=comps, eta=eta, delta=delta
        )
        grid = _baseline_grid(params, y, x, r_idx, s_idx)
        point_ll = logsumexp(grid, axis=1)
        resp = np.exp(grid - point_ll[:, None])
        new_obj = float(point_ll.sum()) + baseline_log_prior(params)
        trace.append(new_obj)
        if abs(new_obj - obj) <= cfg.rel_tol * (abs(obj) + 1e-12):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    resp_obj = Responsibilities(r=resp, n_styles=1, n_patterns=kind.n_patterns)
    return params, trace, converged, resp_obj, point_ll


def baseline_fit(data, kind, config=None):
    """Fit one flat family by penalized EM with restarts.

    Same loop shape, initialization schemes, and restart bookkeeping as
    the full-model fit; the weight M step is global for ``finite-mixture``
    and per receiver for ``mixed-membership``.

    Returns
    -------
    FitReport
    """
    cfg = config if config is not None else FitConfig()
    if len(data) == 0:
        raise EmptyData("cannot fit an empty dataset")
    y, x, r_idx, s_idx = stack_observations(data)
    n_recv = int(r_idx.max()) + 1
    n_serv = int(s_idx.max()) + 1
    present = np.bincount(r_idx, minlength=n_recv)
    if np.any(present == 0):
        missing = int(np.flatnonzero(present == 0)[0])
        raise AllZeroRow(f"receiver {missing} has no observations")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)
    best = None
    restart_objectives = []
    failures = []
    for seed_seq in seeds:
        try:
            outcome = _baseline_em_single(
                y, x, r_idx, s_idx, kind, n_recv, n_serv, cfg, seed_seq
            )
        except StyleAllocError as exc:
            restart_objectives.append(float("nan"))
            failures.append(str(exc))
            continue
        restart_objectives.append(outcome[1][-1])
        if best is None or outcome[1][-1] > best[1][-1]:
            best = outcome
    if best is None:
        raise NoValidRestart(f"all restarts failed: {failures}")
    params, trace, converged, resp, point_ll = best
    return FitReport(
        params=params,
        objective_trace=[float(v) for v in trace],
        converged=converged,
        n_iters=len(trace) - 1,
        responsibilities=resp,
        per_point_loglik=point_ll,
        restart_objectives=restart_objectives,
        diagnostics={"restart_failures": failures},
    )
