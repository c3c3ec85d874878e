"""Synthetic data generation and predictive density grids.

Sampling follows the generative story exactly: draw (or accept) a full
parameter set, then for every receiver draw covariate contexts, an
opposing server, a style, a pattern, and finally a Gaussian location.
Each receiver consumes an independent child RNG stream spawned from one
master seed, so per-receiver draws do not depend on scheduling or on how
many points other receivers produce.

Covariate schemes
-----------------
``intercept-only``
    ``x = [1]``; every point shares one context.
``standard``
    Serve cell (court side x direction, 6 values) and surface (3 values)
    drawn uniformly and encoded as an intercept plus 5 + 2 reference-coded
    indicators (P = 8), matching the data-io encoder.
``indicators``
    Generic product of uniform categorical factors given by
    ``category_counts``; an intercept plus reference-coded indicators per
    factor.  In-memory only (no CSV category names).
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGrid, DimensionMismatch
from .model import (
    GaussianComponent,
    LsaParams,
    N_DIMS,
    ReturnObservation,
    StickBreakingBetas,
    StyleSimplex,
)

_SCHEMES = ("intercept-only", "standard", "indicators")


def scheme_width(covariate_scheme, category_counts=()):
    """Number of encoded covariate columns produced by a scheme."""
    if covariate_scheme == "intercept-only":
        return 1
    if covariate_scheme == "standard":
        return 8
    if covariate_scheme == "indicators":
        if not category_counts:
            raise DimensionMismatch("indicators scheme needs category_counts")
        return 1 + sum(int(c) - 1 for c in category_counts)
    raise DimensionMismatch(f"unknown covariate scheme {covariate_scheme!r}")


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Shape, covariate scheme, and seed for one synthetic dataset.

    ``n_points_per_receiver`` is either one int shared by all receivers or
    a length-R sequence.  When ``param_source`` is ``"explicit"``,
    ``params`` supplies the truth and the shape fields must agree with it.
    """

    n_styles: int
    n_patterns: int
    n_receivers: int
    n_servers: int
    n_points_per_receiver: object
    covariate_scheme: str = "intercept-only"
    category_counts: tuple = ()
    rng_seed: int = 0
    param_source: str = "prior"
    params: LsaParams | None = None
    serve_number: int = 1
    alpha0: float = 1.0
    prior_scales: float = 2.5
    lkj_eta: float = 1.0
    halft_scale: float = 2.0

    def __post_init__(self):
        if self.covariate_scheme not in _SCHEMES:
            raise DimensionMismatch(
                f"covariate scheme must be one of {_SCHEMES}"
            )
        if self.param_source not in ("prior", "explicit"):
            raise DimensionMismatch("param_source must be 'prior' or 'explicit'")
        if self.param_source == "explicit" and self.params is None:
            raise DimensionMismatch("explicit param_source needs params")
        for name in ("n_styles", "n_patterns", "n_receivers", "n_servers"):
            if int(getattr(self, name)) < 1:
                raise DimensionMismatch(f"{name} must be at least 1")
        counts = self.points_per_receiver
        if np.any(counts < 1):
            raise DimensionMismatch("every receiver needs at least one point")
        if self.serve_number not in (1, 2):
            raise DimensionMismatch("serve_number must be 1 or 2")
        if self.params is not None:
            p = self.params
            if (
                p.n_styles != self.n_styles
                or p.n_patterns != self.n_patterns
                or p.n_receivers != self.n_receivers
                or p.n_servers != self.n_servers
            ):
                raise DimensionMismatch("params shape disagrees with config")
            if p.n_covariates != self.n_covariates:
                raise DimensionMismatch(
                    "params covariate width disagrees with the scheme"
                )

    @property
    def points_per_receiver(self):
        counts = np.asarray(self.n_points_per_receiver, dtype=int)
        if counts.ndim == 0:
            counts = np.full(self.n_receivers, int(counts))
        if counts.shape != (self.n_receivers,):
            raise DimensionMismatch(
                "n_points_per_receiver must be scalar or length n_receivers"
            )
        return counts

    @property
    def n_covariates(self):
        return scheme_width(self.covariate_scheme, self.category_counts)

    @property
    def factor_counts(self):
        """Categorical factor sizes behind the covariate encoding."""
        if self.covariate_scheme == "intercept-only":
            return ()
        if self.covariate_scheme == "standard":
            return (6, 3)
        return tuple(int(c) for c in self.category_counts)


@dataclass(frozen=True, eq=False)
class Latents:
    """True style and pattern assignments aligned with a sampled dataset."""

    styles: np.ndarray
    patterns: np.ndarray


@dataclass(frozen=True, eq=False)
class GridSpec:
    """A rectangular evaluation grid of nx-by-ny equal cells.

    Values are evaluated at cell centers; axis 0 of a grid array indexes
    depth rows (y), axis 1 lateral columns (x).
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise DegenerateGrid("grids need at least 2 cells per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DegenerateGrid("grid box must have positive area")

    @property
    def cell_area(self):
        return (
            (self.x_max - self.x_min)
            / self.nx
            * (self.y_max - self.y_min)
            / self.ny
        )

    def centers(self):
        """Cell-center coordinates as (xs, ys) 1-D arrays."""
        dx = (self.x_max - self.x_min) / self.nx
        dy = (self.y_max - self.y_min) / self.ny
        xs = self.x_min + dx * (np.arange(self.nx) + 0.5)
        ys = self.y_min + dy * (np.arange(self.ny) + 0.5)
        return xs, ys


def draw_params_for_shape(
    n_styles,
    n_patterns,
    n_receivers,
    n_servers,
    n_covariates,
    rng,
    alpha0=1.0,
    prior_scales=2.5,
    lkj_eta=1.0,
    halft_scale=2.0,
):
    """Draw a full parameter set from the prior for the given shape.

    Draw order is fixed: stick-breaking coefficients (each column drawn
    then sorted ascending), style rows, then per pattern the mean
    coefficients, two half-Cauchy scales and an LKJ correlation, then
    receiver and server offsets.

    Returns
    -------
    LsaParams
    """
    k, m = n_styles, n_patterns
    r, s, p = n_receivers, n_servers, n_covariates
    beta = np.sort(rng.standard_normal((k, m - 1)), axis=0)
    pi = rng.dirichlet(np.full(k, alpha0), size=r)
    comps = []
    for _ in range(m):
        alpha = rng.normal(0.0, prior_scales, size=(N_DIMS, p))
        scales = np.abs(rng.standard_cauchy(N_DIMS)) * halft_scale
        corr = 2.0 * rng.beta(lkj_eta, lkj_eta) - 1.0
        comps.append(GaussianComponent.from_scales(alpha, scales, corr))
    eta = rng.normal(0.0, prior_scales, size=(r, N_DIMS, p))
    delta = rng.normal(0.0, prior_scales, size=(s, N_DIMS, p))
    return LsaParams(
        betas=StickBreakingBetas(beta),
        pi=StyleSimplex(pi),
        components=tuple(comps),
        eta=eta,
        delta=delta,
        alpha0=alpha0,
        prior_scales=prior_scales,
        lkj_eta=lkj_eta,
        halft_scale=halft_scale,
    )


def draw_params(cfg, rng=None):
    """Draw a full parameter set from the prior described by a config.

    Parameters
    ----------
    cfg : SimConfig
    rng : numpy.random.Generator, optional
        Defaults to a generator seeded with ``cfg.rng_seed``.

    Returns
    -------
    LsaParams
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return draw_params_for_shape(
        cfg.n_styles,
        cfg.n_patterns,
        cfg.n_receivers,
        cfg.n_servers,
        cfg.n_covariates,
        rng,
        alpha0=cfg.alpha0,
        prior_scales=cfg.prior_scales,
        lkj_eta=cfg.lkj_eta,
        halft_scale=cfg.halft_scale,
    )


def _encode_factors(levels, factor_counts):
    """Reference-coded indicator encoding with an intercept column.

    ``levels`` has one column per factor; level 0 is the reference and
    contributes no indicator.
    """
    n = levels.shape[0]
    width = 1 + sum(c - 1 for c in factor_counts)
    x = np.zeros((n, width))
    x[:, 0] = 1.0
    col = 1
    for f, count in enumerate(factor_counts):
        for level in range(1, count):
            x[:, col] = levels[:, f] == level
            col += 1
    return x


def _categorical_rows(weights_rows, u):
    """Inverse-CDF categorical draws, one row of weights per uniform."""
    cum = np.cumsum(weights_rows, axis=1)
    return (u[:, None] > cum).sum(axis=1)


def _sample_receiver(params, cfg, i, n_i, child):
    """All draws for one receiver, in one fixed order, from one stream."""
    n_factors = len(cfg.factor_counts)
    levels = np.zeros((n_i, n_factors), dtype=int)
    for f, count in enumerate(cfg.factor_counts):
        levels[:, f] = child.integers(0, count, size=n_i)
    x = _encode_factors(levels, cfg.factor_counts)
    servers = child.integers(0, params.n_servers, size=n_i)
    styles = _categorical_rows(
        np.broadcast_to(params.pi.pi[i], (n_i, params.n_styles)),
        child.random(n_i),
    )
    patterns = _categorical_rows(
        params.theta.theta[styles], child.random(n_i)
    )
    noise = child.standard_normal((n_i, N_DIMS))
    locs = np.empty((n_i, N_DIMS))
    for t in range(n_i):
        comp = params.components[patterns[t]]
        mean = (comp.alpha + params.eta[i] - params.delta[servers[t]]) @ x[t]
        locs[t] = mean + comp.sigma_chol @ noise[t]
    return levels, x, servers, styles, patterns, locs


def sample_dataset(params, cfg, rng=None):
    """Ancestral sample of a full dataset.

    Parameters
    ----------
    params : LsaParams
    cfg : SimConfig
    rng : numpy.random.Generator, optional
        Master stream; per-receiver child streams are spawned from it.

    Returns
    -------
    tuple
        ``(observations, latents)``; latents hold the true style and
        pattern index of each observation, in observation order.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    counts = cfg.points_per_receiver
    children = rng.spawn(params.n_receivers)
    observations = []
    styles_all = []
    patterns_all = []
    for i in range(params.n_receivers):
        _, x, servers, styles, patterns, locs = _sample_receiver(
            params, cfg, i, int(counts[i]), children[i]
        )
        for t in range(int(counts[i])):
            observations.append(
                ReturnObservation(
                    receiver_id=i,
                    server_id=int(servers[t]),
                    location=locs[t],
                    covariates=x[t],
                )
            )
        styles_all.append(styles)
        patterns_all.append(patterns)
    latents = Latents(
        styles=np.concatenate(styles_all),
        patterns=np.concatenate(patterns_all),
    )
    return observations, latents


def resolve_params(cfg, rng=None):
    """Parameters to simulate from: explicit ones or a prior draw."""
    if cfg.param_source == "explicit":
        return cfg.params
    return draw_params(cfg, rng)


_CELL_NAMES = (
    ("deuce", "wide"),
    ("deuce", "body"),
    ("deuce", "t"),
    ("ad", "wide"),
    ("ad", "body"),
    ("ad", "t"),
)
_SURFACE_NAMES = ("hard", "clay", "grass")


def simulate_records(params, cfg, rng=None, start_date="2024-01-01", match_points=100):
    """Sample a dataset and lay it out as raw CSV-style records.

    Points are grouped into synthetic matches of roughly ``match_points``
    consecutive points per receiver; receivers with at least 90 points get
    at least three matches of at least 30 points each, so default ingest
    filters keep them.

    Returns
    -------
    tuple
        ``(rows, observations, latents)`` where ``rows`` are dicts keyed by
        the CSV column names.
    """
    if cfg.covariate_scheme == "indicators":
        raise ValueError("indicators scheme has no CSV category names")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    counts = cfg.points_per_receiver
    children = rng.spawn(params.n_receivers)
    base_date = datetime.date.fromisoformat(start_date)
    rows = []
    observations = []
    styles_all = []
    patterns_all = []
    for i in range(params.n_receivers):
        n_i = int(counts[i])
        levels, x, servers, styles, patterns, locs = _sample_receiver(
            params, cfg, i, n_i, children[i]
        )
        if n_i >= 90:
            n_matches = max(3, n_i // int(match_points))
        else:
            n_matches = 1
        bounds = np.linspace(0, n_i, n_matches + 1).astype(int)
        match_of = np.zeros(n_i, dtype=int)
        for t in range(n_matches):
            match_of[bounds[t] : bounds[t + 1]] = t
        for t in range(n_i):
            if cfg.covariate_scheme == "standard":
                side, direction = _CELL_NAMES[levels[t, 0]]
                surface = _SURFACE_NAMES[levels[t, 1]]
            else:
                side, direction, surface = "deuce", "wide", "hard"
            rows.append(
                {
                    "match_id": f"sim-r{i:03d}-m{match_of[t]:02d}",
                    "receiver": f"r{i:03d}",
                    "server": f"s{int(servers[t]):03d}",
                    "serve_number": cfg.serve_number,
                    "court_side": side,
                    "serve_direction": direction,
                    "surface": surface,
                    "lateral": float(locs[t, 0]),
                    "depth": float(locs[t, 1]),
                    "date": (
                        base_date + datetime.timedelta(days=int(match_of[t]))
                    ).isoformat(),
                }
            )
            observations.append(
                ReturnObservation(
                    receiver_id=i,
                    server_id=int(servers[t]),
                    location=locs[t],
                    covariates=x[t],
                )
            )
        styles_all.append(styles)
        patterns_all.append(patterns)
    latents = Latents(
        styles=np.concatenate(styles_all),
        patterns=np.concatenate(patterns_all),
    )
    return rows, observations, latents


def mixture_density_grid(components, weights, eta_eff, delta_eff, x, grid, per_component=False):
    """Mixture density over grid cell centers for one fixed context.

    Parameters
    ----------
    components : sequence of GaussianComponent
    weights : ndarray, shape (M,)
        Pattern mixture weights for the context.
    eta_eff, delta_eff : ndarray, shape (2, P)
        Effective receiver and server offsets.
    x : ndarray, shape (P,)
    grid : GridSpec
    per_component : bool
        When true, return one weighted density sheet per component.

    Returns
    -------
    ndarray
        Shape (ny, nx), or (M, ny, nx) when ``per_component``.
    """
    x = np.asarray(x, dtype=float)
    xs, ys = grid.centers()
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sheets = np.empty((len(components), grid.ny, grid.nx))
    for m, comp in enumerate(components):
        mean = (comp.alpha + eta_eff - delta_eff) @ x
        diff = pts - mean
        lam_chol = comp.sigma_chol
        z = np.linalg.solve(lam_chol, diff.T)
        logdet = np.sum(np.log(np.diag(lam_chol)))
        log_dens = -0.5 * (N_DIMS * np.log(2.0 * np.pi) + np.sum(z * z, axis=0)) - logdet
        sheets[m] = (weights[m] * np.exp(log_dens)).reshape(grid.ny, grid.nx)
    if per_component:
        return sheets
    return sheets.sum(axis=0)


def posterior_predictive_grid(params, receiver_id, server_id, x, grid, per_component=False):
    """Predictive density of one receiver against one server.

    Pattern weights are the receiver's style weights pushed through the
    style-to-pattern map: ``w = pi_i @ theta``.
    """
    if not 0 <= receiver_id < params.n_receivers:
        raise DimensionMismatch("receiver_id out of range")
    if not 0 <= server_id < params.n_servers:
        raise DimensionMismatch("server_id out of range")
    weights = params.pi.pi[receiver_id] @ params.theta.theta
    return mixture_density_grid(
        params.components,
        weights,
        params.eta[receiver_id],
        params.delta[server_id],
        x,
        grid,
        per_component,
    )


def player_grid(params, receiver_id, x, grid, per_component=False):
    """Predictive density of one receiver against the roster-average server."""
    if not 0 <= receiver_id < params.n_receivers:
        raise DimensionMismatch("receiver_id out of range")
    weights = params.pi.pi[receiver_id] @ params.theta.theta
    return mixture_density_grid(
        params.components,
        weights,
        params.eta[receiver_id],
        params.delta.mean(axis=0),
        x,
        grid,
        per_component,
    )


def tour_grid(params, x, grid, per_component=False):
    """Predictive density of the roster-average receiver and server."""
    weights = params.pi.pi.mean(axis=0) @ params.theta.theta
    return mixture_density_grid(
        params.components,
        weights,
        params.eta.mean(axis=0),
        params.delta.mean(axis=0),
        x,
        grid,
        per_component,
    )
