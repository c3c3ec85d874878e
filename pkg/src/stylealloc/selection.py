"""Predictive model comparison by cross-validated ELPD.

Expected log pointwise predictive density (ELPD) is estimated by k-fold
cross-validation: folds are stratified within receiver so every training
fold sees every receiver, each fold's model is fitted on the remaining
data, and every observation is scored exactly once by the one model that
never saw it.  The report carries the pointwise values, their sum, and
the usual standard error ``sqrt(N) * sd(pointwise)``.

A Pareto-smoothed importance weighting utility rides along for weight
diagnostics: it replaces the largest importance weights by quantiles of a
generalized Pareto distribution fitted to the weight tail by profile
likelihood, capping at the raw maximum, and reports the tail shape
``k_hat``.  Values of ``k_hat`` above about 0.7 flag unreliable weights.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy.optimize import minimize_scalar

from .baselines import BaselineKind, baseline_fit, baseline_loglik_points
from .errors import (
    DimensionMismatch,
    EmptyData,
    InsufficientDataPerFold,
)
from .inference import FitConfig, fit
from .model import LsaParams, marginal_loglik_points

_FAMILIES = ("lsa", "mvn", "finite-mixture", "mixed-membership")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """One candidate model for cross-validation.

    ``fixed_params`` switches on oracle mode: the given parameters are
    scored on every fold without any fitting.
    """

    family: str
    n_styles: int = 1
    n_patterns: int = 1
    fixed_params: object = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise DimensionMismatch(f"family must be one of {_FAMILIES}")
        if self.n_styles < 1 or self.n_patterns < 1:
            raise DimensionMismatch("style and pattern counts must be at least 1")
        if self.family == "mvn" and self.n_patterns != 1:
            raise DimensionMismatch("mvn has exactly one component")

    @property
    def label(self):
        if self.family == "lsa":
            return f"lsa(K={self.n_styles},M={self.n_patterns})"
        if self.family == "mvn":
            return "mvn"
        return f"{self.family}(M={self.n_patterns})"


@dataclass(eq=False)
class ElpdReport:
    """Cross-validated ELPD for one model."""

    label: str
    elpd: float
    se: float
    pointwise: np.ndarray
    fold_of: np.ndarray
    n_folds: int
    oracle: bool = False


@dataclass(eq=False)
class GridResult:
    """ELPD over a grid of (styles, patterns) cells."""

    entries: dict
    best: tuple

    def sorted_cells(self):
        return sorted(self.entries)


def assign_folds(receiver_idx, n_folds, rng):
    """Stratified fold labels: shuffle within receiver, deal round-robin.

    Guarantees the per-receiver fold counts differ by at most one, so
    every training fold keeps every receiver as long as each receiver has
    at least two observations.

    Returns
    -------
    ndarray of int, shape (N,)
    """
    receiver_idx = np.asarray(receiver_idx)
    n = receiver_idx.shape[0]
    if n_folds < 2:
        raise DimensionMismatch("need at least 2 folds")
    if n < n_folds:
        raise InsufficientDataPerFold("fewer observations than folds")
    fold_of = np.empty(n, dtype=int)
    for r in np.unique(receiver_idx):
        idx = np.flatnonzero(receiver_idx == r)
        perm = rng.permutation(idx.shape[0])
        fold_of[idx[perm]] = np.arange(idx.shape[0]) % n_folds
    return fold_of


def _check_folds(fold_of, receiver_idx, n_folds):
    all_receivers = np.unique(receiver_idx)
    for f in range(n_folds):
        test = fold_of == f
        if not test.any():
            raise InsufficientDataPerFold(f"fold {f} is empty")
        train_receivers = np.unique(receiver_idx[~test])
        if train_receivers.shape[0] != all_receivers.shape[0]:
            raise InsufficientDataPerFold(
                f"fold {f} removes a receiver from its training set"
            )


def _fit_family(data, spec, cfg):
    if spec.family == "lsa":
        return fit(data, spec.n_styles, spec.n_patterns, cfg)
    kind = BaselineKind(spec.family, 1 if spec.family == "mvn" else spec.n_patterns)
    return baseline_fit(data, kind, cfg)


def _loglik_points(params, data):
    if isinstance(params, LsaParams):
        return marginal_loglik_points(params, data)
    return baseline_loglik_points(params, data)


def kfold_elpd(data, spec, n_folds=5, config=None, seed=None, n_threads=1, fold_of=None):
    """Cross-validated ELPD of one model on one dataset.

    Parameters
    ----------
    data : list of ReturnObservation
    spec : ModelSpec
    n_folds : int
    config : FitConfig, optional
        Fit settings; per-fold fits get child seeds derived from ``seed``.
    seed : int, optional
        Master seed for fold assignment and per-fold fits; defaults to
        ``config.seed``.
    n_threads : int
        Folds fit in a thread pool when above one.  Results are assembled
        by fold index, so the estimate does not depend on scheduling.
    fold_of : ndarray, optional
        Precomputed fold labels; passing the same labels to several
        models pairs their comparisons on identical splits.

    Returns
    -------
    ElpdReport
    """
    cfg = config if config is not None else FitConfig()
    if len(data) == 0:
        raise EmptyData("no observations")
    receiver_idx = np.array([obs.receiver_id for obs in data])
    master = np.random.SeedSequence(cfg.seed if seed is None else int(seed))
    fold_seed, *fit_seeds = master.spawn(n_folds + 1)
    if fold_of is None:
        fold_of = assign_folds(receiver_idx, n_folds, np.random.default_rng(fold_seed))
    else:
        fold_of = np.asarray(fold_of, dtype=int)
        if fold_of.shape != (len(data),):
            raise DimensionMismatch("fold_of length must match the data")
    _check_folds(fold_of, receiver_idx, n_folds)
    pointwise = np.empty(len(data))

    if spec.fixed_params is not None:
        pointwise[:] = _loglik_points(spec.fixed_params, data)
    else:

        def run_fold(f):
            train = [obs for obs, g in zip(data, fold_of) if g != f]
            test = [obs for obs, g in zip(data, fold_of) if g == f]
            fold_cfg = dc_replace(
                cfg, seed=int(fit_seeds[f].generate_state(1)[0])
            )
            report = _fit_family(train, spec, fold_cfg)
            return _loglik_points(report.params, test)

        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                results = list(pool.map(run_fold, range(n_folds)))
        else:
            results = [run_fold(f) for f in range(n_folds)]
        for f in range(n_folds):
            pointwise[fold_of == f] = results[f]

    elpd = float(np.sum(pointwise))
    se = float(math.sqrt(len(data)) * np.std(pointwise, ddof=1))
    return ElpdReport(
        label=spec.label,
        elpd=elpd,
        se=se,
        pointwise=pointwise,
        fold_of=fold_of,
        n_folds=n_folds,
        oracle=spec.fixed_params is not None,
    )


def _shared_folds(data, n_folds, seed_seq):
    receiver_idx = np.array([obs.receiver_id for obs in data])
    rng = np.random.default_rng(seed_seq)
    return assign_folds(receiver_idx, n_folds, rng)


def compare_families(data, n_styles, n_patterns, n_folds=5, config=None, seed=None, n_threads=1):
    """ELPD of all four families at one (styles, patterns) setting.

    All families are scored on one shared fold assignment so their ELPD
    differences are paired rather than confounded by split noise.

    Returns
    -------
    list of ElpdReport
        Ordered mvn, finite-mixture, mixed-membership, lsa.
    """
    specs = [
        ModelSpec("mvn"),
        ModelSpec("finite-mixture", n_patterns=n_patterns),
        ModelSpec("mixed-membership", n_patterns=n_patterns),
        ModelSpec("lsa", n_styles=n_styles, n_patterns=n_patterns),
    ]
    if len(data) == 0:
        raise EmptyData("no observations")
    master = np.random.SeedSequence(
        (config.seed if config is not None else 0) if seed is None else int(seed)
    )
    fold_seed, *seeds = master.spawn(len(specs) + 1)
    fold_of = _shared_folds(data, n_folds, fold_seed)
    return [
        kfold_elpd(
            data,
            spec,
            n_folds=n_folds,
            config=config,
            seed=int(s.generate_state(1)[0]),
            n_threads=n_threads,
            fold_of=fold_of,
        )
        for spec, s in zip(specs, seeds)
    ]


def grid_search(
    data,
    style_counts,
    pattern_counts,
    n_folds=5,
    config=None,
    seed=None,
    n_threads=1,
):
    """Cross-validated ELPD over a grid of (styles, patterns) cells.

    All cells share one fold assignment (paired comparisons).  Cells run
    in a thread pool when ``n_threads`` is above one; each cell gets its
    own deterministic child seed, so results do not depend on scheduling.
    Ties on ELPD break toward the smaller cell.

    Returns
    -------
    GridResult
    """
    cells = [(int(k), int(m)) for k in style_counts for m in pattern_counts]
    if not cells:
        raise DimensionMismatch("empty grid")
    if len(data) == 0:
        raise EmptyData("no observations")
    master = np.random.SeedSequence(
        (config.seed if config is not None else 0) if seed is None else int(seed)
    )
    fold_seed, *seeds = master.spawn(len(cells) + 1)
    fold_of = _shared_folds(data, n_folds, fold_seed)

    def run_cell(i):
        k, m = cells[i]
        return kfold_elpd(
            data,
            ModelSpec("lsa", n_styles=k, n_patterns=m),
            n_folds=n_folds,
            config=config,
            seed=int(seeds[i].generate_state(1)[0]),
            n_threads=1,
            fold_of=fold_of,
        )

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            reports = list(pool.map(run_cell, range(len(cells))))
    else:
        reports = [run_cell(i) for i in range(len(cells))]
    entries = dict(zip(cells, reports))
    best = max(sorted(entries), key=lambda cell: entries[cell].elpd)
    return GridResult(entries=entries, best=best)


def _gpd_profile_neg(theta, exceed):
    n = exceed.shape[0]
    xi = float(np.mean(np.log1p(theta * exceed)))
    if theta == 0.0 or xi == 0.0:
        return n * (math.log(float(np.mean(exceed))) + 1.0)
    return n * (math.log(xi / theta) + xi + 1.0)


def _fit_gpd(exceed):
    """Profile-likelihood generalized Pareto fit on positive exceedances.

    Profiles out the scale along ``theta = xi / sigma``, scans a
    deterministic grid bracketing the maximizer, then refines by bounded
    scalar minimization.

    Returns
    -------
    tuple of float
        ``(xi, sigma)``.
    """
    e = np.sort(np.asarray(exceed, dtype=float))
    n = e.shape[0]
    y_max = e[-1]
    quart = e[max(int(math.floor(n / 4.0 + 0.5)) - 1, 0)]
    m_grid = 30 + int(math.floor(math.sqrt(n)))
    j = np.arange(1, m_grid + 1)
    # theta grid spans (-1/y_max, +inf); dense near the boundary
    theta = -(1.0 / y_max + (1.0 - np.sqrt(m_grid / (j - 0.5))) / (3.0 * quart))
    vals = np.array([_gpd_profile_neg(t, e) for t in theta])
    best = int(np.argmin(vals))
    lo = theta[min(best + 1, m_grid - 1)]
    hi = theta[max(best - 1, 0)]
    if lo > hi:
        lo, hi = hi, lo
    floor = -1.0 / y_max + 1e-12
    lo = max(lo, floor)
    if hi <= lo:
        hi = lo + 1e-8
    result = minimize_scalar(
        _gpd_profile_neg,
        args=(e,),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-8 * max(hi - lo, 1e-8)},
    )
    theta_hat = float(result.x)
    if min(_gpd_profile_neg(theta_hat, e), result.fun) > vals[best]:
        theta_hat = float(theta[best])
    xi = float(np.mean(np.log1p(theta_hat * e)))
    if abs(theta_hat) < 1e-12:
        return 0.0, float(np.mean(e))
    return xi, xi / theta_hat


def _gpd_quantiles(p, xi, sigma):
    p = np.asarray(p, dtype=float)
    if abs(xi) < 1e-9:
        return -sigma * np.log1p(-p)
    return sigma / xi * ((1.0 - p) ** (-xi) - 1.0)


def psis_smooth(log_weights):
    """Pareto-smooth the tail of a log-weight vector.

    The largest ``L = min(ceil(0.2 S), ceil(3 sqrt(S)))`` weights are
    replaced by generalized Pareto quantiles at ``(rank + 0.5) / L``
    above the tail cutoff, capped at the raw maximum; all other entries
    are returned bit-identical.  All-equal inputs come back unchanged
    with a ``k_hat`` of ``-inf`` (no tail to smooth); a tail without
    enough distinct exceedances to fit comes back unchanged with
    ``k_hat`` of ``+inf``.

    Parameters
    ----------
    log_weights : array-like, shape (S,)
        At least 5 entries.

    Returns
    -------
    tuple
        ``(smoothed_log_weights, k_hat)``.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.ndim != 1 or lw.shape[0] < 5:
        raise DimensionMismatch("need a 1-D vector of at least 5 log weights")
    if not np.all(np.isfinite(lw)):
        raise DimensionMismatch("log weights must be finite")
    s = lw.shape[0]
    if np.max(lw) == np.min(lw):
        return lw.copy(), float("-inf")
    tail_len = min(math.ceil(0.2 * s), math.ceil(3.0 * math.sqrt(s)))
    tail_len = min(tail_len, s - 1)
    order = np.argsort(lw, kind="stable")
    tail_idx = order[s - tail_len :]
    shift = float(lw[order[-1]])
    w = np.exp(lw - shift)
    cutoff = float(w[order[s - tail_len - 1]])
    exceed = w[tail_idx] - cutoff
    positive = exceed[exceed > 0.0]
    if positive.shape[0] < 5:
        return lw.copy(), float("inf")
    xi, sigma = _fit_gpd(positive)
    ranks = (np.arange(tail_len) + 0.5) / tail_len
    smoothed = cutoff + _gpd_quantiles(ranks, xi, sigma)
    smoothed = np.minimum(smoothed, float(w[order[-1]]))
    out = lw.copy()
    out[tail_idx] = np.log(smoothed) + shift
    return out, float(xi)
