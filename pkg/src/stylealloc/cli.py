"""Command-line interface.

Subcommands cover the full pipeline: ``simulate`` writes a synthetic
dataset (and optionally its true parameters), ``fit`` estimates one model
family from a returns CSV, ``compare`` cross-validates the four families
on one dataset, ``select`` scans a grid of (styles, patterns) cells,
``density`` turns a fitted model file into a predictive density grid, and
``smooth`` Pareto-smooths a file of log weights.

Exit codes: 0 on success; 1 for usage errors; 2 for data problems (parse
failures, version mismatches, filters leaving nothing); 3 for numerical
failures, in which case a ``.partial.json`` file with the error context is
written next to the requested output when one was given.

``--config key=value`` pairs override any fit-setting flag; they are
applied last.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import dataio, sampler, selection
from .baselines import BaselineKind, BaselineParams, baseline_fit
from .errors import (
    EmptyData,
    MixedServeNumbers,
    ParseError,
    StyleAllocError,
    VersionMismatch,
)
from .inference import FitConfig, fit, fit_gradient
from .model import LsaParams
from .sampler import GridSpec, SimConfig, mixture_density_grid, simulate_records


class _UsageError(Exception):
    pass


_DATA_ERRORS = (
    ParseError,
    VersionMismatch,
    EmptyData,
    MixedServeNumbers,
    OSError,
    json.JSONDecodeError,
)


def _parse_config_pairs(pairs):
    fields = {f.name: f for f in dataclasses.fields(FitConfig)}
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or key not in fields:
            raise _UsageError(f"bad --config entry {pair!r}")
        default = fields[key].default
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "0", "1"):
                raise _UsageError(f"bad boolean for --config {key}")
            out[key] = raw.lower() in ("true", "1")
        elif isinstance(default, int):
            try:
                out[key] = int(raw)
            except ValueError:
                raise _UsageError(f"bad integer for --config {key}: {raw!r}")
        elif isinstance(default, float):
            try:
                out[key] = float(raw)
            except ValueError:
                raise _UsageError(f"bad number for --config {key}: {raw!r}")
        else:
            out[key] = raw
    return out


def _fit_config(args):
    settings = {
        "seed": args.seed,
        "n_restarts": args.restarts,
        "max_iters": args.max_iters,
    }
    settings.update(_parse_config_pairs(getattr(args, "config", None)))
    return FitConfig(**settings)


def _load_dataset(args):
    records = dataio.load_csv(args.data)
    kept, report = dataio.apply_filters(
        records,
        min_match_points=args.min_match_points,
        min_matches=args.min_matches,
    )
    print(
        f"filters: kept {report.n_kept}/{report.n_input} records"
        f" ({report.matches_dropped} short matches,"
        f" {report.receivers_dropped} receivers dropped,"
        f" {report.passes} passes)"
    )
    dataset = dataio.encode_covariates(
        kept, serve_number=args.serve_number, scheme=args.scheme
    )
    if dataset.n_missing_direction:
        print(f"excluded {dataset.n_missing_direction} records without direction")
    return dataset


def _dataset_meta(dataset):
    return {
        "receiver_names": list(dataset.receiver_names),
        "server_names": list(dataset.server_names),
        "covariate_names": list(dataset.covariate_names),
        "scheme": dataset.scheme,
        "serve_number": dataset.serve_number,
    }


def cmd_simulate(args):
    if args.params is not None:
        params, meta = dataio.read_model_file(args.params)
        if not isinstance(params, LsaParams):
            raise _UsageError("--params must point at a full-model file")
        # Explicit flags win; otherwise keep what the model file recorded.
        scheme = args.scheme or meta.get("scheme", "standard")
        serve_number = args.serve_number or meta.get("serve_number", 1)
        cfg = SimConfig(
            n_styles=params.n_styles,
            n_patterns=params.n_patterns,
            n_receivers=params.n_receivers,
            n_servers=params.n_servers,
            n_points_per_receiver=args.points_per_receiver,
            covariate_scheme=scheme,
            rng_seed=args.seed,
            param_source="explicit",
            params=params,
            serve_number=serve_number,
        )
    else:
        scheme = args.scheme or "standard"
        serve_number = args.serve_number or 1
        cfg = SimConfig(
            n_styles=args.styles,
            n_patterns=args.patterns,
            n_receivers=args.receivers,
            n_servers=args.servers,
            n_points_per_receiver=args.points_per_receiver,
            covariate_scheme=scheme,
            rng_seed=args.seed,
            serve_number=serve_number,
        )
        params = sampler.draw_params(cfg)
    rows, _, _ = simulate_records(
        params, cfg, match_points=args.match_points
    )
    dataio.write_records_csv(args.out, rows)
    print(f"wrote {len(rows)} records to {args.out}")
    if args.truth_out:
        meta = {
            "receiver_names": [f"r{i:03d}" for i in range(params.n_receivers)],
            "server_names": [f"s{i:03d}" for i in range(params.n_servers)],
            "scheme": cfg.covariate_scheme,
            "serve_number": cfg.serve_number,
        }
        dataio.write_model_file(args.truth_out, params, meta)
        print(f"wrote true parameters to {args.truth_out}")
    return 0


def cmd_fit(args):
    if args.styles < 1 or args.patterns < 1:
        raise _UsageError("--styles and --patterns must be at least 1")
    if args.family != "lsa":
        if args.style_out:
            raise _UsageError("--style-out applies to the lsa family only")
        if args.gradient:
            raise _UsageError("--gradient applies to the lsa family only")
    cfg = _fit_config(args)
    dataset = _load_dataset(args)
    data = list(dataset.observations)
    if args.family == "lsa":
        runner = fit_gradient if args.gradient else fit
        report = runner(data, args.styles, args.patterns, cfg)
    else:
        kind = BaselineKind(
            args.family, 1 if args.family == "mvn" else args.patterns
        )
        report = baseline_fit(data, kind, cfg)
    print(
        f"fit {args.family}: objective {report.objective:.6f},"
        f" {report.n_iters} iterations,"
        f" converged={str(report.converged).lower()}"
    )
    meta = _dataset_meta(dataset)
    meta["family"] = args.family
    dataio.write_model_file(args.model_out, report.params, meta)
    print(f"wrote model to {args.model_out}")
    if args.style_out:
        dataio.write_style_csv(
            args.style_out, report.params, dataset.receiver_names
        )
        print(f"wrote style summary to {args.style_out}")
    return 0


def cmd_compare(args):
    if args.styles < 1 or args.patterns < 1:
        raise _UsageError("--styles and --patterns must be at least 1")
    cfg = _fit_config(args)
    dataset = _load_dataset(args)
    reports = selection.compare_families(
        list(dataset.observations),
        args.styles,
        args.patterns,
        n_folds=args.folds,
        config=cfg,
        seed=args.seed,
        n_threads=args.threads,
    )
    for report in reports:
        print(f"{report.label}: elpd {report.elpd:.3f} (se {report.se:.3f})")
    dataio.write_elpd_csv(args.out, reports)
    print(f"wrote comparison table to {args.out}")
    return 0


def _parse_counts(text):
    try:
        if ":" in text:
            lo, _, hi = text.partition(":")
            counts = list(range(int(lo), int(hi) + 1))
        else:
            counts = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise _UsageError(f"bad count range {text!r}; use LO:HI or a comma list")
    if not counts:
        raise _UsageError(f"count range {text!r} is empty")
    if min(counts) < 1:
        raise _UsageError(f"counts must be at least 1, got {text!r}")
    return counts


def cmd_select(args):
    cfg = _fit_config(args)
    styles = _parse_counts(args.styles_range)
    patterns = _parse_counts(args.patterns_range)
    dataset = _load_dataset(args)
    result = selection.grid_search(
        list(dataset.observations),
        styles,
        patterns,
        n_folds=args.folds,
        config=cfg,
        seed=args.seed,
        n_threads=args.threads,
    )
    dataio.write_grid_csv(args.out, result)
    best = result.entries[result.best]
    print(
        f"best cell: K={result.best[0]} M={result.best[1]}"
        f" (elpd {best.elpd:.3f}, se {best.se:.3f})"
    )
    print(f"wrote selection grid to {args.out}")
    return 0


def _context_vector(scheme, args):
    if scheme == "intercept-only":
        return np.ones(1)
    x = np.zeros(8)
    x[0] = 1.0
    cell = dataio._cell_level(args.court_side, args.direction)
    if cell > 0:
        x[cell] = 1.0
    surface_level = dataio.SURFACES.index(args.surface)
    if surface_level > 0:
        x[5 + surface_level] = 1.0
    return x


def _resolve_name(token, names, what):
    if names and token in names:
        return names.index(token)
    try:
        idx = int(token)
    except ValueError:
        raise _UsageError(f"unknown {what} {token!r}")
    if names and not 0 <= idx < len(names):
        raise _UsageError(f"{what} index {idx} out of range")
    return idx


def cmd_density(args):
    if args.box[0] >= args.box[1] or args.box[2] >= args.box[3]:
        raise _UsageError("--box must satisfy XMIN < XMAX and YMIN < YMAX")
    params, meta = dataio.read_model_file(args.model)
    scheme = meta.get("scheme", "standard")
    x = _context_vector(scheme, args)
    grid = GridSpec(
        x_min=args.box[0],
        x_max=args.box[1],
        y_min=args.box[2],
        y_max=args.box[3],
        nx=args.nx,
        ny=args.ny,
    )
    receiver_names = list(meta.get("receiver_names", []))
    server_names = list(meta.get("server_names", []))
    if isinstance(params, LsaParams):
        if args.tour:
            values = sampler.tour_grid(params, x, grid)
            context = {"view": "tour"}
        else:
            if args.receiver is None:
                raise _UsageError("density needs --receiver unless --tour")
            ri = _resolve_name(args.receiver, receiver_names, "receiver")
            if args.server == "avg":
                values = sampler.player_grid(params, ri, x, grid)
                context = {"view": "player", "receiver": args.receiver}
            else:
                si = _resolve_name(args.server, server_names, "server")
                values = sampler.posterior_predictive_grid(
                    params, ri, si, x, grid
                )
                context = {
                    "view": "matchup",
                    "receiver": args.receiver,
                    "server": args.server,
                }
    else:
        context = {"view": "baseline", "family": params.tag}
        if params.weights.ndim == 2:
            if args.receiver is None:
                raise _UsageError("this family needs --receiver")
            ri = _resolve_name(args.receiver, receiver_names, "receiver")
            weights = params.weights[ri]
            eta_eff = params.eta[ri]
        else:
            weights = params.weights
            eta_eff = params.eta.mean(axis=0)
        if args.server == "avg" or args.server is None:
            delta_eff = params.delta.mean(axis=0)
        else:
            si = _resolve_name(args.server, server_names, "server")
            delta_eff = params.delta[si]
        values = mixture_density_grid(
            params.components, weights, eta_eff, delta_eff, x, grid
        )
    context["scheme"] = scheme
    dataio.write_density_grid(args.out, values, grid, context)
    mass = float(values.sum() * grid.cell_area)
    print(f"wrote {grid.nx * grid.ny} cells to {args.out} (mass {mass:.4f})")
    return 0


def cmd_smooth(args):
    log_weights = []
    with open(args.weights, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                log_weights.append(float(line))
            except ValueError:
                raise ParseError("log weight is not a number", line_no, None)
    smoothed, k_hat = selection.psis_smooth(np.asarray(log_weights))

    def body(handle):
        for value in smoothed:
            handle.write(repr(float(value)) + "\n")

    dataio._atomic_write(args.out, body)
    print(f"k_hat {k_hat:.4f}; wrote {len(log_weights)} weights to {args.out}")
    if np.isfinite(k_hat) and k_hat > 0.7:
        print("warning: tail shape above 0.7, weights are unreliable")
    return 0


def _add_data_arguments(sub):
    sub.add_argument("--data", required=True, help="returns CSV path")
    sub.add_argument("--serve-number", type=int, default=1, choices=(1, 2))
    sub.add_argument(
        "--scheme", default="standard", choices=("standard", "intercept-only")
    )
    sub.add_argument("--min-match-points", type=int, default=30)
    sub.add_argument("--min-matches", type=int, default=3)


def _add_fit_arguments(sub):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--restarts", type=int, default=5)
    sub.add_argument("--max-iters", type=int, default=500)
    sub.add_argument(
        "--config",
        action="append",
        metavar="KEY=VALUE",
        help="override any fit setting; applied after the flags",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stylealloc",
        description="Two-level mixture models for return-impact locations.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="write a synthetic dataset")
    sim.add_argument("--out", required=True)
    sim.add_argument("--truth-out")
    sim.add_argument("--params", help="model file to simulate from")
    sim.add_argument("--styles", type=int, default=3)
    sim.add_argument("--patterns", type=int, default=3)
    sim.add_argument("--receivers", type=int, default=20)
    sim.add_argument("--servers", type=int, default=10)
    sim.add_argument("--points-per-receiver", type=int, default=300)
    sim.add_argument(
        "--scheme", default=None, choices=("standard", "intercept-only")
    )
    sim.add_argument("--serve-number", type=int, default=None, choices=(1, 2))
    sim.add_argument("--match-points", type=int, default=100)
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)

    fit_cmd = commands.add_parser("fit", help="fit one model family")
    _add_data_arguments(fit_cmd)
    fit_cmd.add_argument(
        "--family",
        default="lsa",
        choices=("lsa", "mvn", "finite-mixture", "mixed-membership"),
    )
    fit_cmd.add_argument("--styles", type=int, default=3)
    fit_cmd.add_argument("--patterns", type=int, default=3)
    fit_cmd.add_argument("--model-out", required=True)
    fit_cmd.add_argument("--style-out")
    fit_cmd.add_argument(
        "--gradient", action="store_true", help="quasi-Newton instead of EM"
    )
    _add_fit_arguments(fit_cmd)
    fit_cmd.set_defaults(func=cmd_fit)

    cmp_cmd = commands.add_parser("compare", help="cross-validate the four families")
    _add_data_arguments(cmp_cmd)
    cmp_cmd.add_argument("--styles", type=int, default=3)
    cmp_cmd.add_argument("--patterns", type=int, default=3)
    cmp_cmd.add_argument("--folds", type=int, default=5)
    cmp_cmd.add_argument("--threads", type=int, default=1)
    cmp_cmd.add_argument("--out", required=True)
    _add_fit_arguments(cmp_cmd)
    cmp_cmd.set_defaults(func=cmd_compare)

    sel = commands.add_parser("select", help="grid-search styles and patterns")
    _add_data_arguments(sel)
    sel.add_argument("--styles-range", default="2:8")
    sel.add_argument("--patterns-range", default="2:8")
    sel.add_argument("--folds", type=int, default=5)
    sel.add_argument("--threads", type=int, default=1)
    sel.add_argument("--out", required=True)
    _add_fit_arguments(sel)
    sel.set_defaults(func=cmd_select)

    den = commands.add_parser("density", help="predictive density grid")
    den.add_argument("--model", required=True)
    den.add_argument("--receiver")
    den.add_argument("--server", default="avg")
    den.add_argument("--tour", action="store_true")
    den.add_argument("--court-side", default="deuce", choices=dataio.COURT_SIDES)
    den.add_argument("--direction", default="wide", choices=dataio.DIRECTIONS)
    den.add_argument("--surface", default="hard", choices=dataio.SURFACES)
    den.add_argument(
        "--box",
        nargs=4,
        type=float,
        default=(-6.0, 6.0, -2.0, 10.0),
        metavar=("XMIN", "XMAX", "YMIN", "YMAX"),
    )
    den.add_argument("--nx", type=int, default=60)
    den.add_argument("--ny", type=int, default=60)
    den.add_argument("--out", required=True)
    den.set_defaults(func=cmd_density)

    smo = commands.add_parser("smooth", help="Pareto-smooth a log-weight file")
    smo.add_argument("--weights", required=True)
    smo.add_argument("--out", required=True)
    smo.set_defaults(func=cmd_smooth)

    return parser


def _partial_dump(args, exc):
    out = getattr(args, "out", None) or getattr(args, "model_out", None)
    if not out:
        return
    payload = {
        "command": getattr(args, "command", None),
        "error_type": type(exc).__name__,
        "error": str(exc),
    }
    try:
        dataio._atomic_write(
            f"{out}.partial.json",
            lambda handle: handle.write(json.dumps(payload, indent=1) + "\n"),
        )
        print(f"wrote partial report to {out}.partial.json", file=sys.stderr)
    except OSError:
        pass


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (StyleAllocError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _partial_dump(args, exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
