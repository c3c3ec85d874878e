"""Dataset ingest, inclusion filters, covariate encoding, and file formats.

The on-disk dataset is a CSV of one return point per row::

    match_id,receiver,server,serve_number,court_side,serve_direction,surface,lateral,depth,date

An optional first line ``#returns-csv-v1`` pins the schema version; files
without it are read as the current version.  Ingest applies two inclusion
rules, iterated together to a fixed point so the result is stable under
re-application: matches with too few return points go first, then
receivers appearing in too few matches (their removal can push a match
under the threshold again, hence the iteration).

Covariate encoding is reference-coded: an intercept, five indicators for
the court-side-by-direction serve cell (deuce wide is the reference), and
two surface indicators (hard is the reference), eight columns in all.
First- and second-serve points are modeled separately and are never mixed
into one dataset.

Model files are JSON with explicit version tags; floats survive the round
trip exactly because JSON text keeps shortest-round-trip precision.  All
writers create a temporary file and rename it into place, so readers never
observe a half-written file.
"""

from __future__ import annotations

import csv
import datetime
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .baselines import BaselineParams
from .errors import (
    DimensionMismatch,
    EmptyData,
    MixedServeNumbers,
    ParseError,
    UnknownEnumValue,
    VersionMismatch,
)
from .model import (
    GaussianComponent,
    LsaParams,
    ReturnObservation,
    StickBreakingBetas,
    StyleSimplex,
)

CSV_VERSION = "returns-csv-v1"
MODEL_VERSION = "stylealloc-model-v1"
GRID_VERSION = "stylealloc-grid-v1"

CSV_COLUMNS = (
    "match_id",
    "receiver",
    "server",
    "serve_number",
    "court_side",
    "serve_direction",
    "surface",
    "lateral",
    "depth",
    "date",
)

COURT_SIDES = ("deuce", "ad")
DIRECTIONS = ("wide", "body", "t")
SURFACES = ("hard", "clay", "grass")

# Column labels of the standard encoding; cell levels follow
# side-major order with deuce-wide as level 0 (the reference).
STANDARD_COVARIATE_NAMES = (
    "intercept",
    "cell_deuce_body",
    "cell_deuce_t",
    "cell_ad_wide",
    "cell_ad_body",
    "cell_ad_t",
    "surface_clay",
    "surface_grass",
)


@dataclass(frozen=True, eq=False)
class RawReturnRecord:
    """One parsed CSV row; categorical fields already validated."""

    match_id: str
    receiver: str
    server: str
    serve_number: int
    court_side: str
    serve_direction: object
    surface: str
    lateral: float
    depth: float
    date: str


@dataclass(eq=False)
class FilterReport:
    """What the inclusion rules removed."""

    n_input: int
    n_kept: int
    matches_dropped: int
    receivers_dropped: int
    records_dropped_short_match: int
    records_dropped_receiver: int
    passes: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Encoded observations plus the name tables behind the dense ids."""

    observations: tuple
    receiver_names: tuple
    server_names: tuple
    covariate_names: tuple
    scheme: str
    serve_number: int
    n_missing_direction: int


def _parse_row(row, line_no):
    try:
        serve_number = int(row["serve_number"])
    except ValueError:
        raise ParseError("serve_number is not an integer", line_no, "serve_number")
    if serve_number not in (1, 2):
        raise UnknownEnumValue(
            f"serve_number must be 1 or 2, got {serve_number}", line_no, "serve_number"
        )
    side = row["court_side"].strip().lower()
    if side not in COURT_SIDES:
        raise UnknownEnumValue(f"unknown court_side {row['court_side']!r}", line_no, "court_side")
    direction_raw = row["serve_direction"].strip().lower()
    if direction_raw == "":
        direction = None
    elif direction_raw in DIRECTIONS:
        direction = direction_raw
    else:
        raise UnknownEnumValue(
            f"unknown serve_direction {row['serve_direction']!r}",
            line_no,
            "serve_direction",
        )
    surface = row["surface"].strip().lower()
    if surface not in SURFACES:
        raise UnknownEnumValue(f"unknown surface {row['surface']!r}", line_no, "surface")
    values = {}
    for col in ("lateral", "depth"):
        try:
            values[col] = float(row[col])
        except ValueError:
            raise ParseError(f"{col} is not a number", line_no, col)
        if not np.isfinite(values[col]):
            raise ParseError(f"{col} must be finite", line_no, col)
    date = row["date"].strip()
    try:
        datetime.date.fromisoformat(date)
    except ValueError:
        raise ParseError("date is not an ISO date", line_no, "date")
    for col in ("match_id", "receiver", "server"):
        if row[col].strip() == "":
            raise ParseError(f"{col} must be non-empty", line_no, col)
    return RawReturnRecord(
        match_id=row["match_id"].strip(),
        receiver=row["receiver"].strip(),
        server=row["server"].strip(),
        serve_number=serve_number,
        court_side=side,
        serve_direction=direction,
        surface=surface,
        lateral=values["lateral"],
        depth=values["depth"],
        date=date,
    )


def load_csv(path, schema_version=CSV_VERSION):
    """Load and validate a returns CSV.

    Parameters
    ----------
    path : str or Path
    schema_version : str
        Version this caller understands; a file declaring a different one
        raises ``VersionMismatch``.  Files without a version line are read
        as the current version.

    Returns
    -------
    list of RawReturnRecord
    """
    with open(path, "r", newline="", encoding="utf-8") as handle:
        first = handle.readline()
        if first.startswith("#"):
            declared = first.lstrip("#").strip()
            if declared != schema_version:
                raise VersionMismatch(
                    f"file declares {declared!r}, reader expects {schema_version!r}"
                )
            header_line = handle.readline()
        else:
            header_line = first
        header = next(csv.reader([header_line])) if header_line.strip() else []
        if tuple(header) != CSV_COLUMNS:
            raise ParseError(
                f"header must be exactly {','.join(CSV_COLUMNS)}", None, None
            )
        reader = csv.reader(handle)
        records = []
        for line_no, fields in enumerate(reader, start=1):
            if not fields:
                continue
            if len(fields) != len(CSV_COLUMNS):
                raise ParseError(
                    f"expected {len(CSV_COLUMNS)} fields, got {len(fields)}", line_no, None
                )
            records.append(_parse_row(dict(zip(CSV_COLUMNS, fields)), line_no))
    return records


def apply_filters(records, min_match_points=30, min_matches=3):
    """Apply the inclusion rules, iterating to a fixed point.

    Rule one drops matches carrying fewer than ``min_match_points`` return
    points; rule two drops receivers appearing in fewer than
    ``min_matches`` remaining matches.  Dropping a receiver can shrink a
    match below the threshold, so both rules repeat until nothing changes;
    re-applying the filters to their own output is then a no-op.

    Returns
    -------
    tuple
        ``(kept_records, FilterReport)``.
    """
    kept = list(records)
    n_input = len(kept)
    dropped_matches = set()
    dropped_receivers = set()
    records_dropped_short = 0
    records_dropped_receiver = 0
    passes = 0
    while True:
        passes += 1
        changed = False
        match_counts = {}
        for rec in kept:
            match_counts[rec.match_id] = match_counts.get(rec.match_id, 0) + 1
        bad_matches = {m for m, c in match_counts.items() if c < min_match_points}
        if bad_matches:
            changed = True
            dropped_matches |= bad_matches
            before = len(kept)
            kept = [rec for rec in kept if rec.match_id not in bad_matches]
            records_dropped_short += before - len(kept)
        receiver_matches = {}
        for rec in kept:
            receiver_matches.setdefault(rec.receiver, set()).add(rec.match_id)
        bad_receivers = {
            r for r, matches in receiver_matches.items() if len(matches) < min_matches
        }
        if bad_receivers:
            changed = True
            dropped_receivers |= bad_receivers
            before = len(kept)
            kept = [rec for rec in kept if rec.receiver not in bad_receivers]
            records_dropped_receiver += before - len(kept)
        if not changed:
            break
    report = FilterReport(
        n_input=n_input,
        n_kept=len(kept),
        matches_dropped=len(dropped_matches),
        receivers_dropped=len(dropped_receivers),
        records_dropped_short_match=records_dropped_short,
        records_dropped_receiver=records_dropped_receiver,
        passes=passes,
    )
    return kept, report


def _cell_level(side, direction):
    return COURT_SIDES.index(side) * 3 + DIRECTIONS.index(direction)


def encode_covariates(records, serve_number=None, scheme="standard"):
    """Turn raw records into model-ready observations with dense ids.

    Parameters
    ----------
    records : list of RawReturnRecord
    serve_number : int, optional
        Keep only this serve number.  When omitted, the records must
        already be single-valued; mixing first and second serves raises
        ``MixedServeNumbers``.
    scheme : str
        ``"standard"`` (intercept + cell + surface indicators, P = 8) or
        ``"intercept-only"`` (P = 1).

    Returns
    -------
    Dataset
        Rosters are sorted by name; records lacking a serve direction are
        excluded under the standard scheme and counted.
    """
    if scheme not in ("standard", "intercept-only"):
        raise DimensionMismatch(f"unknown encoding scheme {scheme!r}")
    if serve_number is None:
        present = sorted({rec.serve_number for rec in records})
        if len(present) > 1:
            raise MixedServeNumbers(
                "records mix first and second serves; pass serve_number"
            )
        if not present:
            raise EmptyData("no records to encode")
        serve_number = present[0]
    chosen = [rec for rec in records if rec.serve_number == serve_number]
    n_missing = 0
    if scheme == "standard":
        with_direction = [rec for rec in chosen if rec.serve_direction is not None]
        n_missing = len(chosen) - len(with_direction)
        chosen = with_direction
    if not chosen:
        raise EmptyData("no records left to encode")
    receiver_names = tuple(sorted({rec.receiver for rec in chosen}))
    server_names = tuple(sorted({rec.server for rec in chosen}))
    receiver_id = {name: i for i, name in enumerate(receiver_names)}
    server_id = {name: i for i, name in enumerate(server_names)}
    observations = []
    for rec in chosen:
        if scheme == "standard":
            x = np.zeros(8)
            x[0] = 1.0
            cell = _cell_level(rec.court_side, rec.serve_direction)
            if cell > 0:
                x[cell] = 1.0
            surface_level = SURFACES.index(rec.surface)
            if surface_level > 0:
                x[5 + surface_level] = 1.0
        else:
            x = np.ones(1)
        observations.append(
            ReturnObservation(
                receiver_id=receiver_id[rec.receiver],
                server_id=server_id[rec.server],
                location=np.array([rec.lateral, rec.depth]),
                covariates=x,
            )
        )
    names = (
        STANDARD_COVARIATE_NAMES if scheme == "standard" else ("intercept",)
    )
    return Dataset(
        observations=tuple(observations),
        receiver_names=receiver_names,
        server_names=server_names,
        covariate_names=tuple(names),
        scheme=scheme,
        serve_number=serve_number,
        n_missing_direction=n_missing,
    )


def _atomic_write(path, write_body):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as handle:
            write_body(handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_records_csv(path, rows):
    """Write raw return rows (dicts keyed by the CSV columns) atomically."""

    def body(handle):
        handle.write(f"#{CSV_VERSION}\n")
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row[col] for col in CSV_COLUMNS])

    _atomic_write(path, body)


def _component_payload(comp):
    return {
        "alpha": comp.alpha.tolist(),
        "scales": [float(comp.scale_vec[0]), float(comp.scale_vec[1])],
        "corr": comp.corr,
    }


def _component_from_payload(payload):
    return GaussianComponent.from_scales(
        np.asarray(payload["alpha"], dtype=float),
        payload["scales"],
        payload["corr"],
    )


def write_model_file(path, params, meta=None):
    """Serialize fitted parameters (full model or baseline) to JSON.

    The payload keeps scales and correlations rather than covariance
    factors, so every stored number is a free parameter and the round
    trip is exact.
    """
    if isinstance(params, LsaParams):
        body = {
            "family": "lsa",
            "beta": params.betas.beta.tolist(),
            "pi": params.pi.pi.tolist(),
            "components": [_component_payload(c) for c in params.components],
            "eta": params.eta.tolist(),
            "delta": params.delta.tolist(),
        }
    elif isinstance(params, BaselineParams):
        body = {
            "family": params.tag,
            "weights": params.weights.tolist(),
            "components": [_component_payload(c) for c in params.components],
            "eta": params.eta.tolist(),
            "delta": params.delta.tolist(),
        }
    else:
        raise DimensionMismatch("params must be LsaParams or BaselineParams")
    payload = {
        "format": MODEL_VERSION,
        "hyper": {
            "alpha0": params.alpha0,
            "prior_scales": params.prior_scales,
            "lkj_eta": params.lkj_eta,
            "halft_scale": params.halft_scale,
        },
        "model": body,
        "meta": dict(meta) if meta else {},
    }

    def write_body(handle):
        json.dump(payload, handle, indent=1)
        handle.write("\n")

    _atomic_write(path, write_body)


def read_model_file(path):
    """Read a model file back into parameters and metadata.

    Returns
    -------
    tuple
        ``(params, meta)`` with ``params`` an LsaParams or BaselineParams.
    """
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    declared = payload.get("format")
    if declared != MODEL_VERSION:
        raise VersionMismatch(
            f"file declares {declared!r}, reader expects {MODEL_VERSION!r}"
        )
    hyper = payload["hyper"]
    body = payload["model"]
    comps = tuple(_component_from_payload(c) for c in body["components"])
    common = {
        "eta": np.asarray(body["eta"], dtype=float),
        "delta": np.asarray(body["delta"], dtype=float),
        "alpha0": hyper["alpha0"],
        "prior_scales": hyper["prior_scales"],
        "lkj_eta": hyper["lkj_eta"],
        "halft_scale": hyper["halft_scale"],
    }
    if body["family"] == "lsa":
        params = LsaParams(
            betas=StickBreakingBetas(np.asarray(body["beta"], dtype=float)),
            pi=StyleSimplex(np.asarray(body["pi"], dtype=float)),
            components=comps,
            **common,
        )
    else:
        params = BaselineParams(
            tag=body["family"],
            components=comps,
            weights=np.asarray(body["weights"], dtype=float),
            **common,
        )
    return params, payload.get("meta", {})


def write_density_grid(path, values, grid, meta=None):
    """Write a density grid as CSV rows of cell centers and values.

    One row per cell, ``nx * ny`` rows in all, preceded by comment lines
    recording the version, the grid box, and any metadata.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.ny, grid.nx):
        raise DimensionMismatch("values shape must be (ny, nx)")
    xs, ys = grid.centers()

    def body(handle):
        handle.write(f"#{GRID_VERSION}\n")
        handle.write(
            "#box "
            + " ".join(
                repr(float(v))
                for v in (grid.x_min, grid.x_max, grid.y_min, grid.y_max)
            )
            + f" {grid.nx} {grid.ny}\n"
        )
        for key, val in (meta or {}).items():
            handle.write(f"#meta {key}={val}\n")
        writer = csv.writer(handle)
        writer.writerow(["x", "y", "density"])
        for iy in range(grid.ny):
            for ix in range(grid.nx):
                writer.writerow(
                    [repr(float(xs[ix])), repr(float(ys[iy])), repr(float(values[iy, ix]))]
                )

    _atomic_write(path, body)


def read_density_grid(path):
    """Read a density grid file back.

    Returns
    -------
    tuple
        ``(values, box, meta)`` where ``values`` has shape (ny, nx) and
        ``box`` is ``(x_min, x_max, y_min, y_max, nx, ny)``.
    """
    meta = {}
    box = None
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as handle:
        first = handle.readline()
        declared = first.lstrip("#").strip() if first.startswith("#") else None
        if declared != GRID_VERSION:
            raise VersionMismatch(
                f"file declares {declared!r}, reader expects {GRID_VERSION!r}"
            )
        for line in handle:
            if line.startswith("#box "):
                parts = line[5:].split()
                box = (
                    float(parts[0]),
                    float(parts[1]),
                    float(parts[2]),
                    float(parts[3]),
                    int(parts[4]),
                    int(parts[5]),
                )
            elif line.startswith("#meta "):
                key, _, val = line[6:].strip().partition("=")
                meta[key] = val
            elif line.startswith("#"):
                continue
            else:
                rows.append(line)
    if box is None:
        raise ParseError("grid file is missing its #box line", None, None)
    reader = csv.reader(rows)
    header = next(reader)
    if header != ["x", "y", "density"]:
        raise ParseError("grid header must be x,y,density", None, None)
    nx, ny = box[4], box[5]
    values = np.empty((ny, nx))
    count = 0
    for fields in reader:
        if not fields:
            continue
        iy, ix = divmod(count, nx)
        if iy >= ny:
            raise ParseError("grid file has more cells than its box declares", None, None)
        values[iy, ix] = float(fields[2])
        count += 1
    if count != nx * ny:
        raise ParseError(
            f"grid file has {count} cells, box declares {nx * ny}", None, None
        )
    return values, box, meta


def write_elpd_csv(path, reports):
    """Write a model-comparison table: one row per model."""

    def body(handle):
        writer = csv.writer(handle)
        writer.writerow(["model", "elpd", "se"])
        for report in reports:
            writer.writerow([report.label, repr(report.elpd), repr(report.se)])

    _atomic_write(path, body)


def write_grid_csv(path, grid_result):
    """Write a (styles, patterns) selection table, best cell flagged."""

    def body(handle):
        writer = csv.writer(handle)
        writer.writerow(["n_styles", "n_patterns", "elpd", "se", "best"])
        for cell in grid_result.sorted_cells():
            report = grid_result.entries[cell]
            writer.writerow(
                [
                    cell[0],
                    cell[1],
                    repr(report.elpd),
                    repr(report.se),
                    int(cell == grid_result.best),
                ]
            )

    _atomic_write(path, body)


def write_style_csv(path, params, receiver_names=None):
    """Write per-style pattern weights and per-receiver style weights."""
    theta = params.theta.theta
    pi = params.pi.pi
    if receiver_names is None:
        receiver_names = [f"receiver_{i}" for i in range(pi.shape[0])]

    def body(handle):
        writer = csv.writer(handle)
        writer.writerow(
            ["row_kind", "name"]
            + [f"style_{k}" for k in range(theta.shape[0])]
            + [f"pattern_{m}" for m in range(theta.shape[1])]
        )
        for k in range(theta.shape[0]):
            writer.writerow(
                ["style", f"style_{k}"]
                + ["" for _ in range(theta.shape[0])]
                + [repr(float(v)) for v in theta[k]]
            )
        for i, name in enumerate(receiver_names):
            writer.writerow(
                ["receiver", name]
                + [repr(float(v)) for v in pi[i]]
                + ["" for _ in range(theta.shape[1])]
            )

    _atomic_write(path, body)
