"""Field dumps and CSV tables.

A field is written twice: as a plain (P2) graymap of the node lattice with
values rescaled affinely to 0..65535, for viewing, and as a sidecar CSV of
``cell_i, cell_j, value`` with ``repr`` floats, which round-trips bit-exactly.
All writers emit identical bytes for identical inputs.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

from .grid import ScalarField, _values

PGM_MAX = 65535


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_field(stem, field):
    """Write ``stem.pgm`` and ``stem.csv``; returns both paths."""
    grid = field.grid
    vals = _values(field)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 0.0)
    scaled = np.zeros(vals.size, dtype=np.int64)
    if hi > lo:
        scaled = np.rint((vals - lo) / (hi - lo) * PGM_MAX).astype(np.int64)
    lat = np.zeros(grid.inside.shape, dtype=np.int64)
    lat[grid.interior[:, 0], grid.interior[:, 1]] = scaled
    # image rows run from the top (largest y) down, columns along x
    image = lat.T[::-1]
    pgm = stem.with_suffix(".pgm")
    with open(pgm, "w", newline="\n") as fh:
        fh.write("P2\n")
        fh.write(f"# min {lo!r} max {hi!r}\n")
        fh.write(f"{image.shape[1]} {image.shape[0]}\n{PGM_MAX}\n")
        for row in image:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
    side = write_csv(
        stem.with_suffix(".csv"),
        ["cell_i", "cell_j", "value"],
        ((int(i), int(j), float(v)) for (i, j), v in zip(grid.interior, vals)),
    )
    return pgm, side


def load_field(grid, path):
    """Read a sidecar CSV back into a :class:`ScalarField` on ``grid``."""
    vals = np.full(grid.n, np.nan)
    for row in read_csv(path):
        i, j = int(row["cell_i"]), int(row["cell_j"])
        k = grid.index[i, j] if 0 <= i <= grid.nx and 0 <= j <= grid.ny else -1
        if k < 0:
            raise ValueError(f"cell ({i}, {j}) is not an interior node of {grid!r}")
        vals[k] = float(row["value"])
    if np.isnan(vals).any():
        raise ValueError(f"{path} does not cover every interior node")
    return ScalarField(grid, vals)


def read_pgm(path):
    """Return ``(image, lo, hi)`` from a graymap written by :func:`write_field`."""
    tokens, lo, hi = [], None, None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line.split()
                if len(parts) >= 5 and parts[1] == "min":
                    lo, hi = float(parts[2]), float(parts[4])
                continue
            tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError(f"{path} is not a plain graymap")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    image = np.array(tokens[4:], dtype=np.int64).reshape(h, w)
    return image, lo, hi


def sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ------------------------------------------------------------- module tables


def write_registry(outdir, registry, dump_fields=True):
    outdir = Path(outdir)
    files = [
        write_csv(
            outdir / "registry.csv",
            ["entry_id", "lambda", "mu", "multiplier", "hopf", "perimeter", "mass"],
            (
                (k, e.lam, e.mu, e.multiplier, e.hopf, e.perimeter, e.mass)
                for k, e in enumerate(registry)
            ),
        )
    ]
    rows = []
    for start, hist in enumerate(registry.histories):
        if hist is None:
            continue
        for it, (lam, res) in enumerate(hist.iterates):
            rows.append((start, it, lam, res, hist.converged))
    files.append(write_csv(outdir / "descent_history.csv", ["start", "iteration", "lambda", "residual", "converged"], rows))
    if dump_fields:
        for k, e in enumerate(registry):
            files.extend(write_field(outdir / "fields" / f"entry_{k}", e.potential.field))
            files.extend(write_field(outdir / "fields" / f"entry_{k}_u", e.eigen.u))
    return files


def write_stability(outdir, report):
    outdir = Path(outdir)
    samples = write_csv(
        outdir / "stability_samples.csv",
        ["delta", "sample_id", "lambda", "gap", "ratio", "stage"],
        ((s["delta"], s["sample_id"], s["lam"], s["lambda_gap"], s["ratio"], s["stage"]) for s in report.samples),
    )
    rows = []
    for delta, best in report.per_delta_min.items():
        ratios = [s["ratio"] for s in report.samples if s["delta"] == delta]
        rows.append((delta, best, float(np.median(ratios)), len(ratios), report.per_delta_min_raw[delta]))
    summary = write_csv(
        outdir / "stability_summary.csv", ["delta", "min_ratio", "median_ratio", "n", "min_ratio_raw"], rows
    )
    return [samples, summary]


def write_turnpike(outdir, reports, name="turnpike_report.csv"):
    return [
        write_csv(
            Path(outdir) / name,
            ["T", "objective", "turnpike_integral", "A0", "decay_slope", "gronwall_margin", "gronwall_margin_raw", "static_objective", "iterations"],
            (
                (
                    r.T,
                    r.objective,
                    r.turnpike_integral,
                    r.A0,
                    r.decay_fit.get("slope", float("nan")),
                    r.gronwall_margin,
                    r.gronwall_margin_raw,
                    r.static_objective,
                    r.iterations,
                )
                for r in reports
            ),
        )
    ]


def write_trajectory(outdir, traj, dists, lams, stride=0, prefix="trajectory"):
    """Manifest CSV plus field dumps of every ``stride``-th slice (none when 0)."""
    outdir = Path(outdir)
    files = [
        write_csv(
            outdir / f"{prefix}.csv",
            ["slice_index", "t", "dist_to_registry", "lambda_slice"],
            ((k, float(t), float(d), float(l)) for k, (t, d, l) in enumerate(zip(traj.times, dists, lams))),
        )
    ]
    if stride and stride > 0:
        for k in range(0, traj.nt, stride):
            files.extend(write_field(outdir / "fields" / f"{prefix}_slice_{k:05d}", traj.slices[k].field))
    return files
