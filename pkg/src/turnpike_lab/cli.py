"""Command-line driver: ``turnpike-lab <command> --config cfg.json``.

Exit status: 0 on success, 1 when the configuration is invalid, 2 when a
numerical step fails (outputs written so far are kept and listed in the
manifest).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fieldio
from .control import (
    horizon_sweep,
    initial_state,
    optimize_control,
    saturation_check,
    slice_eigenvalues,
    per_slice_distance,
)
from .errors import ConfigInvalid, LabError
from .experiments import (
    bathtub_optimality_audit,
    bathtub_shell_ratios,
    radial_symmetric_difference,
    shape_check_suite,
)
from .grid import Disk, Mask, build_grid, shape_from_spec
from .optimizer import enumerate_optima
from .parallel import default_workers
from .stability import estimate_constant

log = logging.getLogger("turnpike_lab")

COMMANDS = ("optimize", "stability", "bathtub-check", "shape-check", "control", "turnpike-sweep", "all")

DEFAULTS = {
    "resolution": 64,
    "V0_fraction": 0.3,
    "seed": 0,
    "output_dir": "out",
    "optimizer": {"n_starts": 8, "fp_tol": None, "max_iter": 100, "polish": True},
    "stability": {"delta_fractions": [0.02, 0.05, 0.1, 0.2], "n_per_delta": 100, "local_descent": True},
    "bathtub_check": {"n_pairs": 1000, "n_per_delta": 200, "delta_fractions": [0.02, 0.05, 0.1, 0.2]},
    "shape_check": {"t_cells": [0.5, 1.0, 2.0, 4.0], "offset": [-0.08, 0.05]},
    "control": {
        "T_list": [1.0, 2.0, 4.0, 8.0],
        "nt_per_unit": 64,
        "max_iter": 30,
        "y0": {"kind": "uniform"},
        "init": "best",
        "field_stride": 0,
    },
}


@dataclass(frozen=True)
class Diagnostic:
    path: str
    reason: str

    def __str__(self):
        return f"{self.path}: {self.reason}"


def merged_config(raw):
    cfg = json.loads(json.dumps(DEFAULTS))
    for key, val in raw.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _positive_int(cfg, path, out, minimum=1):
    *parents, leaf = path.split(".")
    node = cfg
    for p in parents:
        node = node.get(p, {})
    val = node.get(leaf)
    if not isinstance(val, int) or isinstance(val, bool) or val < minimum:
        out.append(Diagnostic(path, f"must be an integer >= {minimum}, got {val!r}"))
        return None
    return val


def _spacing(cfg):
    """Lattice spacing implied by the domain and resolution, or None."""
    try:
        shape = shape_from_spec(cfg["domain"])
        return max(shape.bbox) / int(cfg["resolution"]), shape
    except (KeyError, TypeError, ValueError):
        return None, None


def validate(cfg):
    """Diagnostics for ``cfg`` (after defaults are merged); empty when valid."""
    out = []
    blocks = [k for k in ("optimizer", "stability", "bathtub_check", "shape_check", "control") if not isinstance(cfg.get(k), dict)]
    if blocks:
        return [Diagnostic(k, "must be an object") for k in blocks]
    if not isinstance(cfg.get("domain"), dict):
        out.append(Diagnostic("domain", "missing shape specification"))
    else:
        try:
            shape_from_spec(cfg["domain"])
        except (KeyError, TypeError, ValueError) as exc:
            out.append(Diagnostic("domain", f"invalid shape: {exc}"))
    res = cfg.get("resolution")
    if not isinstance(res, int) or isinstance(res, bool) or res < 8:
        out.append(Diagnostic("resolution", f"must be an integer >= 8, got {res!r}"))
    frac = cfg.get("V0_fraction")
    if not isinstance(frac, (int, float)) or isinstance(frac, bool) or not (0 < frac < 1):
        out.append(Diagnostic("V0_fraction", f"must lie in (0, 1), got {frac!r}"))
        frac = None
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        out.append(Diagnostic("seed", f"must be a nonnegative integer, got {seed!r}"))

    _positive_int(cfg, "optimizer.n_starts", out)
    _positive_int(cfg, "optimizer.max_iter", out)
    fp_tol = cfg["optimizer"].get("fp_tol")
    if fp_tol is not None and not (isinstance(fp_tol, (int, float)) and fp_tol > 0):
        out.append(Diagnostic("optimizer.fp_tol", f"must be positive or null, got {fp_tol!r}"))

    h, shape = _spacing(cfg) if isinstance(res, int) and res > 0 else (None, None)
    st = cfg["stability"]
    _positive_int(cfg, "stability.n_per_delta", out)
    deltas = st.get("deltas")
    fracs = st.get("delta_fractions")
    key = "stability.deltas" if deltas is not None else "stability.delta_fractions"
    seq = deltas if deltas is not None else fracs
    if not isinstance(seq, list) or not seq or not all(isinstance(d, (int, float)) and d > 0 for d in seq):
        out.append(Diagnostic(key, "must be a nonempty list of positive numbers"))
    else:
        if any(b < a for a, b in zip(seq, seq[1:])):
            out.append(Diagnostic(key, "must be sorted ascending"))
        if h is not None:
            floor = 2 * h * h
            if deltas is not None:
                absolute = seq
            elif frac is not None:
                # the lattice area is not known before building; the exact shape area stands in
                absolute = [d * frac * _area_estimate(shape) for d in seq]
            else:
                absolute = []
            if any(d < floor for d in absolute):
                out.append(Diagnostic(key, f"delta below one-cell floor 2h^2 = {floor:.3g}"))

    bc = cfg["bathtub_check"]
    _positive_int(cfg, "bathtub_check.n_pairs", out)
    _positive_int(cfg, "bathtub_check.n_per_delta", out)
    bf = bc.get("delta_fractions")
    if not isinstance(bf, list) or not bf or not all(isinstance(d, (int, float)) and 0 < d < 2 for d in bf):
        out.append(Diagnostic("bathtub_check.delta_fractions", "must be a nonempty list in (0, 2)"))

    ct = cfg["control"]
    T_list = ct.get("T_list")
    if not isinstance(T_list, list) or not T_list or not all(isinstance(t, (int, float)) and t > 0 for t in T_list):
        out.append(Diagnostic("control.T_list", "must be a nonempty list of positive horizons"))
    elif any(b <= a for a, b in zip(T_list, T_list[1:])):
        out.append(Diagnostic("control.T_list", "must be sorted strictly ascending"))
    _positive_int(cfg, "control.nt_per_unit", out)
    _positive_int(cfg, "control.max_iter", out, minimum=0)
    _positive_int(cfg, "control.field_stride", out, minimum=0)
    if ct.get("init") not in ("uniform", "static", "best"):
        out.append(Diagnostic("control.init", f"must be 'uniform', 'static' or 'best', got {ct.get('init')!r}"))
    y0 = ct.get("y0")
    if not isinstance(y0, dict) or y0.get("kind") not in ("uniform", "gaussian", "indicator"):
        out.append(Diagnostic("control.y0", "kind must be uniform, gaussian or indicator"))
    elif y0["kind"] == "gaussian" and not (
        isinstance(y0.get("center"), list) and len(y0["center"]) == 2 and isinstance(y0.get("width"), (int, float)) and y0["width"] > 0
    ):
        out.append(Diagnostic("control.y0", "gaussian needs center [x, y] and positive width"))
    elif y0["kind"] == "indicator" and not (isinstance(y0.get("region"), list) and len(y0["region"]) == 4):
        out.append(Diagnostic("control.y0", "indicator needs region [xmin, xmax, ymin, ymax]"))
    return out


def _area_estimate(shape):
    w, hgt = shape.bbox
    if isinstance(shape, Disk):
        return math.pi * shape.radius**2
    if isinstance(shape, Mask):
        return float(shape.bitmap.mean()) * w * hgt
    return w * hgt


def stream_seed(seed, name):
    """Seed of the named substream: independent of which other streams are drawn."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def stream_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class Run:
    """State of one CLI invocation: grid, registry, emitted files, summary."""

    def __init__(self, cfg, outdir, workers):
        self.cfg = cfg
        self.outdir = Path(outdir)
        self.workers = workers
        self.files = []
        self.summary = {}
        self.grid = build_grid(cfg["domain"], cfg["resolution"])
        self.V0 = cfg["V0_fraction"] * self.grid.area
        self._registry = None

    def emit(self, paths):
        self.files.extend(Path(p) for p in paths)

    @property
    def registry(self):
        if self._registry is None:
            self.optimize()
        return self._registry

    def optimize(self):
        oc = self.cfg["optimizer"]
        fp_tol = oc["fp_tol"] if oc["fp_tol"] is not None else 1e-12 * self.grid.area
        reg = enumerate_optima(
            self.grid,
            self.V0,
            n_starts=oc["n_starts"],
            seed=stream_seed(self.cfg["seed"], "optimizer"),
            max_iter=oc["max_iter"],
            fp_tol=fp_tol,
            workers=self.workers,
            polish=oc.get("polish", True),
        )
        self._registry = reg
        self.emit(fieldio.write_registry(self.outdir, reg))
        sym, tol = radial_symmetric_difference(reg[0], self.V0)
        self.summary["optimize"] = {
            "entries": len(reg),
            "lambda_bar": reg.lambda_bar,
            "hopf": [e.hopf for e in reg],
            "multiplier": [e.multiplier for e in reg],
            "symmetric_difference_to_centered_disk": sym,
            "one_boundary_layer": tol,
        }

    def stability(self):
        sc = self.cfg["stability"]
        deltas = sc.get("deltas") or [f * self.V0 for f in sc["delta_fractions"]]
        rep = estimate_constant(
            self.grid,
            self.registry,
            deltas,
            n_per_delta=sc["n_per_delta"],
            local_descent=sc["local_descent"],
            seed=stream_seed(self.cfg["seed"], "stability"),
            workers=self.workers,
        )
        self.emit(fieldio.write_stability(self.outdir, rep))
        self.summary["stability"] = {
            "estimated_C": rep.estimated_C,
            "loglog_slope": rep.slope,
            "invalid_registry": rep.invalid_registry,
        }

    def bathtub_check(self):
        bc = self.cfg["bathtub_check"]
        rng = stream_rng(self.cfg["seed"], "bathtub-check")
        audit = bathtub_optimality_audit(self.grid, self.V0, bc["n_pairs"], rng)
        audit = bathtub_shell_ratios(
            self.grid, self.registry[0].eigen.u, self.V0, bc["delta_fractions"], bc["n_per_delta"], rng, audit
        )
        rows = [(d, k, r) for d, ratios in audit.ratios.items() for k, r in enumerate(ratios)]
        self.emit([fieldio.write_csv(self.outdir / "bathtub_ratios.csv", ["delta", "sample_id", "ratio"], rows)])
        self.summary["bathtub_check"] = {
            "pairs": audit.n_pairs,
            "violations": audit.violations,
            "worst_excess": audit.worst_excess,
            "per_delta_min": {repr(k): v for k, v in audit.per_delta_min.items()},
            "spread": audit.spread,
        }

    def shape_check(self):
        sc = self.cfg["shape_check"]
        res = shape_check_suite(self.grid, self.registry[0], self.V0, tuple(sc["offset"]), tuple(sc["t_cells"]))
        rows = []
        for case, rep in (("optimum", res.optimum), ("off_center", res.off_center)):
            for t, s, sl, sv in zip(rep.t_values, rep.slopes, rep.slopes_lambda, rep.slopes_volume):
                rows.append((case, t, s, sl, sv, rep.predicted, rep.predicted_lambda, rep.predicted_volume))
        self.emit(
            [
                fieldio.write_csv(
                    self.outdir / "shape_check.csv",
                    ["case", "t", "fd_slope", "fd_slope_lambda", "fd_slope_volume", "predicted", "predicted_lambda", "predicted_volume"],
                    rows,
                )
            ]
        )
        self.summary["shape_check"] = {"criticality_ratio": res.ratio, "formula_relative_error": res.relative_error}

    def _y0(self):
        return initial_state(self.grid, self.cfg["control"]["y0"])

    def control(self):
        cc = self.cfg["control"]
        T = float(cc["T_list"][-1])
        nt = max(int(math.ceil(T * cc["nt_per_unit"] - 1e-9)), 1)
        reg = self.registry
        traj, rep = optimize_control(
            self.grid, self.V0, T, nt, self._y0(), max_iter=cc["max_iter"], init=cc["init"], registry=reg
        )
        dists = per_slice_distance(traj, reg)
        lams = slice_eigenvalues(self.grid, traj)
        self.emit(fieldio.write_trajectory(self.outdir, traj, dists, lams, stride=cc["field_stride"]))
        self.emit(fieldio.write_turnpike(self.outdir, [rep], name="control_report.csv"))
        self.summary["control"] = {
            "T": T,
            "objective": rep.objective,
            "static_objective": rep.static_objective,
            "turnpike_integral": rep.turnpike_integral,
            "gronwall_margin": rep.gronwall_margin,
            "iterations": rep.iterations,
            "no_improvement": rep.no_improvement,
        }

    def turnpike_sweep(self):
        cc = self.cfg["control"]
        reports = horizon_sweep(
            self.grid,
            self.registry,
            self.V0,
            self._y0(),
            cc["T_list"],
            nt_per_unit=cc["nt_per_unit"],
            max_iter=cc["max_iter"],
            seed=stream_seed(self.cfg["seed"], "control"),
            workers=self.workers,
            init=cc["init"],
        )
        self.emit(fieldio.write_turnpike(self.outdir, reports))
        sat = saturation_check(reports)
        self.summary["turnpike_sweep"] = {
            "saturation": sat,
            "decay_fit": reports[0].decay_fit,
            "failed_horizons": [r.T for r in reports if r.error is not None],
        }
        failed = [r for r in reports if r.error is not None]
        if failed:
            raise LabError("; ".join(f"T={r.T}: {r.error}" for r in failed))


STEPS = {
    "optimize": ("optimize",),
    "stability": ("stability",),
    "bathtub-check": ("bathtub_check",),
    "shape-check": ("shape_check",),
    "control": ("control",),
    "turnpike-sweep": ("turnpike_sweep",),
    "all": ("optimize", "bathtub_check", "shape_check", "stability", "control", "turnpike_sweep"),
}


def write_manifest(outdir, command, cfg, files, wall, status, summary, error=None):
    outdir = Path(outdir)
    entries = []
    for p in sorted(set(files)):
        if p.exists():
            entries.append({"path": str(p.relative_to(outdir)), "sha256": fieldio.sha256(p), "bytes": p.stat().st_size})
    summary_path = outdir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    entries.append({"path": "summary.json", "sha256": fieldio.sha256(summary_path), "bytes": summary_path.stat().st_size})
    manifest = {
        "command": command,
        "config": cfg,
        "status": status,
        "error": error,
        "wall_time_s": wall,
        "files": entries,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def run(command, cfg, outdir=None, workers=1):
    """Execute ``command``; returns the exit status."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    diags = validate(cfg)
    if diags:
        raise ConfigInvalid(diags)
    outdir = Path(outdir or cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    status, error, code = "ok", None, 0
    state = None
    try:
        state = Run(cfg, outdir, workers)
        for step in STEPS[command]:
            log.info("running %s", step)
            getattr(state, step)()
    except LabError as exc:
        status, error, code = "numerical failure", f"{type(exc).__name__}: {exc}", 2
        log.error("%s", error)
    wall = time.perf_counter() - start
    files = state.files if state is not None else []
    summary = state.summary if state is not None else {}
    write_manifest(outdir, command, cfg, files, wall, status, summary, error)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="turnpike-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("top level must be an object")
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    cfg = merged_config(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    workers = args.workers if args.workers is not None else default_workers()
    try:
        return run(args.command, cfg, args.output, max(workers, 1))
    except ConfigInvalid as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
