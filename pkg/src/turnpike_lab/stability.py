"""Sampling probes of quantitative spectral stability around optimal potentials.

A shell of radius ``delta`` around a bang-bang base ``V*`` is the set of
admissible ``V`` with ``|V - V*|_1 = delta``.  Because mass can only leave the
base set and only enter its complement, the distance is linear in ``V`` there,
so the shell is a convex polytope and its linear maximizers are given in
closed form by :func:`bathtub.shell_extremal`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bathtub import level_threshold, move_mass, shell_extremal, shell_split
from .errors import EmptyRegistry, GridMismatch, ShellInfeasible
from .grid import Potential, ScalarField, l1_distance
from .optimizer import shell_descent
from .parallel import pmap
from .spectral import DEFAULT_TOL, principal_eigenpair

log = logging.getLogger(__name__)

MAX_RESAMPLE = 50


@dataclass
class StabilityReport:
    samples: list  # dicts: delta, sample_id, lam, lambda_gap, ratio, stage
    estimated_C: float
    per_delta_min: dict
    per_delta_min_raw: dict
    seed: int
    lambda_bar: float
    invalid_registry: bool = False
    slope: float = math.nan
    intercept: float = math.nan
    eigen_tol: float = DEFAULT_TOL
    descent: bool = False
    extras: dict = field(default_factory=dict)

    def min_gap(self, delta):
        return self.per_delta_min[delta] * delta**2


def dist_to_registry(V, registry):
    """L1 distance from ``V`` to the nearest registry entry."""
    if len(registry) == 0:
        raise EmptyRegistry("registry has no entries")
    grid = registry[0].grid
    if V.grid != grid:
        raise GridMismatch(f"potential lives on {V.grid!r}, registry on {grid!r}")
    return min(l1_distance(V, e.potential) for e in registry)


def nearest_entry(V, registry):
    d = [l1_distance(V, e.potential) for e in registry]
    k = int(np.argmin(d))
    return k, d[k]


def _shell_bounds(base):
    inner, cap_out, cap_in = shell_split(base)
    h2 = base.grid.cell_area
    return 2 * h2 * min(cap_out.sum(), cap_in.sum())


def _check_delta(base, delta):
    grid = base.grid
    V0 = base.target_mass
    if not (0 < delta < 2 * min(V0, grid.area - V0)):
        raise ValueError(f"delta={delta!r} outside (0, 2 min(V0, |Omega| - V0))")
    if delta > _shell_bounds(base) * (1 + 1e-12):
        raise ShellInfeasible(f"shell of radius {delta!r} does not fit around the base potential")


def shell_draws(base, u, delta, rng):
    """Endless stream of random shell points around ``base``, interface-biased by ``u``.

    Mass ``delta/2`` leaves cells of the base set and ``delta/2`` enters cells
    of its complement, filling along a random order.  The orders interpolate
    between uniformly random and sorted by closeness to the level interface of
    ``u``, so the draws cover both generic and near-worst-case directions.
    """
    _check_delta(base, delta)
    grid = base.grid
    mu = level_threshold(ScalarField(grid, u), base.target_mass).mu
    closeness = np.abs(u - mu) / max(float(np.ptp(u)), 1e-300)
    inner, _, _ = shell_split(base)
    idx_in = np.nonzero(inner)[0]
    idx_out = np.nonzero(~inner)[0]
    while True:
        # noise scale from 1e-2 (interface-hugging) to 1e2 (uniform)
        scale = 10.0 ** rng.uniform(-2, 2)
        key = closeness + scale * rng.random(grid.n)
        remove = idx_in[np.argsort(key[idx_in], kind="stable")]
        add = idx_out[np.argsort(key[idx_out], kind="stable")]
        yield move_mass(base, delta, remove, add)


def sample_shell(registry, base_index, delta, n, seed, u=None):
    """``n`` potentials at L1 distance exactly ``delta`` from registry entry ``base_index``.

    Sample 0 is the closed-form maximizer of ``sum u^2 V`` on the shell, the
    rest come from :func:`shell_draws` with the entry's eigenfunction as ``u``
    (by default).  Samples that end up closer to a different entry are redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    base = registry[base_index].potential
    _check_delta(base, delta)
    if u is None:
        u = registry[base_index].eigen.u.values
    tol = 1e-12 * base.grid.area

    def ours(V):
        if len(registry) == 1:
            return True
        k, d = nearest_entry(V, registry)
        return k == base_index or d >= delta - tol

    samples = []
    first = shell_extremal(base, u * u, delta)
    if ours(first):
        samples.append(first)
    draws = shell_draws(base, u, delta, np.random.default_rng(seed))
    rejected = 0
    while len(samples) < n:
        V = next(draws)
        if not ours(V):
            rejected += 1
            if rejected > MAX_RESAMPLE * n:
                raise ShellInfeasible("shell samples keep landing nearer another entry")
            continue
        samples.append(V)
    return samples


def _evaluate(args):
    grid, vals, tol, x0 = args
    return principal_eigenpair(grid, vals, tol=tol, x0=x0)


def _loglog_fit(deltas, gaps):
    d = np.asarray(deltas, dtype=float)
    g = np.asarray(gaps, dtype=float)
    ok = g > 0
    if ok.sum() < 2:
        return math.nan, math.nan
    slope, intercept = np.polyfit(np.log(d[ok]), np.log(g[ok]), 1)
    return float(slope), float(intercept)


def estimate_constant(
    grid,
    registry,
    deltas,
    n_per_delta=100,
    local_descent=True,
    seed=0,
    base_index=0,
    tol=DEFAULT_TOL,
    descent_steps=3,
    workers=1,
):
    """Estimate ``C`` in ``lambda(V) - lambda_bar >= C dist(V, I*)^2`` by shell sampling.

    Returns a :class:`StabilityReport`.  ``per_delta_min_raw`` holds the minima
    over the raw samples; ``per_delta_min`` also includes the descended samples
    when ``local_descent`` is set.  A gap below ``-2 tol`` means some sample
    beats ``lambda_bar`` and sets ``invalid_registry``.
    """
    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise ValueError("deltas must be positive")
    if any(b < a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be sorted ascending")
    if len(registry) == 0:
        raise EmptyRegistry("registry has no entries")
    if registry[0].grid != grid:
        raise GridMismatch("registry was computed on a different grid")

    lam_bar = registry.lambda_bar
    base = registry[base_index].potential
    u0 = registry[base_index].eigen.u.values
    seeds = np.random.SeedSequence(seed).spawn(len(deltas))

    samples = []
    per_min, per_min_raw = {}, {}
    for delta, ss in zip(deltas, seeds):
        pots = sample_shell(registry, base_index, delta, n_per_delta, ss)
        eigs = pmap(_evaluate, [(grid, V.values, tol, u0) for V in pots], workers)
        raw = []
        for sid, (V, eig) in enumerate(zip(pots, eigs)):
            gap = eig.lam - lam_bar
            raw.append(gap / delta**2)
            samples.append(dict(delta=delta, sample_id=sid, lam=eig.lam, lambda_gap=gap, ratio=gap / delta**2, stage="raw"))
        per_min_raw[delta] = min(raw)
        best = min(raw)
        if local_descent:
            for sid, (V, eig) in enumerate(zip(pots, eigs)):
                W, weig = shell_descent(base, V, eig, delta, steps=descent_steps, tol=tol)
                if W is V:
                    continue
                gap = weig.lam - lam_bar
                best = min(best, gap / delta**2)
                samples.append(
                    dict(delta=delta, sample_id=sid, lam=weig.lam, lambda_gap=gap, ratio=gap / delta**2, stage="descent")
                )
        per_min[delta] = best
        log.info("delta=%.4g  min ratio raw=%.4g  post-descent=%.4g", delta, per_min_raw[delta], best)

    gaps = [s["lambda_gap"] for s in samples]
    invalid = min(gaps) < -2 * tol
    slope, intercept = _loglog_fit(deltas, [per_min[d] * d**2 for d in deltas])
    return StabilityReport(
        samples=samples,
        estimated_C=float(min(s["ratio"] for s in samples)),
        per_delta_min=per_min,
        per_delta_min_raw=per_min_raw,
        seed=seed,
        lambda_bar=lam_bar,
        invalid_registry=bool(invalid),
        slope=slope,
        intercept=intercept,
        eigen_tol=tol,
        descent=local_descent,
    )


def default_deltas(grid, V0, n=6):
    """Log-spaced radii from one cell swap ``2 h^2`` up to ``0.2 V0``."""
    lo = 2 * grid.cell_area
    hi = 0.2 * V0
    if hi <= lo:
        return [lo]
    return [float(d) for d in np.geomspace(lo, hi, n)]
