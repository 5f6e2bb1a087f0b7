"""Experiment pipelines shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bathtub import ball_perimeter, bathtub_extremal, bathtub_projection, bathtub_stability_ratio
from .grid import Potential, ScalarField, l1_distance
from .optimizer import random_bang_bang, shape_derivative_check, vector_field
from .stability import shell_draws


def random_field(grid, rng, smooth=2.0):
    """Smooth random field plus a little white noise (ties are rare but allowed)."""
    raw = ndimage.gaussian_filter(rng.standard_normal(grid.inside.shape), sigma=smooth)
    vals = raw[grid.interior[:, 0], grid.interior[:, 1]]
    return ScalarField(grid, vals + 0.05 * rng.standard_normal(grid.n))


def random_admissible(grid, V0, rng, n_vertices=3):
    """Random point of the admissible set: a convex mix of bang-bang vertices and the uniform potential."""
    weights = rng.dirichlet(np.ones(n_vertices + 1))
    vals = weights[0] * np.full(grid.n, V0 / grid.area)
    for w in weights[1:]:
        vals = vals + w * random_bang_bang(grid, V0, rng).values
    return Potential(ScalarField(grid, np.clip(vals, 0.0, 1.0)), V0)


@dataclass
class BathtubAudit:
    n_pairs: int
    violations: int
    worst_excess: float  # max of (int f V - int f V_f), <= 0 when no violation
    ratios: dict = field(default_factory=dict)  # delta -> array of stability ratios
    per_delta_min: dict = field(default_factory=dict)
    extremal_ratio: dict = field(default_factory=dict)

    @property
    def spread(self):
        mins = np.array(list(self.per_delta_min.values()))
        return float(mins.max() / mins.min()) if mins.size and mins.min() > 0 else math.inf


def bathtub_optimality_audit(grid, V0, n_pairs, rng, rtol=1e-12):
    """Count pairs ``(f, V)`` with ``int f V > int f bathtub(f)`` beyond round-off."""
    h2 = grid.cell_area
    violations = 0
    worst = -math.inf
    for _ in range(n_pairs):
        f = random_field(grid, rng)
        V = random_admissible(grid, V0, rng)
        best = h2 * float(f.values @ bathtub_projection(f, V0).values)
        val = h2 * float(f.values @ V.values)
        excess = val - best
        worst = max(worst, excess)
        scale = h2 * float(np.abs(f.values).sum())
        if excess > rtol * scale:
            violations += 1
    return BathtubAudit(n_pairs, violations, worst)


def bathtub_shell_ratios(grid, f, V0, fractions, n, rng, audit=None):
    """Quantitative bathtub ratios ``gap / dist^2`` on shells around ``V_f``.

    For each ``delta = fraction * V0``: ``n`` random shell points (including the
    closed-form worst point, the shell maximizer of ``int f V``).
    """
    audit = audit or BathtubAudit(0, 0, math.nan)
    base = bathtub_projection(f, V0)
    for frac in fractions:
        delta = frac * V0
        draws = shell_draws(base, f.values, delta, rng)
        ext = bathtub_extremal(f, V0, delta)
        ratios = [bathtub_stability_ratio(f, ext, V0)]
        for _ in range(n - 1):
            ratios.append(bathtub_stability_ratio(f, next(draws), V0))
        ratios = np.array(ratios)
        audit.ratios[delta] = ratios
        audit.per_delta_min[delta] = float(ratios.min())
        audit.extremal_ratio[delta] = float(ratios[0])
    return audit


def centered_ball(grid, V0, center=None):
    """Lattice disk of mass ``V0``: the cells closest to ``center`` (domain centre by default)."""
    if center is None:
        center = (0.5 * grid.nx * grid.h, 0.5 * grid.ny * grid.h)
    r = np.hypot(grid.x - center[0], grid.y - center[1])
    return bathtub_projection(ScalarField(grid, -r), V0)


def radial_symmetric_difference(entry, V0):
    """``|V* - B|_1`` for the centred lattice disk ``B`` and the tolerance ``4 Per(B) h``."""
    grid = entry.grid
    ball = centered_ball(grid, V0)
    return l1_distance(entry.potential, ball), 4.0 * ball_perimeter(V0) * grid.h


@dataclass
class ShapeCheckSummary:
    optimum: object
    off_center: object
    ratio: float  # |slope at optimum| / |slope off centre|
    relative_error: float  # off-centre slope vs boundary formula


def shape_check_suite(grid, entry, V0, offset=(-0.08, 0.05), t_cells=(0.5, 1.0, 2.0, 4.0), coverage="linear"):
    """Shape-derivative check at the optimum and at an off-centre disk of the same volume.

    Both use a dilation plus translation field supported in an annulus around
    the respective set.  The off-centre disk is described by its exact signed
    distance, so its boundary formula is evaluated on the true circle.
    """
    h = grid.h
    r0 = math.sqrt(V0 / math.pi)
    mid = (0.5 * grid.nx * h, 0.5 * grid.ny * h)
    t_values = [c * h for c in t_cells]
    phi_opt = vector_field(mid, 1.2 * r0, 1.7 * r0, dilation=1.0, translation=(0.3, 0.2))
    opt = shape_derivative_check(grid, entry, phi_opt, t_values, coverage=coverage)

    c = (mid[0] + offset[0], mid[1] + offset[1])
    phi = vector_field(c, 1.2 * r0, 1.7 * r0, dilation=1.0, translation=(0.3, 0.2))

    def psi(x, y):
        return np.hypot(x - c[0], y - c[1]) - r0

    off = shape_derivative_check(grid, entry, phi, t_values, level_set=psi, coverage=coverage)
    ratio = abs(opt.fd_slope) / max(abs(off.fd_slope), 1e-300)
    return ShapeCheckSummary(opt, off, ratio, off.relative_error)
