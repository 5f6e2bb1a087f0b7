"""Minimize the principal eigenvalue over admissible potentials.

The first variation of ``lambda`` in the direction ``W - V`` is
``-h^2 sum u_V^2 (W - V)``, so the bathtub projection of ``u_V`` (equivalently
of ``u_V^2``) minimizes the linearized problem exactly.  Iterating
``V <- bathtub(u_V)`` therefore decreases ``lambda`` monotonically without a
step size: the Rayleigh quotient of ``u_V`` for the new potential is already
below ``lambda(V)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from skimage import measure

from .bathtub import (
    boundary_steepness,
    crossing_pairs,
    bathtub_projection,
    discrete_perimeter,
    level_threshold,
    shell_extremal,
)
from .errors import AllRunsFailed, DeformationEscapes, EmptyBoundary, NoConvergence
from .grid import Potential, ScalarField, l1_distance
from .parallel import pmap
from .spectral import DEFAULT_TOL, dirichlet_ground_eigenvalue, principal_eigenpair

log = logging.getLogger(__name__)


@dataclass
class DescentHistory:
    iterates: list = field(default_factory=list)  # (lambda, fixed-point residual)
    converged: bool = False
    iterations: int = 0

    @property
    def lambdas(self):
        return np.array([lam for lam, _ in self.iterates])


@dataclass
class RegistryEntry:
    potential: Potential
    eigen: object
    lam: float
    mu: float
    multiplier: float
    spread: float
    hopf: float
    perimeter: float
    start: int = -1
    history: DescentHistory | None = None

    @property
    def grid(self):
        return self.potential.grid

    @property
    def mass(self):
        return self.potential.mass


@dataclass
class OptimalSetRegistry:
    entries: list
    lambda_bar: float
    dedupe_radius: float
    V0: float
    cluster_tol: float = 0.0
    histories: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def grid(self):
        return self.entries[0].grid


def optimize_potential(grid, V0, init, max_iter=100, fp_tol=None, tol=DEFAULT_TOL):
    """Fixed-point iteration ``V_{k+1} = bathtub(u_{V_k}, V0)``.

    Stops at the first iterate whose own residual ``|bathtub(u_V) - V|_1`` is at
    most ``fp_tol`` (default: one cell area) and returns it with its eigenpair.
    """
    if fp_tol is None:
        fp_tol = grid.cell_area
    if abs(init.mass - V0) > 1e-12 * grid.area:
        raise ValueError(f"initial potential has mass {init.mass!r}, expected {V0!r}")
    history = DescentHistory()
    V = init
    eig = None
    for it in range(1, max_iter + 1):
        eig = principal_eigenpair(grid, V, tol=tol, x0=None if eig is None else eig.u)
        nxt = bathtub_projection(eig.u, V0)
        res = l1_distance(nxt, V)
        history.iterates.append((eig.lam, res))
        history.iterations = it
        if res <= fp_tol:
            history.converged = True
            return V, eig, history
        V = nxt
    raise NoConvergence(f"fixed point not reached in {max_iter} iterations", history=history)


def shell_descent(base, V, eig, delta, steps=3, tol=DEFAULT_TOL):
    """Linearized descent of ``lambda`` restricted to ``{W : |W - base|_1 = delta}``.

    Each step moves toward the shell maximizer of ``sum u_V^2 W`` with
    backtracking on the step length; stops when no step lowers ``lambda``.
    The shell is convex around a bang-bang base, so every iterate stays on it.
    """
    grid = base.grid
    for _ in range(steps):
        target = shell_extremal(base, eig.u.values**2, delta)
        gamma = 1.0
        improved = False
        while gamma >= 1.0 / 16:
            vals = np.clip(V.values + gamma * (target.values - V.values), 0.0, 1.0)
            W = Potential(ScalarField(grid, vals), V.target_mass)
            cand = principal_eigenpair(grid, W, tol=tol, x0=eig.u)
            if cand.lam < eig.lam:
                V, eig, improved = W, cand, True
                break
            gamma *= 0.5
        if not improved:
            break
    return V, eig


def polish_optimum(grid, V, eig, V0, max_rounds=20, cells=(1, 2, 4, 8, 16, 32), max_iter=100, tol=DEFAULT_TOL):
    """Escape nearby lower fixed points left by lattice near-ties.

    Distinct fixed points of the bathtub map can sit a few cells apart with
    eigenvalues differing in the seventh digit.  For small shells around ``V``
    (radius ``2 k h^2`` for ``k`` in ``cells``) this runs :func:`shell_descent`
    from the shell extremal; any point below ``lambda(V)`` seeds a new exact
    fixed-point run, which can only go lower.  Repeats until no radius helps.
    """
    fp_tol = 1e-12 * grid.area
    h2 = grid.cell_area
    limit = 2 * min(V0, grid.area - V0)
    for _ in range(max_rounds):
        moved = False
        for k in cells:
            delta = 2 * k * h2
            if delta >= limit:
                break
            start = shell_extremal(V, eig.u.values**2, delta)
            s_eig = principal_eigenpair(grid, start, tol=tol, x0=eig.u)
            W, w_eig = shell_descent(V, start, s_eig, delta, tol=tol)
            if w_eig.lam >= eig.lam:
                continue
            try:
                V2, eig2, _ = optimize_potential(
                    grid, V0, bathtub_projection(w_eig.u, V0), max_iter=max_iter, fp_tol=fp_tol, tol=tol
                )
            except NoConvergence:
                continue
            if eig2.lam < eig.lam:
                V, eig, moved = V2, eig2, True
                break
        if not moved:
            break
    return V, eig


def random_bang_bang(grid, V0, rng):
    """Bathtub projection of a union of 1-4 random rectangles plus smooth noise."""
    w = grid.nx * grid.h
    hgt = grid.ny * grid.h
    f = np.zeros(grid.n)
    for _ in range(rng.integers(1, 5)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, hgt)
        sx, sy = rng.uniform(0.1, 0.5) * w, rng.uniform(0.1, 0.5) * hgt
        f += (np.abs(grid.x - cx) < sx / 2) & (np.abs(grid.y - cy) < sy / 2)
    noise = ndimage.gaussian_filter(rng.standard_normal(grid.inside.shape), sigma=2.0)
    noise = noise[grid.interior[:, 0], grid.interior[:, 1]]
    noise = (noise - noise.min()) / max(np.ptp(noise), 1e-300)
    return bathtub_projection(ScalarField(grid, f + 0.25 * noise), V0)


def lagrange_multiplier(grid, entry):
    """``-(u^2 on the interface)`` averaged over crossing pairs, with its spread (max - min)."""
    inset = entry.potential.values >= 0.5
    i, j, _ = crossing_pairs(grid, inset)
    if i.size == 0:
        raise EmptyBoundary("potential has no interface inside the domain")
    u = entry.eigen.u.values
    u2 = (0.5 * (u[i] + u[j])) ** 2
    return -float(u2.mean()), float(np.ptp(u2))


def hopf_constant(grid, entry, V0=None):
    """``min(u on the level interface, discrete inf of -du/dnu)``; <= 0 flags degeneracy."""
    u = entry.eigen.u
    V0 = entry.potential.target_mass if V0 is None else V0
    info = level_threshold(u, V0)
    i, j, _ = crossing_pairs(grid, np.asarray(info.above))
    if i.size == 0:
        return 0.0
    value = float((0.5 * (u.values[i] + u.values[j])).min())
    return min(value, boundary_steepness(u, info))


def make_entry(grid, V, eig, start=-1, history=None):
    info = level_threshold(eig.u, V.target_mass)
    entry = RegistryEntry(V, eig, eig.lam, info.mu, np.nan, np.nan, np.nan, discrete_perimeter(V), start, history)
    try:
        entry.multiplier, entry.spread = lagrange_multiplier(grid, entry)
    except EmptyBoundary:
        pass
    entry.hopf = hopf_constant(grid, entry)
    return entry


def _run_start(args):
    grid, V0, seed, max_iter, fp_tol, tol, polish = args
    rng = np.random.default_rng(seed)
    init = random_bang_bang(grid, V0, rng)
    try:
        V, eig, hist = optimize_potential(grid, V0, init, max_iter=max_iter, fp_tol=fp_tol, tol=tol)
    except NoConvergence as exc:
        return None, exc.history
    if polish:
        V, eig = polish_optimum(grid, V, eig, V0, max_iter=max_iter, tol=tol)
    return (V, eig), hist


def enumerate_optima(
    grid,
    V0,
    n_starts=8,
    seed=0,
    cluster_tol=None,
    beta=None,
    max_iter=100,
    fp_tol=None,
    tol=DEFAULT_TOL,
    workers=1,
    polish=True,
):
    """Multistart the fixed-point scheme and collect the distinct best optima.

    Each start is a random bang-bang potential; converged runs are refined by
    :func:`polish_optimum` when ``polish`` is set.  Runs within ``cluster_tol``
    of the best eigenvalue are kept, and any run closer than ``beta`` (L1) to
    an already kept one with lower eigenvalue is merged into it.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    if cluster_tol is None:
        cluster_tol = 1e-6 * abs(dirichlet_ground_eigenvalue(grid))
    if beta is None:
        beta = 0.05 * grid.area
    seeds = np.random.SeedSequence(seed).spawn(n_starts)
    results = pmap(_run_start, [(grid, V0, s, max_iter, fp_tol, tol, polish) for s in seeds], workers)
    histories = [hist for _, hist in results]
    runs = [(k, res) for k, (res, _) in enumerate(results) if res is not None]
    if not runs:
        raise AllRunsFailed(f"none of {n_starts} starts converged")
    best = min(eig.lam for _, (_, eig) in runs)
    keep = sorted(
        ((eig.lam, k, V, eig) for k, (V, eig) in runs if eig.lam <= best + cluster_tol),
        key=lambda t: (t[0], t[1]),
    )
    entries = []
    for lam, k, V, eig in keep:
        if any(l1_distance(V, e.potential) < beta for e in entries):
            continue
        entries.append(make_entry(grid, V, eig, k, histories[k]))
    log.info("registry: %d entries from %d converged starts, lambda_bar=%.10g", len(entries), len(runs), best)
    return OptimalSetRegistry(entries, best, beta, V0, cluster_tol, histories)


def registry_from_potential(grid, V, tol=DEFAULT_TOL, beta=None):
    """Singleton registry around a given (converged) potential."""
    eig = principal_eigenpair(grid, V, tol=tol)
    entry = make_entry(grid, V, eig)
    return OptimalSetRegistry([entry], eig.lam, 0.05 * grid.area if beta is None else beta, V.target_mass)


# ---------------------------------------------------------------- shape check


def smooth_cutoff(r, inner, outer):
    """C-infinity step: 1 for ``r <= inner``, 0 for ``r >= outer``."""
    s = np.clip((np.asarray(r, dtype=float) - inner) / (outer - inner), 0.0, 1.0)

    def g(t):
        return np.where(t > 0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)

    return g(1 - s) / (g(1 - s) + g(s))


def vector_field(center, inner, outer, dilation=0.0, translation=(0.0, 0.0), rotation=0.0):
    """Compactly supported field ``cutoff(|x-c|) * (dilation (x-c) + translation + rotation (x-c)^perp)``."""
    cx, cy = center
    tx, ty = translation

    def phi(x, y):
        dx, dy = x - cx, y - cy
        b = smooth_cutoff(np.hypot(dx, dy), inner, outer)
        return (
            b * (dilation * dx + tx - rotation * dy),
            b * (dilation * dy + ty + rotation * dx),
        )

    return phi


def level_function_from_eigen(grid, u, mu):
    """Approximate signed distance ``(mu - u) / |grad u|`` to ``{u > mu}``, as a callable."""
    lat = grid.to_lattice(u.values)
    gx, gy = np.gradient(lat, grid.h)
    grad = np.maximum(np.hypot(gx, gy), 1e-3 * max(np.abs(gx).max(), np.abs(gy).max(), 1e-300))
    psi = (mu - lat) / grad
    return _interpolant(grid, psi)


def level_function_from_mask(grid, V):
    """Signed Euclidean distance to ``{V >= 1/2}`` (negative inside), as a callable."""
    lat = grid.to_lattice(V.values) >= 0.5
    out = ndimage.distance_transform_edt(~lat) * grid.h
    ins = ndimage.distance_transform_edt(lat) * grid.h
    return _interpolant(grid, np.where(lat, 0.5 * grid.h - ins, out - 0.5 * grid.h))


def _interpolant(grid, lattice_values):
    xs, ys = grid.lattice_coords()
    interp = RegularGridInterpolator((xs, ys), lattice_values, bounds_error=False, fill_value=None)

    def psi(x, y):
        pts = np.column_stack([np.ravel(x), np.ravel(y)])
        return interp(pts).reshape(np.shape(x))

    return psi


@dataclass
class ShapeCheckReport:
    t_values: np.ndarray
    slopes: np.ndarray  # central FD slopes of the Lagrangian
    slopes_lambda: np.ndarray
    slopes_volume: np.ndarray
    predicted: float
    predicted_lambda: float
    predicted_volume: float
    multiplier: float
    base_lambda: float

    @property
    def fd_slope(self):
        return float(self.slopes[0])

    @property
    def relative_error(self):
        return abs(self.fd_slope - self.predicted) / max(abs(self.predicted), 1e-300)


def _coverage(psi_vals, h, mode):
    if mode == "linear":
        return np.clip(0.5 - psi_vals / h, 0.0, 1.0)
    if mode == "sharp":
        return (psi_vals < 0).astype(float)
    raise ValueError(f"unknown coverage mode {mode!r}")


def _lattice_bilinear(grid, values):
    return _interpolant(grid, grid.to_lattice(values))


def boundary_integrals(grid, psi, phi, u_values):
    """``(int u^2 Phi.nu, int Phi.nu)`` over the zero contour of ``psi``."""
    xs, ys = grid.lattice_coords()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    lat = psi(X, Y)
    u_interp = _lattice_bilinear(grid, u_values)
    flux_u2 = 0.0
    flux = 0.0
    eps = 0.25 * grid.h
    for contour in measure.find_contours(lat, 0.0):
        pts = contour * grid.h  # (i, j) index space -> (x, y)
        a, b = pts[:-1], pts[1:]
        mid = 0.5 * (a + b)
        seg = b - a
        length = np.hypot(seg[:, 0], seg[:, 1])
        normal = np.column_stack([seg[:, 1], -seg[:, 0]]) / np.maximum(length, 1e-300)[:, None]
        mx, my = mid[:, 0], mid[:, 1]
        gx = psi(mx + eps, my) - psi(mx - eps, my)
        gy = psi(mx, my + eps) - psi(mx, my - eps)
        flip = normal[:, 0] * gx + normal[:, 1] * gy < 0
        normal[flip] *= -1
        px, py = phi(mx, my)
        phin = px * normal[:, 0] + py * normal[:, 1]
        u2 = u_interp(mx, my) ** 2
        flux_u2 += float(np.sum(u2 * phin * length))
        flux += float(np.sum(phin * length))
    return flux_u2, flux


def shape_derivative_check(
    grid, entry, phi, t_values, level_set=None, multiplier=None, coverage="linear", tol=DEFAULT_TOL
):
    """Finite-difference slope of ``lambda(E_t) - Lambda Vol(E_t)`` against the boundary formula.

    The set ``E`` is ``{psi < 0}``; it is deformed by ``psi_t(x) = psi(x - t Phi(x))``
    without volume renormalization and re-sampled as a potential.  With
    ``coverage="linear"`` cells in a one-cell band carry the fraction
    ``clip(1/2 - psi_t/h, 0, 1)``, which keeps ``t -> lambda(E_t)`` Lipschitz;
    ``"sharp"`` thresholds to a bang-bang indicator.

    The prediction is ``-int u_E^2 Phi.nu + (-Lambda) int Phi.nu`` over the zero
    contour of ``psi``, where ``u_E`` is the eigenfunction of the undeformed set.
    """
    if level_set is None:
        level_set = level_function_from_eigen(grid, entry.eigen.u, entry.mu)
    Lam = entry.multiplier if multiplier is None else multiplier
    h = grid.h
    x, y = grid.x, grid.y
    px, py = phi(x, y)
    border = grid.boundary_adjacency.any(axis=1)

    def sample(t):
        vals = _coverage(level_set(x - t * px, y - t * py), h, coverage)
        if np.any(vals[border] > 0):
            raise DeformationEscapes(f"deformed set reaches the domain boundary at t={t!r}")
        return Potential.from_values(grid, vals)

    V_base = sample(0.0)
    base = principal_eigenpair(grid, V_base, tol=tol)
    t_values = np.asarray(sorted(t_values), dtype=float)
    sl, sl_lam, sl_vol = [], [], []
    for t in t_values:
        vals = {}
        for s in (t, -t):
            V = sample(s)
            vals[s] = (principal_eigenpair(grid, V, tol=tol, x0=base.u).lam, V.mass)
        dlam = (vals[t][0] - vals[-t][0]) / (2 * t)
        dvol = (vals[t][1] - vals[-t][1]) / (2 * t)
        sl_lam.append(dlam)
        sl_vol.append(dvol)
        sl.append(dlam - Lam * dvol)
    flux_u2, flux = boundary_integrals(grid, level_set, phi, base.u.values)
    return ShapeCheckReport(
        t_values,
        np.array(sl),
        np.array(sl_lam),
        np.array(sl_vol),
        -flux_u2 - Lam * flux,
        -flux_u2,
        flux,
        float(Lam),
        base.lam,
    )
