"""Level-set thresholding, decreasing rearrangement and bathtub stability diagnostics.

For a field ``f`` and a mass ``V0`` the bathtub projection is the maximizer of
``h^2 sum f V`` over potentials ``0 <= V <= 1`` of mass ``V0``: fill the cells
in decreasing order of ``f``.  Cells whose value equals the threshold (up to a
relative tolerance, so lattice-symmetric values that differ by round-off count
as equal) share a common fill fraction, which keeps the projection exact and
symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDistance, MassOutOfRange, ShellInfeasible
from .grid import Potential, ScalarField, _values, l1_distance

TIE_RTOL = 1e-10


@dataclass(frozen=True)
class LevelSetInfo:
    mu: float
    strict_mass: float
    closed_mass: float
    fraction_on_level: float
    above: np.ndarray = field(repr=False)
    tie: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class RearrangementProfile:
    sorted_values: np.ndarray
    cumulative_measure: np.ndarray
    distribution: np.ndarray

    def measure_at_least(self, t):
        """``|{f >= t}|`` read off the profile."""
        desc = self.sorted_values
        count = np.searchsorted(-desc, -t, side="right")
        return float(count * self.cumulative_measure[0]) if desc.size else 0.0


def _tie_atol(values, rtol):
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    return rtol * scale if scale > 0 else 0.0


def level_threshold(f, V0, rtol=TIE_RTOL):
    """Volume-matching threshold of ``f``.

    ``mu`` is the value of the cell that is filled last when cells are taken in
    decreasing order of ``f`` until the mass reaches ``V0``.  When ``V0`` is an
    exact multiple ``k h^2`` and values are distinct, this is the (k+1)-th
    largest value, so ``{f > mu}`` is exactly the selected set.
    """
    grid = f.grid
    vals = _values(f)
    h2 = grid.cell_area
    if not (0 < V0 < grid.area):
        raise MassOutOfRange(f"V0={V0!r} must lie in (0, {grid.area!r})")
    cells = V0 / h2
    k = int(math.floor(cells + 1e-9))
    k = min(k, grid.n - 1)
    order = np.sort(vals)[::-1]
    mu = float(order[k])
    atol = _tie_atol(vals, rtol)
    above = vals > mu + atol
    tie = ~above & (vals >= mu - atol)
    n_above = int(above.sum())
    n_tie = int(tie.sum())
    strict = n_above * h2
    closed = (n_above + n_tie) * h2
    frac = (cells - n_above) / n_tie if n_tie else 0.0
    frac = min(max(frac, 0.0), 1.0)
    above.setflags(write=False)
    tie.setflags(write=False)
    return LevelSetInfo(mu, strict, closed, float(frac), above, tie)


def bathtub_projection(f, V0, rtol=TIE_RTOL):
    """Maximizer of ``h^2 sum f V`` over the admissible potentials of mass ``V0``."""
    info = level_threshold(f, V0, rtol)
    vals = info.above.astype(float)
    vals[info.tie] = info.fraction_on_level
    return Potential(ScalarField(f.grid, vals), float(V0))


def decreasing_rearrangement(f):
    grid = f.grid
    vals = _values(f)
    desc = np.sort(vals)[::-1]
    h2 = grid.cell_area
    cumulative = h2 * np.arange(1, desc.size + 1)
    # Z_f(s_i) = |{f >= s_i}|; ties share the largest rank
    counts = np.searchsorted(-desc, -desc, side="right")
    return RearrangementProfile(desc, cumulative, h2 * counts)


def _perp_derivative(vals, nb, idx, axis, h):
    """Centred difference of ``vals`` at cells ``idx`` along ``axis`` (0=x, 1=y),
    one-sided where a neighbour is missing."""
    plus = nb[idx, 2 * axis]
    minus = nb[idx, 2 * axis + 1]
    vp = np.where(plus >= 0, vals[np.maximum(plus, 0)], np.nan)
    vm = np.where(minus >= 0, vals[np.maximum(minus, 0)], np.nan)
    v0 = vals[idx]
    both = (plus >= 0) & (minus >= 0)
    d = np.zeros(idx.size)
    d[both] = (vp[both] - vm[both]) / (2 * h)
    only_p = (plus >= 0) & (minus < 0)
    d[only_p] = (vp[only_p] - v0[only_p]) / h
    only_m = (plus < 0) & (minus >= 0)
    d[only_m] = (v0[only_m] - vm[only_m]) / h
    return d


def crossing_pairs(grid, above):
    """Ordered 4-neighbour pairs ``(i, j, axis)`` with ``above[i]`` and not ``above[j]``."""
    nb = grid.neighbors
    ii, jj, axes = [], [], []
    for col in range(4):
        j = nb[:, col]
        sel = above & (j >= 0)
        sel[sel] &= ~above[j[sel]]
        i = np.nonzero(sel)[0]
        ii.append(i)
        jj.append(j[i])
        axes.append(np.full(i.size, col // 2))
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(axes)


def interface_gradient(f, above):
    """Gradient magnitude of ``f`` at the midpoint of every crossing pair."""
    grid = f.grid
    vals = _values(f)
    h = grid.h
    i, j, axis = crossing_pairs(grid, above)
    if i.size == 0:
        return np.zeros(0), i, j
    along = np.abs(vals[i] - vals[j]) / h
    perp = np.empty(i.size)
    for ax in (0, 1):
        sel = axis == ax
        other = 1 - ax
        perp[sel] = 0.5 * (
            _perp_derivative(vals, grid.neighbors, i[sel], other, h)
            + _perp_derivative(vals, grid.neighbors, j[sel], other, h)
        )
    return np.hypot(along, perp), i, j


def boundary_steepness(f, info):
    """Discrete ``inf(-df/dnu)`` on the level interface; 0 when no pair crosses it.

    Each crossing pair contributes the gradient magnitude at its midpoint: the
    one-sided difference across the pair combined with the centred difference
    along the interface.
    """
    grad, _, _ = interface_gradient(f, np.asarray(info.above))
    return float(grad.min()) if grad.size else 0.0


def discrete_perimeter(indicator):
    """Staircase perimeter of ``{V >= 1/2}``: interface edges plus edges on the domain boundary."""
    grid = indicator.grid
    inset = _values(indicator) >= 0.5
    nb = grid.neighbors
    edges = 0
    for col in (0, 2):
        j = nb[:, col]
        ok = j >= 0
        edges += int(np.sum(inset[ok] != inset[j[ok]]))
    edges += int(np.sum(grid.boundary_adjacency[inset]))
    return grid.h * edges


def ball_perimeter(V0):
    """Perimeter of the disk of area ``V0``."""
    return 2.0 * math.sqrt(math.pi * V0)


def bathtub_stability_ratio(f, V, V0, rtol=TIE_RTOL):
    """``gap / dist^2`` with ``gap = h^2 sum f (V_f - V)`` and ``dist = |V - V_f|_1``."""
    Vf = bathtub_projection(f, V0, rtol)
    grid = f.grid
    dist = l1_distance(V, Vf)
    if dist <= 1e-15 * grid.area:
        raise DegenerateDistance("V coincides with the bathtub projection")
    gap = grid.cell_area * float(_values(f) @ (Vf.values - _values(V, grid)))
    return gap / dist**2


def _fill(order, capacity, amount):
    """Take ``amount`` from ``capacity`` following ``order``; last cell partial."""
    cap = capacity[order]
    cum = np.cumsum(cap)
    take = np.zeros(capacity.size)
    k = int(np.searchsorted(cum, amount, side="left"))
    if k >= order.size:
        if amount > cum[-1] * (1 + 1e-12):
            raise ShellInfeasible(f"cannot move {amount!r}, capacity {cum[-1]!r}")
        k = order.size - 1
    take[order[:k]] = cap[:k]
    rest = amount - (cum[k - 1] if k > 0 else 0.0)
    take[order[k]] = min(max(rest, 0.0), cap[k])
    return take


def shell_split(base):
    """Cells that can lose mass (``base >= 1/2``) and their capacities."""
    vals = _values(base)
    inner_mask = vals >= 0.5
    cap_out = np.where(inner_mask, vals, 0.0)
    cap_in = np.where(inner_mask, 0.0, 1.0 - vals)
    return inner_mask, cap_out, cap_in


def move_mass(base, delta, remove_order, add_order):
    """Shift mass ``delta/2`` out of the base set and ``delta/2`` into its complement.

    The result has the mass of ``base``, stays in ``[0, 1]`` and lies at L1
    distance exactly ``delta`` from ``base``.
    """
    grid = base.grid
    h2 = grid.cell_area
    _, cap_out, cap_in = shell_split(base)
    half = 0.5 * delta / h2
    down = _fill(remove_order, cap_out, half)
    up = _fill(add_order, cap_in, half)
    vals = _values(base) - down + up
    return Potential(ScalarField(grid, np.clip(vals, 0.0, 1.0)), base.target_mass)


def shell_extremal(base, score, delta):
    """Element of ``{V : |V - base|_1 = delta}`` maximizing ``sum score * V``.

    Mass leaves the lowest-scoring cells of the base set and enters the
    highest-scoring cells outside it.
    """
    inner_mask, _, _ = shell_split(base)
    s = score if isinstance(score, np.ndarray) else _values(score)
    idx_in = np.nonzero(inner_mask)[0]
    idx_out = np.nonzero(~inner_mask)[0]
    remove_order = idx_in[np.argsort(s[idx_in], kind="stable")]
    add_order = idx_out[np.argsort(-s[idx_out], kind="stable")]
    return move_mass(base, delta, remove_order, add_order)


def bathtub_extremal(f, V0, delta, rtol=TIE_RTOL):
    """Maximizer of ``h^2 sum f V`` on the L1 sphere of radius ``delta`` around ``V_f``."""
    return shell_extremal(bathtub_projection(f, V0, rtol), f, delta)
