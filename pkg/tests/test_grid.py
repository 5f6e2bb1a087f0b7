import math
import pickle

import numpy as np
import pytest
from hypothesis import given, strategies as st

from turnpike_lab.errors import Disconnected, EmptyInterior, GridMismatch
from turnpike_lab.grid import (
    Disk,
    Mask,
    Potential,
    Rectangle,
    ScalarField,
    build_grid,
    inner,
    integrate,
    l1_distance,
    laplacian_apply,
)

seeds = st.integers(0, 2**32 - 1)


def test_unit_square_resolution_4_has_nine_nodes():
    g = build_grid(Rectangle(1, 1), 4)
    assert g.n == 9
    assert g.h == 0.25
    assert sorted(set(g.x)) == [0.25, 0.5, 0.75]
    assert g.area == pytest.approx(9 * 0.0625)


def test_disk_area_close_to_circle():
    g = build_grid(Disk(0.5), 64)
    assert abs(g.area - math.pi / 4) / (math.pi / 4) < 0.02


def test_degenerate_side_is_empty():
    with pytest.raises(EmptyInterior):
        build_grid(Rectangle(1, 0), 7)


def test_disconnected_mask():
    bm = np.zeros((20, 10), bool)
    bm[1:8, 1:9] = True
    bm[12:19, 1:9] = True
    with pytest.raises(Disconnected):
        build_grid(Mask(bm), 20)


def test_resolution_must_be_at_least_two():
    with pytest.raises(ValueError):
        build_grid(Rectangle(1, 1), 1)


def test_sine_mode_is_exact_eigenvector():
    g = build_grid(Rectangle(1, 1), 32)
    u = ScalarField.from_function(g, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    lam = (2 / g.h**2) * (2 - 2 * math.cos(math.pi * g.h))
    np.testing.assert_allclose(laplacian_apply(g, u).values, lam * u.values, rtol=1e-12, atol=1e-10)


def test_zero_maps_to_zero(square16):
    assert not laplacian_apply(square16, ScalarField.constant(square16, 0)).values.any()


def test_single_cell_stencil(square16):
    k = square16.index[8, 8]
    e = np.zeros(square16.n)
    e[k] = 1.0
    out = laplacian_apply(square16, ScalarField(square16, e)).values
    h2 = square16.cell_area
    assert out[k] == pytest.approx(4 / h2)
    nbrs = square16.neighbors[k]
    assert np.all(nbrs >= 0)
    np.testing.assert_allclose(out[nbrs], -1 / h2)
    others = np.setdiff1d(np.arange(square16.n), np.append(nbrs, k))
    assert not out[others].any()


def test_boundary_neighbours_are_dirichlet(square16):
    k = square16.index[1, 1]
    assert square16.boundary_adjacency[k].sum() == 2
    e = np.zeros(square16.n)
    e[k] = 1.0
    out = laplacian_apply(square16, ScalarField(square16, e)).values
    assert out.sum() == pytest.approx(2 / square16.cell_area)


def test_grid_mismatch(square16, square32):
    with pytest.raises(GridMismatch):
        laplacian_apply(square16, ScalarField.constant(square32, 1))
    with pytest.raises(GridMismatch):
        integrate(square16, ScalarField.constant(square32, 1))
    with pytest.raises(GridMismatch):
        l1_distance(ScalarField.constant(square16, 1), ScalarField.constant(square32, 1))


def test_integrate_examples(square16):
    n = square16.resolution
    assert integrate(square16, ScalarField.constant(square16, 1)) == pytest.approx((n - 1) ** 2 * square16.cell_area)
    assert integrate(square16, ScalarField.constant(square16, 1)) == pytest.approx(square16.area)
    assert integrate(square16, ScalarField.constant(square16, 0)) == 0
    ind = np.zeros(square16.n)
    ind[:7] = 1
    assert integrate(square16, ScalarField(square16, ind)) == pytest.approx(7 * square16.cell_area)


def test_l1_examples(square16):
    a = np.zeros(square16.n)
    b = np.zeros(square16.n)
    a[:5] = 1
    b[10:13] = 1
    fa, fb = ScalarField(square16, a), ScalarField(square16, b)
    assert l1_distance(fa, fa) == 0
    assert l1_distance(fa, fb) == pytest.approx(8 * square16.cell_area)
    one, zero = ScalarField.constant(square16, 1), ScalarField.constant(square16, 0)
    assert l1_distance(one, zero) == pytest.approx(square16.area)


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_laplacian_linear(square16, seed, a, b):
    r = np.random.default_rng(seed)
    u, v = r.standard_normal((2, square16.n))
    lhs = laplacian_apply(square16, ScalarField(square16, a * u + b * v)).values
    rhs = a * laplacian_apply(square16, ScalarField(square16, u)).values + b * laplacian_apply(
        square16, ScalarField(square16, v)
    ).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@given(seeds)
def test_laplacian_symmetric_and_positive(square16, seed):
    r = np.random.default_rng(seed)
    u, v = (ScalarField(square16, x) for x in r.standard_normal((2, square16.n)))
    Lu, Lv = laplacian_apply(square16, u), laplacian_apply(square16, v)
    assert inner(square16, Lu, v) == pytest.approx(inner(square16, u, Lv), rel=1e-12, abs=1e-9)
    assert inner(square16, Lu, u) > 0


@given(seeds)
def test_l1_triangle_inequality(square16, seed):
    r = np.random.default_rng(seed)
    a, b, c = (ScalarField(square16, x) for x in r.standard_normal((3, square16.n)))
    assert l1_distance(a, c) <= l1_distance(a, b) + l1_distance(b, c) + 1e-12
    assert l1_distance(a, b) == pytest.approx(l1_distance(b, a))


def test_potential_validation(square16):
    with pytest.raises(ValueError):
        Potential(ScalarField.constant(square16, 1.5), 1.5 * square16.area)
    with pytest.raises(ValueError):
        Potential(ScalarField.constant(square16, 0.5), 0.4 * square16.area)
    V = Potential.uniform(square16, 0.3 * square16.area)
    assert V.mass == pytest.approx(0.3 * square16.area, abs=1e-12 * square16.area)


def test_fields_are_immutable(square16):
    u = ScalarField.constant(square16, 1)
    with pytest.raises(ValueError):
        u.values[0] = 2
    with pytest.raises(ValueError):
        ScalarField(square16, np.full(square16.n, np.nan))


def test_grid_pickles_and_compares():
    g = build_grid(Disk(1.0), 16)
    _ = g.laplacian
    g2 = pickle.loads(pickle.dumps(g))
    assert g2 == g
    assert (g2.laplacian != g.laplacian).nnz == 0
    assert build_grid(Disk(1.0), 17) != g
