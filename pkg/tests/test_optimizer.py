import math

import numpy as np
import pytest
from scipy import ndimage

from turnpike_lab.bathtub import bathtub_projection, level_threshold
from turnpike_lab.errors import AllRunsFailed, DeformationEscapes
from turnpike_lab.experiments import centered_ball
from turnpike_lab.grid import Disk, Potential, Rectangle, ScalarField, build_grid, l1_distance
from turnpike_lab.optimizer import (
    RegistryEntry,
    enumerate_optima,
    hopf_constant,
    lagrange_multiplier,
    make_entry,
    optimize_potential,
    random_bang_bang,
    shape_derivative_check,
    vector_field,
)
from turnpike_lab.spectral import DEFAULT_TOL, EigenPair, dirichlet_ground_eigenvalue, principal_eigenpair

from conftest import exact_fp


def components(grid, V):
    lat = grid.to_lattice(V.values) >= 0.5
    return ndimage.label(lat)[1]


def test_square_descent_from_uniform(square32):
    V0 = 0.25 * square32.area
    V, eig, hist = optimize_potential(square32, V0, Potential.uniform(square32, V0), fp_tol=exact_fp(square32))
    assert hist.converged
    assert np.all(np.diff(hist.lambdas) <= 2 * DEFAULT_TOL)
    assert hist.lambdas[-1] < hist.lambdas[0]
    assert components(square32, V) == 1


def test_disk_optimum_is_centered_disk(disk32_registry, disk32):
    e = disk32_registry[0]
    V0 = disk32_registry.V0
    ball = centered_ball(disk32, V0)
    diff = np.abs(e.potential.values - ball.values) > 0.5
    r0 = math.sqrt(V0 / math.pi)
    r = np.hypot(disk32.x - 1, disk32.y - 1)
    # every misplaced cell hugs the circle of area V0
    assert np.all(np.abs(r[diff] - r0) <= 1.5 * disk32.h)


def test_refeeding_a_fixed_point(disk32_registry, disk32):
    e = disk32_registry[0]
    V, eig, hist = optimize_potential(disk32, disk32_registry.V0, e.potential, fp_tol=exact_fp(disk32))
    assert hist.iterations == 1
    assert hist.iterates[0][1] == 0
    np.testing.assert_array_equal(V.values, e.potential.values)


def test_mass_mismatch_rejected(square16):
    with pytest.raises(ValueError):
        optimize_potential(square16, 0.3 * square16.area, Potential.uniform(square16, 0.2 * square16.area))


@pytest.mark.parametrize("reg_name", ["disk32_registry", "square32_registry"])
def test_registry_invariants(reg_name, request):
    reg = request.getfixturevalue(reg_name)
    grid = reg.grid
    lamD = dirichlet_ground_eigenvalue(grid)
    assert reg.lambda_bar >= lamD - 1
    for k, e in enumerate(reg):
        assert abs(e.lam - reg.lambda_bar) <= reg.cluster_tol
        assert l1_distance(e.potential, bathtub_projection(e.eigen.u, reg.V0)) <= exact_fp(grid)
        frac = e.potential.values[(e.potential.values > 0) & (e.potential.values < 1)]
        assert np.unique(np.round(frac, 9)).size <= 1
        assert e.hopf > 0
        for other in reg.entries[k + 1 :]:
            assert l1_distance(e.potential, other.potential) >= reg.dedupe_radius
    for hist in reg.histories:
        assert np.all(np.diff(hist.lambdas) <= 2 * DEFAULT_TOL)


def test_disk_registry_is_single(disk32):
    reg = enumerate_optima(disk32, 0.3 * disk32.area, n_starts=8, seed=3, fp_tol=exact_fp(disk32))
    assert len(reg) == 1


def test_single_start(square16):
    reg = enumerate_optima(square16, 0.2 * square16.area, n_starts=1, seed=1)
    assert len(reg) == 1
    assert reg[0].start == 0


def test_square_small_mass_clusters(square32):
    reg = enumerate_optima(square32, 0.1 * square32.area, n_starts=16, seed=0, fp_tol=exact_fp(square32))
    lams = [e.lam for e in reg]
    assert max(lams) - min(lams) <= reg.cluster_tol


def test_all_runs_failed(square32):
    with pytest.raises(AllRunsFailed):
        enumerate_optima(square32, 0.3 * square32.area, n_starts=2, max_iter=1, fp_tol=0.0, polish=False)
    with pytest.raises(ValueError):
        enumerate_optima(square32, 0.3 * square32.area, n_starts=0)


def test_transpose_equivariance(square32):
    V0 = 0.2 * square32.area
    perm = square32.index[square32.interior[:, 1], square32.interior[:, 0]]
    for s in range(3):
        init = random_bang_bang(square32, V0, np.random.default_rng(s))
        flipped = Potential.from_values(square32, init.values[perm], V0)
        a, _, _ = optimize_potential(square32, V0, init, fp_tol=exact_fp(square32))
        b, _, _ = optimize_potential(square32, V0, flipped, fp_tol=exact_fp(square32))
        np.testing.assert_array_equal(a.values[perm], b.values)


def test_multiplier_matches_level(disk32_registry):
    e = disk32_registry[0]
    Lam, spread = lagrange_multiplier(e.grid, e)
    assert Lam == pytest.approx(-e.mu**2, rel=0.05)
    assert Lam == e.multiplier


def test_multiplier_spread_discriminates(disk32_registry, disk32, rng):
    e = disk32_registry[0]
    u2 = disk32.to_lattice(e.eigen.u.values**2)
    grad = max(np.abs(np.gradient(u2, disk32.h)).max(axis=(1, 2)))
    assert e.spread <= 2 * disk32.h * grad
    V = random_bang_bang(disk32, disk32_registry.V0, rng)
    rand = make_entry(disk32, V, principal_eigenpair(disk32, V))
    assert rand.spread > 3 * e.spread


def test_hopf_degrades_when_set_fills_domain(disk32, disk32_registry):
    V0 = 0.97 * disk32.area
    reg = enumerate_optima(disk32, V0, n_starts=1, seed=0, fp_tol=exact_fp(disk32))
    assert reg[0].hopf < 0.25 * disk32_registry[0].hopf


def test_hopf_of_flat_field(disk32_registry, disk32):
    e = disk32_registry[0]
    flat = ScalarField.constant(disk32, 1.0)
    fake = RegistryEntry(e.potential, EigenPair(e.lam, flat, 0.0), e.lam, 1.0, 0, 0, 0, 0)
    assert hopf_constant(disk32, fake) == 0


def test_tangential_field_has_no_slope(disk32_registry, disk32):
    e = disk32_registry[0]
    r0 = math.sqrt(disk32_registry.V0 / math.pi)
    phi = vector_field((1.0, 1.0), 1.2 * r0, 1.7 * r0, rotation=1.0)
    c = (1.0, 1.0)
    rep = shape_derivative_check(
        disk32, e, phi, [disk32.h], level_set=lambda x, y: np.hypot(x - c[0], y - c[1]) - r0
    )
    assert abs(rep.predicted) < 1e-3 * abs(rep.predicted_lambda) + 1e-12
    assert abs(rep.fd_slope) < 1e-6


def test_deformation_escaping_domain(disk32_registry, disk32):
    e = disk32_registry[0]
    phi = vector_field((1.0, 1.0), 5.0, 6.0, translation=(1.0, 0.0))
    with pytest.raises(DeformationEscapes):
        shape_derivative_check(disk32, e, phi, [0.6])
