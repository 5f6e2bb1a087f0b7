"""Principal Dirichlet eigenpair of ``-Delta_h - V``.

The smallest eigenvalue is found by shifted inverse iteration.  Any potential
with ``0 <= V <= 1`` satisfies ``lambda_D - 1 <= lambda(V) <= lambda_D``, where
``lambda_D`` is the ground eigenvalue of ``-Delta_h``, so the shift
``lambda_D - 2`` sits strictly below the spectrum and the shifted operator is
symmetric positive definite with smallest eigenvalue at least 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Degenerate, NoConvergence, ZeroField
from .grid import Potential, ScalarField, _values

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class EigenPair:
    lam: float
    u: ScalarField
    residual: float
    iterations: int = 0

    @property
    def values(self):
        return self.u.values


def _potential_values(grid, V):
    if V is None:
        return np.zeros(grid.n)
    if isinstance(V, np.ndarray):
        return V
    return _values(V, grid)


MIN_GAP = 1e-8


def shifted_solver(matrix, method="direct"):
    """Return ``solve(b, x0=None)`` for the SPD ``matrix``."""
    if method == "direct":
        lu = spla.splu(sp.csc_matrix(matrix))
        return lambda b, x0=None: lu.solve(b)
    if method == "cg":
        diag = matrix.diagonal()
        precond = spla.LinearOperator(matrix.shape, matvec=lambda r: r / diag)

        def solve(b, x0=None):
            x, info = spla.cg(matrix, b, x0=x0, rtol=1e-13, atol=0.0, maxiter=20 * matrix.shape[0], M=precond)
            if info != 0:
                raise NoConvergence(f"conjugate gradients stopped with info={info}")
            return x

        return solve
    raise ValueError(f"unknown linear solver {method!r}")


def _inverse_iteration(grid, vvals, shift, tol, x0, max_iter, method):
    h2 = grid.cell_area
    op = grid.laplacian - sp.diags(vvals)
    solve = shifted_solver(op - shift * sp.identity(grid.n, format="csr"), method)

    x = np.ones(grid.n) if x0 is None else np.array(_potential_values(grid, x0), dtype=float)
    if x.sum() < 0:
        x = -x
    x /= np.sqrt(h2 * (x @ x))
    history = []
    best = np.inf
    for it in range(1, max_iter + 1):
        y = solve(x, x)
        y /= np.sqrt(h2 * (y @ y))
        if y.sum() < 0:
            y = -y
        ay = op @ y
        lam = h2 * (ay @ y)
        res = np.sqrt(h2 * np.sum((ay - lam * y) ** 2))
        best = min(best, res)
        history.append(res)
        x = y
        if res <= tol and y.min() > 0:
            return EigenPair(float(lam), ScalarField(grid, y), float(res), it)
        # the residual contracts like q = (lambda_1 - shift) / (lambda_2 - shift)
        # per step, so the rate over the last ten steps estimates the gap
        if it > 20:
            q = (res / history[-11]) ** 0.1 if history[-11] > 0 else 0.0
            gap = (lam - shift) * (1.0 / q - 1.0) if q < 1 else 0.0
            if gap < MIN_GAP:
                raise Degenerate(
                    f"estimated spectral gap {gap:.3e} below {MIN_GAP:g} "
                    f"(Rayleigh quotient {lam:.12g}, residual {res:.3e})"
                )
    raise NoConvergence(f"inverse iteration did not reach residual {tol:g} in {max_iter} iterations", best=best)


def dirichlet_ground_eigenvalue(grid, tol=DEFAULT_TOL, method="direct"):
    """Ground eigenvalue of ``-Delta_h`` on ``grid`` (cached on the grid)."""
    cache = grid.__dict__.setdefault("ground_eigenvalue", {})
    if tol not in cache:
        # -Delta_h is SPD, so zero is a valid shift
        cache[tol] = _inverse_iteration(grid, np.zeros(grid.n), 0.0, tol, None, 500, method).lam
    return cache[tol]


def principal_eigenpair(grid, V=None, tol=DEFAULT_TOL, x0=None, max_iter=200, method="direct"):
    """Smallest eigenvalue of ``-Delta_h - diag(V)`` with its positive normalized eigenvector.

    Parameters
    ----------
    grid : GridDomain
    V : Potential, ScalarField, ndarray or None
        Potential values in ``[0, 1]``; None means ``V = 0``.
    tol : float
        Bound on the ``h^2``-weighted residual norm.
    x0 : optional
        Warm start, typically the eigenvector of a nearby potential.
    method : {"direct", "cg"}
        Linear solver for the shifted systems.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    vvals = _potential_values(grid, V)
    shift = dirichlet_ground_eigenvalue(grid, method=method) - 2.0
    return _inverse_iteration(grid, vvals, shift, tol, x0, max_iter, method)


def rayleigh_quotient(grid, u, V=None):
    uv = u if isinstance(u, np.ndarray) else _values(u, grid)
    vvals = _potential_values(grid, V)
    h2 = grid.cell_area
    norm2 = h2 * (uv @ uv)
    if norm2 == 0:
        raise ZeroField("Rayleigh quotient of the zero field")
    return float((h2 * (uv @ (grid.laplacian @ uv)) - h2 * (vvals * uv) @ uv) / norm2)


def eigenvalue(grid, V, tol=DEFAULT_TOL, x0=None):
    """Shorthand for ``principal_eigenpair(...).lam``."""
    return principal_eigenpair(grid, V, tol=tol, x0=x0).lam


__all__ = [
    "EigenPair",
    "dirichlet_ground_eigenvalue",
    "principal_eigenpair",
    "rayleigh_quotient",
    "eigenvalue",
]
