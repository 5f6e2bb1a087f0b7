"""Bilinear parabolic control: maximize the terminal mass of ``y' = Delta y + V y``.

Time is split into ``nt`` slices of length ``dt`` with a constant potential
``V_k`` on slice ``k``.  Implicit Euler gives

    A_k y_{k+1} = y_k,    A_k = I + dt (-Delta_h - V_k),

and the objective is ``J = h^2 sum y_nt``.  Every ``A_k`` is a symmetric
M-matrix, so states stay nonnegative and the exact discrete adjoint is
``p_nt = 1``, ``A_k p_k = p_{k+1}``.  Perturbing ``V_k`` by ``dV`` changes ``J``
by ``h^2 sum dt * y_{k+1} * p_k * dV``: the state that slice ``k`` produces
times the adjoint that slice ``k`` consumes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bathtub import bathtub_projection
from .errors import GridMismatch, LabError, LengthMismatch, LinearSolveFailure, NoConvergence
from .grid import Potential, ScalarField, _values
from .parallel import pmap
from .spectral import DEFAULT_TOL, principal_eigenpair, shifted_solver
from .stability import dist_to_registry

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_BACKTRACK = 30


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Piecewise-constant-in-time potential: ``slices[k]`` acts on ``(k dt, (k+1) dt]``."""

    grid: object
    T: float
    nt: int
    slices: tuple

    def __post_init__(self):
        if not (self.T > 0) or self.nt < 1:
            raise ValueError(f"need T > 0 and nt >= 1, got T={self.T!r}, nt={self.nt!r}")
        slices = tuple(self.slices)
        if len(slices) != self.nt:
            raise LengthMismatch(f"{len(slices)} slices for nt={self.nt}")
        for V in slices:
            if not isinstance(V, Potential):
                raise TypeError("slices must be Potentials")
            if V.grid != self.grid:
                raise GridMismatch(f"slice lives on {V.grid!r}, trajectory on {self.grid!r}")
        object.__setattr__(self, "slices", slices)

    @property
    def dt(self):
        return self.T / self.nt

    @property
    def times(self):
        """Left endpoints ``k dt`` of the slices."""
        return self.dt * np.arange(self.nt)

    @classmethod
    def static(cls, grid, V, T, nt):
        return cls(grid, float(T), int(nt), (V,) * int(nt))

    @classmethod
    def uniform(cls, grid, V0, T, nt):
        return cls.static(grid, Potential.uniform(grid, V0), T, nt)

    def values(self):
        return np.stack([V.values for V in self.slices])


@dataclass
class TurnpikeReport:
    T: float
    nt: int
    objective: float
    turnpike_integral: float
    per_slice_dist: np.ndarray = field(repr=False)
    A0: float
    decay_fit: dict = field(default_factory=dict)
    gronwall_margin: float = math.nan
    gronwall_margin_raw: float = math.nan
    static_objective: float = math.nan
    iterations: int = 0
    fw_gap: float = math.nan
    objective_history: list = field(default_factory=list, repr=False)
    no_improvement: bool = False
    error: str | None = None


def _check_y0(grid, y0):
    vals = np.asarray(_values(y0, grid) if not isinstance(y0, np.ndarray) else y0, dtype=float)
    if vals.shape != (grid.n,):
        raise LengthMismatch(f"initial state has shape {vals.shape}, grid has {grid.n} nodes")
    if np.any(vals < 0) or not np.any(vals > 0):
        raise ValueError("initial state must be nonnegative and not identically zero")
    return vals


def step_operators(grid, traj, method="direct"):
    """One solver per slice for ``A_k``; identical slices share a factorization."""
    dt = traj.dt
    base = sp.identity(grid.n, format="csr") + dt * grid.laplacian
    cache = {}
    out = []
    for V in traj.slices:
        key = V.values.tobytes()
        if key not in cache:
            mat = (base - dt * sp.diags(V.values)).tocsr()
            try:
                cache[key] = shifted_solver(mat, method)
            except (RuntimeError, NoConvergence) as exc:
                raise LinearSolveFailure(f"cannot factor implicit Euler step: {exc}") from exc
        out.append(cache[key])
    return out


def _solve(solver, rhs):
    try:
        x = solver(rhs)
    except NoConvergence as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("implicit Euler step produced non-finite values")
    return x


def _check_positive(x, what):
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if x.size and x.min() < -1e-12 * max(scale, 1e-300):
        raise LinearSolveFailure(f"{what} lost positivity (min {x.min():.3e})")
    return np.maximum(x, 0.0)


def forward_solve(grid, traj, y0, operators=None, method="direct"):
    """States ``y_0 .. y_nt`` of the implicit Euler scheme."""
    if traj.grid != grid:
        raise GridMismatch("trajectory lives on a different grid")
    y = _check_y0(grid, y0)
    ops = step_operators(grid, traj, method) if operators is None else operators
    states = [ScalarField(grid, y)]
    for solver in ops:
        y = _check_positive(_solve(solver, y), "state")
        states.append(ScalarField(grid, y))
    return states


def adjoint_solve(grid, traj, terminal=None, operators=None, method="direct"):
    """Adjoint states ``p_0 .. p_nt`` with ``p_nt = terminal`` (default 1) and ``A_k p_k = p_{k+1}``."""
    if traj.grid != grid:
        raise GridMismatch("trajectory lives on a different grid")
    p = np.ones(grid.n) if terminal is None else np.array(_values(terminal, grid), dtype=float)
    ops = step_operators(grid, traj, method) if operators is None else operators
    out = [ScalarField(grid, p)]
    for solver in reversed(ops):
        p = _solve(solver, p)
        out.append(ScalarField(grid, p))
    return out[::-1]


def control_gradient(states, adjoints, dt):
    """``g_k = dt * y_{k+1} * p_k`` for each slice ``k``.

    ``dJ = h^2 sum_k sum_i g_k[i] dV_k[i]``.  ``y_{k+1}`` is the state produced
    by slice ``k`` (implicit Euler evaluates the potential at the new time
    level) and ``p_k`` the adjoint entering it.
    """
    if len(states) != len(adjoints):
        raise LengthMismatch(f"{len(states)} states vs {len(adjoints)} adjoint states")
    if len(states) < 2:
        raise LengthMismatch("need at least one time slice")
    grid = states[0].grid
    return [ScalarField(grid, dt * states[k + 1].values * adjoints[k].values) for k in range(len(states) - 1)]


def objective(grid, traj, y0, operators=None, method="direct"):
    """Terminal mass ``h^2 sum y(T)``."""
    states = forward_solve(grid, traj, y0, operators, method)
    return grid.cell_area * float(states[-1].values.sum())


def _terminal_mass(grid, ops, y):
    for solver in ops:
        y = _solve(solver, y)
    return grid.cell_area * float(y.sum())


def _combine(traj, vertices, gamma):
    grid = traj.grid
    out = []
    for V, S in zip(traj.slices, vertices):
        if gamma == 1.0:
            out.append(S)
            continue
        vals = np.clip(V.values + gamma * (S.values - V.values), 0.0, 1.0)
        out.append(Potential(ScalarField(grid, vals), V.target_mass))
    return ControlTrajectory(grid, traj.T, traj.nt, tuple(out))


def _frank_wolfe(grid, V0, traj, y0v, max_iter, gap_rtol, method):
    dt = traj.dt
    ops = step_operators(grid, traj, method)
    states = forward_solve(grid, traj, y0v, ops)
    J = grid.cell_area * float(states[-1].values.sum())
    history = [J]
    gap = math.nan
    stalled = False
    accepted_steps = 0
    for _ in range(max_iter):
        adjoints = adjoint_solve(grid, traj, operators=ops)
        grads = control_gradient(states, adjoints, dt)
        vertices = [bathtub_projection(g, V0) for g in grads]
        gap = grid.cell_area * sum(
            float(g.values @ (S.values - V.values)) for g, S, V in zip(grads, vertices, traj.slices)
        )
        if gap <= gap_rtol * J:
            break
        gamma = 1.0
        for _ in range(MAX_BACKTRACK):
            cand = _combine(traj, vertices, gamma)
            cand_ops = step_operators(grid, cand, method)
            J_new = _terminal_mass(grid, cand_ops, y0v)
            if J_new >= J + ARMIJO * gamma * gap:
                break
            gamma *= 0.5
        else:
            stalled = True
            break
        traj, ops, J = cand, cand_ops, J_new
        states = forward_solve(grid, traj, y0v, ops)
        history.append(J)
        accepted_steps += 1
        log.debug("FW step %d: J=%.12g gap=%.3e gamma=%g", accepted_steps, J, gap, gamma)
    return traj, states, J, history, accepted_steps, gap, stalled


def optimize_control(
    grid,
    V0,
    T,
    nt,
    y0,
    max_iter=50,
    init=None,
    registry=None,
    gap_rtol=1e-9,
    method="direct",
):
    """Frank-Wolfe ascent of the terminal mass over potentials of mass ``V0`` per slice.

    The linear oracle on slice ``k`` is ``bathtub_projection(g_k, V0)``; steps
    start at 1 and halve until the Armijo condition with constant ``1e-4``
    holds.  Stops when the Frank-Wolfe gap drops below ``gap_rtol * J``.

    Parameters
    ----------
    init : None, "uniform", "static", "best", Potential or ControlTrajectory
        Starting point.  "uniform" uses ``V0 / |Omega|`` on every slice;
        "static" uses the first registry entry on every slice; "best" runs
        from both and keeps the larger objective, so the result is never worse
        than the static trajectory.  A Potential is used on every slice.  None
        means "best" when a registry is given and "uniform" otherwise.
    registry : OptimalSetRegistry, optional
        Needed for "static"/"best"; when given, the report also carries
        distances to it, the turnpike integral, ``A0`` and the Grönwall margins.

    Returns
    -------
    (ControlTrajectory, TurnpikeReport)
        The best trajectory found.  ``report.no_improvement`` is set when a
        line search exhausted its backtracking budget before convergence.
    """
    y0v = _check_y0(grid, y0)
    if init is None:
        init = "uniform" if registry is None else "best"
    if isinstance(init, str) and init in ("static", "best") and registry is None:
        raise ValueError(f"init={init!r} needs a registry")
    if isinstance(init, str) and init == "uniform":
        starts = [ControlTrajectory.uniform(grid, V0, T, nt)]
    elif isinstance(init, str) and init == "static":
        starts = [ControlTrajectory.static(grid, registry[0].potential, T, nt)]
    elif isinstance(init, str) and init == "best":
        starts = [
            ControlTrajectory.uniform(grid, V0, T, nt),
            ControlTrajectory.static(grid, registry[0].potential, T, nt),
        ]
    elif isinstance(init, Potential):
        starts = [ControlTrajectory.static(grid, init, T, nt)]
    elif isinstance(init, ControlTrajectory):
        if init.nt != nt or init.T != T:
            raise LengthMismatch("initial trajectory does not match (T, nt)")
        starts = [init]
    else:
        raise ValueError(f"unknown initialization {init!r}")

    best = None
    for start in starts:
        run = _frank_wolfe(grid, V0, start, y0v, max_iter, gap_rtol, method)
        if best is None or run[2] > best[2]:
            best = run
    traj, states, J, history, steps, gap, stalled = best

    report = TurnpikeReport(
        T=float(T),
        nt=int(nt),
        objective=J,
        turnpike_integral=math.nan,
        per_slice_dist=np.full(nt, np.nan),
        A0=math.nan,
        iterations=steps,
        fw_gap=float(gap),
        objective_history=history,
        no_improvement=stalled,
    )
    if registry is not None:
        fill_report(grid, report, traj, registry, y0v, states=states)
    return traj, report


def per_slice_distance(traj, registry):
    cache = {}
    out = np.empty(traj.nt)
    for k, V in enumerate(traj.slices):
        key = V.values.tobytes()
        if key not in cache:
            cache[key] = dist_to_registry(V, registry)
        out[k] = cache[key]
    return out


def turnpike_integral(traj, registry):
    """Left-endpoint sum ``sum_k dt * dist(V_k, registry)^2``."""
    d = per_slice_distance(traj, registry)
    return float(traj.dt * np.sum(d**2))


def slice_eigenvalues(grid, traj, tol=DEFAULT_TOL):
    """``lambda(V_k)`` per slice; repeated slices are solved once, others warm-started."""
    cache = {}
    lams = np.empty(traj.nt)
    x0 = None
    for k, V in enumerate(traj.slices):
        key = V.values.tobytes()
        if key not in cache:
            eig = principal_eigenpair(grid, V, tol=tol, x0=x0)
            cache[key] = eig.lam
            x0 = eig.u
        lams[k] = cache[key]
    return lams


def gronwall_check(grid, traj, y0, scheme_consistent=True, states=None, lams=None, tol=DEFAULT_TOL):
    """Margin in the energy bound ``|y(T)|^2 <= B0 exp(-2 int lambda_1(s) ds)``.

    Returns ``log B0 - 2 R - log(h^2 sum y(T)^2)`` with ``B0 = h^2 sum y0^2``.
    With ``scheme_consistent`` (default) the decay exponent is
    ``R = sum_k log(1 + dt lambda_k)``, the exact contraction of an implicit
    Euler step, so the margin is nonnegative up to eigen-solver error.  With
    ``scheme_consistent=False`` it is the continuous-time ``sum_k dt lambda_k``,
    which overstates the decay of the discrete scheme, so the margin drifts
    down by about ``T dt lambda^2`` over the horizon.
    """
    y0v = _check_y0(grid, y0)
    if states is None:
        states = forward_solve(grid, traj, y0v)
    if lams is None:
        lams = slice_eigenvalues(grid, traj, tol)
    dt = traj.dt
    h2 = grid.cell_area
    B0 = h2 * float(y0v @ y0v)
    yT = states[-1].values
    if scheme_consistent:
        rate = float(np.sum(np.log1p(dt * lams)))
    else:
        rate = float(dt * np.sum(lams))
    return math.log(B0) - 2.0 * rate - math.log(h2 * float(yT @ yT))


def initial_overlap(grid, y0, registry, index=0):
    """``A0 = h^2 sum y0 u_{V*}`` with the normalized ground state of a registry entry."""
    y0v = _check_y0(grid, y0)
    return grid.cell_area * float(y0v @ registry[index].eigen.u.values)


def fill_report(grid, report, traj, registry, y0, states=None):
    d = per_slice_distance(traj, registry)
    report.per_slice_dist = d
    report.turnpike_integral = float(traj.dt * np.sum(d**2))
    report.A0 = initial_overlap(grid, y0, registry)
    lams = slice_eigenvalues(grid, traj)
    report.gronwall_margin = gronwall_check(grid, traj, y0, True, states, lams)
    report.gronwall_margin_raw = gronwall_check(grid, traj, y0, False, states, lams)
    static = ControlTrajectory.static(grid, registry[0].potential, traj.T, traj.nt)
    report.static_objective = objective(grid, static, y0)
    return report


def decay_fit(grid, V, y0, T_values, nt_per_unit):
    """Fit ``log J`` of the static trajectory ``V`` against ``T``.

    Returns ``slope``, ``intercept`` and ``lambda_est``, the eigenvalue implied
    by the slope once the implicit Euler factor ``(1 + dt lambda)^(-T/dt)`` is
    undone: ``lambda_est = (exp(-slope dt) - 1) / dt``.
    """
    T_values = [float(t) for t in T_values]
    logs = []
    dts = []
    for T in T_values:
        nt = max(int(math.ceil(T * nt_per_unit - 1e-9)), 1)
        traj = ControlTrajectory.static(grid, V, T, nt)
        logs.append(math.log(objective(grid, traj, y0)))
        dts.append(traj.dt)
    if len(T_values) < 2:
        return dict(slope=math.nan, intercept=logs[0], lambda_est=math.nan, dt=dts[0])
    slope, intercept = np.polyfit(T_values, logs, 1)
    dt = float(np.mean(dts))
    lam = (math.exp(-slope * dt) - 1.0) / dt
    return dict(slope=float(slope), intercept=float(intercept), lambda_est=float(lam), dt=dt)


def _sweep_one(args):
    grid, registry, V0, y0, T, nt, max_iter, init, method = args
    try:
        traj, report = optimize_control(
            grid, V0, T, nt, y0, max_iter=max_iter, init=init, registry=registry, method=method
        )
    except LabError as exc:
        report = TurnpikeReport(
            T=float(T), nt=int(nt), objective=math.nan, turnpike_integral=math.nan,
            per_slice_dist=np.full(nt, np.nan), A0=math.nan, error=f"{type(exc).__name__}: {exc}",
        )
        traj = None
    return traj, report


def horizon_sweep(
    grid,
    registry,
    V0,
    y0,
    T_list,
    nt_per_unit=64,
    max_iter=50,
    seed=0,
    workers=1,
    init="best",
    method="direct",
    return_trajectories=False,
):
    """Optimize the control for each horizon in ``T_list`` (ascending).

    ``nt = ceil(T * nt_per_unit)``.  Each report also carries the decay fit of
    the static trajectory ``V*`` over the same horizons.  A horizon whose solve
    fails yields a report with ``error`` set; the others are unaffected.
    ``seed`` is recorded only, the sweep itself is deterministic.
    """
    T_list = [float(t) for t in T_list]
    if not T_list:
        raise ValueError("T_list is empty")
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be strictly ascending")
    if registry[0].grid != grid:
        raise GridMismatch("registry was computed on a different grid")
    y0v = _check_y0(grid, y0)
    jobs = [
        (grid, registry, V0, y0v, T, max(int(math.ceil(T * nt_per_unit - 1e-9)), 1), max_iter, init, method)
        for T in T_list
    ]
    results = pmap(_sweep_one, jobs, workers)
    fit = decay_fit(grid, registry[0].potential, y0v, T_list, nt_per_unit)
    reports = []
    for _, rep in results:
        rep.decay_fit = dict(fit)
        reports.append(rep)
    if return_trajectories:
        return reports, [traj for traj, _ in results]
    return reports


def saturation_check(reports, ratio_tol=1.25, slope_frac=0.05):
    """Boundedness of the turnpike integrals over ascending horizons.

    ``ratio`` compares the last two horizons; ``slope`` is the least-squares
    slope of the integral against ``T`` over the upper half of the horizons and
    must not exceed ``slope_frac * I(T_min) / T_min``.
    """
    ok = [r for r in reports if r.error is None]
    T = np.array([r.T for r in ok])
    I = np.array([r.turnpike_integral for r in ok])
    out = dict(T=T.tolist(), integrals=I.tolist(), ratio=math.nan, slope=math.nan, slope_limit=math.nan)
    if len(ok) < 2:
        out.update(ratio_ok=True, slope_ok=True, passed=True)
        return out
    ratio = I[-1] / I[-2] if I[-2] > 0 else (1.0 if I[-1] == 0 else math.inf)
    half = T.size // 2
    upper = slice(half, None) if T.size - half >= 2 else slice(-2, None)
    slope = float(np.polyfit(T[upper], I[upper], 1)[0])
    limit = slope_frac * I[0] / T[0]
    out.update(
        ratio=float(ratio),
        slope=slope,
        slope_limit=float(limit),
        ratio_ok=bool(ratio <= ratio_tol),
        slope_ok=bool(slope <= limit),
    )
    out["passed"] = out["ratio_ok"] and out["slope_ok"]
    return out


def initial_state(grid, spec):
    """Initial state from ``{"kind": "uniform"}``, ``{"kind": "gaussian", "center", "width"}``
    or ``{"kind": "indicator", "region": [xmin, xmax, ymin, ymax]}``."""
    kind = spec.get("kind", "uniform") if spec else "uniform"
    x, y = grid.x, grid.y
    if kind == "uniform":
        vals = np.ones(grid.n)
    elif kind == "gaussian":
        cx, cy = spec["center"]
        w = float(spec["width"])
        vals = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
    elif kind == "indicator":
        x0, x1, y0, y1 = spec["region"]
        vals = ((x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)).astype(float)
    else:
        raise ValueError(f"unknown initial state kind {kind!r}")
    if not np.any(vals > 0):
        raise ValueError(f"initial state {spec!r} vanishes on the grid")
    return ScalarField(grid, vals)
