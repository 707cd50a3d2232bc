"""Time integration of the controlled truncated system and its comparison problem.

One step treats the chemical concentration implicitly (diffusion, consumption
damping and the bilinear control all land on the matrix diagonal) and then
transports the cell density with an explicit upwind flux driven by the fresh
concentration, under implicit diffusion.  Both implicit matrices are
M-matrices whenever ``dt * max(f_+) < 1``, and they are factored without
pivoting: every arithmetic operation in the forward and backward solves then
adds nonnegative quantities, so nonnegative right-hand sides produce exactly
nonnegative solutions in floating point.  The density update is in
conservative flux form and the diffusion matrix has columns summing to one,
so the discrete cell mass is conserved to round-off at every step.
"""

from __future__ import annotations

import csv
import datetime
import json
import os
import threading
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import (
    Field,
    Grid,
    GridMismatchError,
    chemotaxis_array,
    face_gradients,
    h1_seminorm,
    integrate,
)
from .model import ModelParams, truncate


class StepSizeError(RuntimeError):
    """A step was rejected; retry with ``dt`` at most ``admissible_dt``."""

    def __init__(self, message, admissible_dt):
        super().__init__(message)
        self.admissible_dt = admissible_dt


class StiffnessError(RuntimeError):
    """Adaptive stepping drove ``dt`` below the underflow floor."""


class PositivityError(RuntimeError):
    """A computed state came out negative (never clipped, always raised)."""


class TrajectoryFormatError(ValueError):
    """An on-disk trajectory is malformed or inconsistent."""


# fraction of the positivity-limited step actually allowed; absorbs round-off
CFL_SAFETY = 0.9

_DT_FLOOR_FACTOR = 1e-12


@dataclass
class State:
    """Density and concentration at one time level."""

    u: Field
    v: Field
    t: float

    def __post_init__(self):
        if not self.u.grid.compatible_with(self.v.grid):
            raise GridMismatchError("u and v live on different grids")
        if self.u.values.min() < 0:
            bad = tuple(int(i) for i in
                        np.unravel_index(np.argmin(self.u.values), self.u.values.shape))
            raise ValueError(f"negative density {self.u.values[bad]} at cell {bad}")
        if self.v.values.min() < 0:
            bad = tuple(int(i) for i in
                        np.unravel_index(np.argmin(self.v.values), self.v.values.shape))
            raise ValueError(f"negative concentration {self.v.values[bad]} at cell {bad}")

    @property
    def grid(self):
        return self.u.grid


@dataclass
class Control:
    """Space-time control on the grid, zero outside the control region.

    Values live on the control's own time lattice (at least two levels,
    starting at 0) and are interpolated linearly in time when the stepper
    samples them.  The discrete space-time L^q norm uses trapezoidal weights
    on that lattice, matching the cost functional's convention.
    """

    grid: Grid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("control needs at least two time levels")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("control times must increase strictly from 0")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (times.size,) + self.grid.dims:
            raise ValueError(
                f"control values shape {vals.shape} does not match "
                f"(n_times, *dims) = {(times.size,) + self.grid.dims}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("control values must be finite")
        self.times = times
        self.values = vals * self.grid.control_mask  # enforce the 1_{Omega_c} factor

    @classmethod
    def zero(cls, grid, t_final):
        return cls(grid, np.array([0.0, max(t_final, 1e-300)]),
                   np.zeros((2,) + grid.dims))

    @classmethod
    def constant(cls, grid, amplitude, t_final):
        vals = np.broadcast_to(float(amplitude), (2,) + grid.dims).copy()
        return cls(grid, np.array([0.0, t_final]), vals)

    @property
    def t_final(self):
        return float(self.times[-1])

    def slice_at(self, t):
        """Control values at time ``t`` (linear in time, clamped at the ends)."""
        ts = self.times
        if t <= ts[0]:
            return self.values[0].copy()
        if t >= ts[-1]:
            return self.values[-1].copy()
        j = int(np.searchsorted(ts, t, side="right"))
        w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return (1.0 - w) * self.values[j - 1] + w * self.values[j]

    def as_field(self, t):
        return Field(self.grid, self.slice_at(t))

    def _trapezoid_weights(self):
        w = np.zeros(self.times.size)
        dt = np.diff(self.times)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
        return w

    def lq_norm(self, q):
        """Discrete L^q norm over (0, t_final) x domain."""
        if q < 1:
            raise ValueError(f"L^q norm requires q >= 1, got {q}")
        if np.isinf(q):
            return float(np.abs(self.values).max())
        w = self._trapezoid_weights()
        per_level = (np.abs(self.values) ** q).reshape(self.times.size, -1).sum(axis=1)
        return float((w * per_level).sum() * self.grid.cell_volume) ** (1.0 / q)

    def scaled(self, factor):
        return Control(self.grid, self.times.copy(), self.values * factor)


@dataclass
class Trajectory:
    """Saved states of one run plus the control and stepping metadata."""

    grid: Grid
    params: ModelParams
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    control: Control | None = None
    dt_history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    events: list = field(default_factory=list)
    mass_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_levels(self):
        return int(self.times.size)

    def state(self, i):
        return State(Field(self.grid, self.u[i]), Field(self.grid, self.v[i]),
                     float(self.times[i]))

    def index_of_time(self, t):
        tol = 1e-12 * max(1.0, abs(float(self.times[-1])))
        hits = np.nonzero(np.abs(self.times - t) <= tol)[0]
        if hits.size == 0:
            raise ValueError(f"t={t} is not a saved time level")
        return int(hits[0])

    def control_slice(self, t):
        if self.control is None:
            return np.zeros(self.grid.dims)
        return self.control.slice_at(t)


@dataclass
class ComparisonTrajectory:
    """Solution levels of the dominating linear problem."""

    grid: Grid
    times: np.ndarray
    w: np.ndarray


# ---------------------------------------------------------------------------
# cached sparse operators
# ---------------------------------------------------------------------------

_cache_lock = threading.RLock()
_grid_cache = weakref.WeakKeyDictionary()


def _neumann_laplacian_1d(n, h):
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1]) / (h * h)


def laplacian_matrix(grid):
    """Sparse matrix of the mirror-ghost Laplacian on the C-order flat index."""
    with _cache_lock:
        entry = _grid_cache.setdefault(grid, {})
        if "laplacian" not in entry:
            mats = [_neumann_laplacian_1d(n, h) for n, h in zip(grid.dims, grid.spacing)]
            total = None
            for k, mk in enumerate(mats):
                left = int(np.prod(grid.dims[:k])) if k > 0 else 1
                right = int(np.prod(grid.dims[k + 1:])) if k < grid.ndim - 1 else 1
                term = sp.kron(sp.identity(left), sp.kron(mk, sp.identity(right)))
                total = term if total is None else total + term
            entry["laplacian"] = total.tocsc()
        return entry["laplacian"]


def _factorize(A):
    """No-pivot LU tuned for symmetric M-matrices (keeps sign structure)."""
    return splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True))


def _diffusion_base(grid, dt):
    with _cache_lock:
        entry = _grid_cache.setdefault(grid, {})
        bases = entry.setdefault("base", {})
        if dt not in bases:
            L = laplacian_matrix(grid)
            bases[dt] = (sp.identity(grid.n_cells, format="csc") - dt * L).tocsc()
        return bases[dt]


def _diffusion_solver(grid, dt):
    with _cache_lock:
        entry = _grid_cache.setdefault(grid, {})
        solvers = entry.setdefault("solver", {})
        if dt not in solvers:
            L = laplacian_matrix(grid)
            A = (sp.identity(grid.n_cells, format="csc") - dt * L).tocsc()
            solvers[dt] = _factorize(A)
        return solvers[dt]


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def step(state, control_slice, params, dt):
    """Advance one implicit-explicit step of size ``dt``.

    The concentration is solved first from the fully implicit system

        (I - dt*Lap + dt*diag(trunc(u)^s + f_- - f_+)) v_new = v

    which is an M-matrix provided ``dt * max(f_+) < 1`` (checked).  The
    density then takes the upwind chemotaxis flux built from ``v_new``
    explicitly and diffuses implicitly, which conserves mass to round-off and
    preserves nonnegativity under the reported CFL bound on ``dt``.

    Raises
    ------
    StepSizeError
        If ``dt`` violates the control M-matrix condition or the chemotaxis
        CFL bound; the error carries the largest admissible ``dt``.
    PositivityError
        If a computed state is negative despite the checks (this indicates a
        bug; values are never clipped).
    """
    grid = state.grid
    if not grid.compatible_with(control_slice.grid):
        raise GridMismatchError("control slice lives on a different grid")
    if not (dt > 0 and np.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")

    f = control_slice.values * grid.control_mask
    fpos = np.clip(f, 0.0, None)
    fneg = np.clip(-f, 0.0, None)
    fpos_max = float(fpos.max())
    if dt * fpos_max >= 1.0:
        bad = tuple(int(i) for i in np.unravel_index(np.argmax(fpos), fpos.shape))
        raise StepSizeError(
            f"dt*max(f+)={dt * fpos_max:.3g} >= 1 at cell {bad} breaks the "
            "M-matrix bound",
            admissible_dt=CFL_SAFETY / fpos_max,
        )

    mobility = truncate(state.u.values, params.m)
    consumption = mobility**params.s
    react = (consumption + fneg - fpos).ravel()
    A_v = _diffusion_base(grid, dt) + dt * sp.diags(react, format="csc")
    v_new = _factorize(A_v).solve(state.v.values.ravel()).reshape(grid.dims)

    transport, rate = chemotaxis_array(grid, mobility, v_new)
    rate_max = float(rate.max())
    if dt * rate_max > CFL_SAFETY:
        bad = tuple(int(i) for i in np.unravel_index(np.argmax(rate), rate.shape))
        raise StepSizeError(
            f"chemotaxis CFL violated at cell {bad}: dt*outflow="
            f"{dt * rate_max:.3g} > {CFL_SAFETY}",
            admissible_dt=CFL_SAFETY / rate_max,
        )
    rhs = (state.u.values + dt * transport).ravel()
    u_new = _diffusion_solver(grid, dt).solve(rhs).reshape(grid.dims)

    if v_new.min() < 0:
        bad = tuple(int(i) for i in np.unravel_index(np.argmin(v_new), v_new.shape))
        raise PositivityError(f"v went negative at cell {bad}: {v_new[bad]}")
    if u_new.min() < 0:
        bad = tuple(int(i) for i in np.unravel_index(np.argmin(u_new), u_new.shape))
        raise PositivityError(f"u went negative at cell {bad}: {u_new[bad]}")

    return State(Field(grid, u_new), Field(grid, v_new), state.t + dt)


def _adaptive_loop(advance, t_final, dt_max, on_accept):
    """Shared halving / re-doubling driver.

    ``advance(t, dt)`` performs one step and may raise StepSizeError;
    ``on_accept(t_new, dt)`` records it.  Halves on rejection, re-doubles
    after 10 clean steps, fails below the underflow floor.
    """
    t = 0.0
    dt = dt_max
    clean = 0
    floor = _DT_FLOOR_FACTOR * max(t_final, 1e-300)
    events = []
    while t < t_final - 1e-14 * max(t_final, 1.0):
        dt_step = min(dt, t_final - t)
        try:
            advance(t, dt_step)
        except StepSizeError as err:
            events.append({
                "t": t, "dt": dt_step, "reason": str(err),
                "admissible_dt": err.admissible_dt,
            })
            dt = 0.5 * dt_step
            clean = 0
            if dt < floor:
                raise StiffnessError(
                    f"dt underflow at t={t:.6g}: {err}") from err
            continue
        t += dt_step
        on_accept(t, dt_step)
        clean += 1
        if clean >= 10 and dt < dt_max:
            dt = min(2.0 * dt, dt_max)
            clean = 0
    return events


def simulate(u0, v0, control, params, dt_max, save_every=1):
    """Integrate the controlled system from ``(u0, v0)`` up to the horizon.

    Parameters
    ----------
    u0, v0 : Field
        Nonnegative initial states on the same grid.
    control : Control or None
        ``None`` means the uncontrolled system.
    params : ModelParams
    dt_max : float
        Upper bound for the adaptive step.
    save_every : int
        Keep every k-th accepted state (the initial and final states are
        always kept).

    Returns
    -------
    Trajectory
    """
    if not (dt_max > 0 and np.isfinite(dt_max)):
        raise ValueError(f"dt_max must be positive, got {dt_max}")
    if save_every < 1:
        raise ValueError("save_every must be at least 1")
    grid = u0.grid
    state = State(u0.copy(), v0.copy(), 0.0)  # validates shapes and signs
    if control is not None:
        if not grid.compatible_with(control.grid):
            raise GridMismatchError("control lives on a different grid")
        if control.t_final < params.t_final - 1e-12 * max(1.0, params.t_final):
            raise ValueError("control time lattice does not cover the horizon")

    times = [0.0]
    us = [state.u.values.copy()]
    vs = [state.v.values.copy()]
    dts = []
    masses = [integrate(state.u)]
    holder = {"state": state, "since_save": 0}

    def advance(t, dt_step):
        t_next = t + dt_step
        fslice = Field(grid, control.slice_at(t_next)) if control is not None \
            else Field.zeros(grid)
        holder["new"] = step(holder["state"], fslice, params, dt_step)

    def on_accept(t_new, dt_step):
        holder["state"] = holder["new"]
        dts.append(dt_step)
        masses.append(integrate(holder["state"].u))
        holder["since_save"] += 1
        at_end = t_new >= params.t_final - 1e-14 * max(params.t_final, 1.0)
        if holder["since_save"] >= save_every or at_end:
            times.append(holder["state"].t)
            us.append(holder["state"].u.values.copy())
            vs.append(holder["state"].v.values.copy())
            holder["since_save"] = 0

    events = _adaptive_loop(advance, params.t_final, dt_max, on_accept)
    return Trajectory(
        grid=grid, params=params,
        times=np.asarray(times), u=np.stack(us), v=np.stack(vs),
        control=control, dt_history=np.asarray(dts), events=events,
        mass_trace=np.asarray(masses),
    )


def _comparison_step(grid, w, f_tilde, dt):
    f_max = float(f_tilde.max()) if f_tilde.size else 0.0
    if dt * f_max >= 1.0:
        raise StepSizeError(
            f"dt*max(f~)={dt * f_max:.3g} >= 1 breaks the M-matrix bound",
            admissible_dt=CFL_SAFETY / f_max,
        )
    A = _diffusion_base(grid, dt) - dt * sp.diags(f_tilde.ravel(), format="csc")
    return _factorize(A).solve(w.ravel()).reshape(grid.dims)


def solve_comparison(w0, control, params, dt_max, times=None):
    """Solve the dominating linear problem driven by the positive control part.

    The reaction uses ``f~ = max(f, 0)`` sampled like the concentration step,
    and the same fully implicit scheme.  When ``times`` is given (typically a
    paired run's saved levels) the solver steps exactly through them, which
    makes the cellwise domination of the concentration exact up to round-off.

    Returns
    -------
    ComparisonTrajectory
    """
    grid = w0.grid
    if w0.values.min() < 0:
        raise ValueError("comparison initial state must be nonnegative")
    if control is not None and not grid.compatible_with(control.grid):
        raise GridMismatchError("control lives on a different grid")

    def f_tilde_at(t):
        if control is None:
            return np.zeros(grid.dims)
        return np.clip(control.slice_at(t) * grid.control_mask, 0.0, None)

    if times is not None:
        times = np.asarray(times, dtype=float)
        if times.size < 1 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("paired times must increase strictly from 0")
        w = w0.values.copy()
        ws = [w.copy()]
        for t0, t1 in zip(times[:-1], times[1:]):
            w = _comparison_step(grid, w, f_tilde_at(t1), t1 - t0)
            ws.append(w.copy())
        return ComparisonTrajectory(grid=grid, times=times.copy(), w=np.stack(ws))

    holder = {"w": w0.values.copy()}
    out_times = [0.0]
    ws = [holder["w"].copy()]

    def advance(t, dt_step):
        holder["new"] = _comparison_step(grid, holder["w"], f_tilde_at(t + dt_step),
                                         dt_step)

    def on_accept(t_new, dt_step):
        holder["w"] = holder["new"]
        out_times.append(t_new)
        ws.append(holder["w"].copy())

    _adaptive_loop(advance, params.t_final, dt_max, on_accept)
    return ComparisonTrajectory(grid=grid, times=np.asarray(out_times),
                                w=np.stack(ws))


# ---------------------------------------------------------------------------
# weak-form residual
# ---------------------------------------------------------------------------

def weak_residual(traj, test_series):
    """Space-time residual of the density equation against a test function.

    Quadrature is independent of the stepper: trapezoid in time with level
    midpoints and centered (arithmetic-mean) face mobilities, so trajectories
    from :func:`simulate` leave a first-order-in-dt footprint instead of an
    identically zero one.  The result is normalized by the space-time H^1
    norm of the test function.

    Parameters
    ----------
    traj : Trajectory
    test_series : ndarray of shape (n_levels, *dims) or list of Field
    """
    grid = traj.grid
    if isinstance(test_series, (list, tuple)):
        test_series = np.stack([f.values for f in test_series])
    phi = np.asarray(test_series, dtype=float)
    if phi.shape != (traj.n_levels,) + grid.dims:
        raise ValueError("test series shape does not match the trajectory")

    vol = grid.cell_volume
    residual = 0.0
    norm_sq = 0.0
    for n in range(traj.n_levels - 1):
        dt = float(traj.times[n + 1] - traj.times[n])
        ubar = 0.5 * (traj.u[n] + traj.u[n + 1])
        vbar = 0.5 * (traj.v[n] + traj.v[n + 1])
        pbar = 0.5 * (phi[n] + phi[n + 1])
        du = traj.u[n + 1] - traj.u[n]
        residual += (du * pbar).sum() * vol

        gu = face_gradients(grid, ubar)
        gv = face_gradients(grid, vbar)
        gp = face_gradients(grid, pbar)
        diff_term = 0.0
        chem_term = 0.0
        for k in range(grid.ndim):
            lo = [slice(None)] * grid.ndim
            hi = [slice(None)] * grid.ndim
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            mean_u = 0.5 * (ubar[tuple(lo)] + ubar[tuple(hi)])
            diff_term += (gu[k] * gp[k]).sum() * vol
            chem_term += (mean_u * gv[k] * gp[k]).sum() * vol
        residual += dt * (diff_term - chem_term)

        pf = Field(grid, pbar)
        norm_sq += dt * ((pbar**2).sum() * vol + h1_seminorm(pf) ** 2)

    if norm_sq == 0.0:
        return 0.0
    return float(residual / np.sqrt(norm_sq))


# ---------------------------------------------------------------------------
# on-disk trajectory format: CSV per level plus a JSON manifest
# ---------------------------------------------------------------------------

def _write_state_csv(grid, path, u, v):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{k}" for k in range(grid.ndim)] + ["u", "v"])
        for idx in np.ndindex(*grid.dims):
            writer.writerow(list(idx) + [repr(float(u[idx])), repr(float(v[idx]))])


def trajectory_to_dir(traj, outdir):
    """Write one CSV per saved level plus ``manifest.json``."""
    os.makedirs(outdir, exist_ok=True)
    state_files = []
    for i in range(traj.n_levels):
        name = f"state_{i:05d}.csv"
        _write_state_csv(traj.grid, os.path.join(outdir, name), traj.u[i], traj.v[i])
        state_files.append(name)
    control_file = None
    control_times = None
    if traj.control is not None:
        control_file = "control.csv"
        control_times = [float(t) for t in traj.control.times]
        with open(os.path.join(outdir, control_file), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_index"] + [f"i{k}" for k in range(traj.grid.ndim)]
                            + ["value"])
            for ti in range(traj.control.times.size):
                for idx in np.ndindex(*traj.grid.dims):
                    writer.writerow([ti] + list(idx)
                                    + [repr(float(traj.control.values[ti][idx]))])
    p = traj.params
    manifest = {
        "grid": traj.grid.header_dict(),
        "params": {"s": p.s, "alpha": p.alpha, "m": p.m, "q": p.q,
                   "t_final": p.t_final},
        "times": [float(t) for t in traj.times],
        "dt_history": [float(d) for d in traj.dt_history],
        "events": traj.events,
        "mass_trace": [float(m) for m in traj.mass_trace],
        "state_files": state_files,
        "control_file": control_file,
        "control_times": control_times,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def trajectory_from_dir(path):
    """Load a trajectory written by :func:`trajectory_to_dir`."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        grid = Grid.from_header(manifest["grid"])
        pd = manifest["params"]
        params = ModelParams(s=pd["s"], alpha=pd["alpha"], m=pd["m"], q=pd["q"],
                             t_final=pd["t_final"])
        times = np.asarray(manifest["times"], dtype=float)
        us, vs = [], []
        for name in manifest["state_files"]:
            u = np.empty(grid.dims)
            v = np.empty(grid.dims)
            with open(os.path.join(path, name), newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if header != [f"i{k}" for k in range(grid.ndim)] + ["u", "v"]:
                    raise TrajectoryFormatError(f"{name}: unexpected columns")
                for row in reader:
                    idx = tuple(int(c) for c in row[: grid.ndim])
                    u[idx] = float(row[grid.ndim])
                    v[idx] = float(row[grid.ndim + 1])
            us.append(u)
            vs.append(v)
        if len(us) != times.size:
            raise TrajectoryFormatError("state file count does not match times")
        control = None
        if manifest.get("control_file"):
            ctimes = np.asarray(manifest["control_times"], dtype=float)
            cvals = np.zeros((ctimes.size,) + grid.dims)
            with open(os.path.join(path, manifest["control_file"]), newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for row in reader:
                    ti = int(row[0])
                    idx = tuple(int(c) for c in row[1: 1 + grid.ndim])
                    cvals[(ti,) + idx] = float(row[1 + grid.ndim])
            control = Control(grid, ctimes, cvals)
        return Trajectory(
            grid=grid, params=params, times=times,
            u=np.stack(us), v=np.stack(vs), control=control,
            dt_history=np.asarray(manifest.get("dt_history", []), dtype=float),
            events=manifest.get("events", []),
            mass_trace=np.asarray(manifest.get("mass_trace", []), dtype=float),
        )
    except TrajectoryFormatError:
        raise
    except (OSError, KeyError, ValueError, IndexError) as err:
        raise TrajectoryFormatError(f"malformed trajectory at {path}: {err}") from err
