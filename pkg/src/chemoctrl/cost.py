"""Tracking objective, desired states, space-time norms and the control ball.

The objective charges the density misfit in the ``L^{5s/3}`` space-time norm
with weight ``3*gamma_u/(5s)``, the concentration misfit in ``L^2`` with
weight ``gamma_v/2``, and the control in ``L^q`` with weight ``gamma_f/q``.
Feasible controls live in the ball of radius ``M`` in the ``L^q`` norm;
radial scaling restores feasibility (the exact metric projection has no
closed form for general ``q``, and the optimizer only needs a retraction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .energy import FittedConstants, energy_inequality_audit
from .sim import weak_residual


@dataclass
class DesiredState:
    """Space-time target field, evaluated lazily at trajectory times."""

    fn: callable

    def at(self, t, grid):
        vals = np.asarray(self.fn(t, grid), dtype=float)
        if vals.shape != grid.dims:
            vals = np.broadcast_to(vals, grid.dims).copy()
        return vals

    @classmethod
    def constant(cls, value):
        return cls(fn=lambda t, grid: np.full(grid.dims, float(value)))

    @classmethod
    def from_field(cls, field):
        return cls(fn=lambda t, grid: field.values)

    @classmethod
    def from_callable(cls, fn):
        return cls(fn=fn)


@dataclass
class CostParams:
    """Weights, desired states and the control-ball radius."""

    gamma_u: float
    gamma_v: float
    gamma_f: float
    q: float
    u_d: DesiredState
    v_d: DesiredState
    M: float

    def __post_init__(self):
        if min(self.gamma_u, self.gamma_v, self.gamma_f) <= 0:
            raise ValueError("all cost weights must be positive")
        if self.q <= 2.5:
            raise ValueError(f"control exponent q must exceed 5/2, got {self.q}")
        if self.M <= 0:
            raise ValueError(f"ball radius M must be positive, got {self.M}")


@dataclass
class CostBreakdown:
    state_u: float
    state_v: float
    control: float

    @property
    def total(self):
        return self.state_u + self.state_v + self.control

    def to_dict(self):
        return {"state_u": self.state_u, "state_v": self.state_v,
                "control": self.control, "total": self.total}


def spacetime_lp_norm(times, series, grid, p):
    """Discrete ``L^p`` norm on the space-time cylinder, trapezoid in time.

    Parameters
    ----------
    times : ndarray of shape (n,)
    series : ndarray of shape (n, *grid.dims)
    p : float, at least 1 (``inf`` gives the max norm).
    """
    if p < 1:
        raise ValueError(f"L^p norm requires p >= 1, got {p}")
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float)
    if series.shape[0] != times.size:
        raise ValueError("series and times length mismatch")
    if np.isinf(p):
        return float(np.abs(series).max())
    per_level = (np.abs(series) ** p).reshape(times.size, -1).sum(axis=1) \
        * grid.cell_volume
    dt = np.diff(times)
    return float((dt * 0.5 * (per_level[:-1] + per_level[1:])).sum()) ** (1.0 / p)


def evaluate_J(traj, control, cost_params, s):
    """Objective value of a run, with the three addends reported separately.

    Returns
    -------
    CostBreakdown
        Fields ``state_u``, ``state_v``, ``control``; ``total`` is their sum.
    """
    grid = traj.grid
    pu = 5.0 * s / 3.0
    u_diff = np.stack([
        traj.u[i] - cost_params.u_d.at(float(t), grid)
        for i, t in enumerate(traj.times)
    ])
    v_diff = np.stack([
        traj.v[i] - cost_params.v_d.at(float(t), grid)
        for i, t in enumerate(traj.times)
    ])
    term_u = 3.0 * cost_params.gamma_u / (5.0 * s) \
        * spacetime_lp_norm(traj.times, u_diff, grid, pu) ** pu
    term_v = cost_params.gamma_v / 2.0 \
        * spacetime_lp_norm(traj.times, v_diff, grid, 2.0) ** 2
    if control is None:
        term_f = 0.0
    else:
        term_f = cost_params.gamma_f / cost_params.q \
            * control.lq_norm(cost_params.q) ** cost_params.q
    return CostBreakdown(state_u=term_u, state_v=term_v, control=term_f)


def project_ball(control, M, q):
    """Radial retraction onto the control ball of radius ``M`` in ``L^q``.

    Controls already inside the ball are returned unchanged; anything else is
    scaled down radially so the output norm equals ``M``.
    """
    if M <= 0:
        raise ValueError(f"ball radius must be positive, got {M}")
    norm = control.lq_norm(q)
    if norm <= M:
        return control
    return control.scaled(M / norm)


@dataclass
class AdmissibilityReport:
    """Outcome of the discrete membership checks for one run."""

    control_norm: float
    M: float
    in_ball: bool
    weak_res: float
    weak_tol: float
    weak_pass: bool
    energy_residual: float
    energy_tol: float
    energy_pass: bool
    K_used: float
    beta_used: float

    @property
    def passed(self):
        return self.in_ball and self.weak_pass and self.energy_pass

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "control_norm", "M", "in_ball", "weak_res", "weak_tol", "weak_pass",
            "energy_residual", "energy_tol", "energy_pass", "K_used", "beta_used")}
        d["passed"] = self.passed
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)


def _default_weak_tol(traj):
    mean_dt = float(np.diff(traj.times).mean()) if traj.n_levels > 1 else 0.0
    h_sq = max(h * h for h in traj.grid.spacing)
    scale = max(1.0, float(np.abs(traj.u).max()), float(np.abs(traj.v).max()))
    return 10.0 * (mean_dt + h_sq) * scale


def _weak_probes(traj):
    """Constant-in-time test functions: 1 and the first cosine mode per axis."""
    grid = traj.grid
    probes = [np.ones((traj.n_levels,) + grid.dims)]
    centers = grid.cell_centers()
    for k in range(grid.ndim):
        mode = np.cos(np.pi * centers[k] / grid.lengths[k])
        probes.append(np.broadcast_to(mode, (traj.n_levels,) + grid.dims).copy())
    return probes


def check_admissible(traj, control, cost_params, params, beta, K, tol=None):
    """Report the discrete admissibility of a (trajectory, control) pair.

    Checks the control-ball membership, the weak residual of the density
    equation against standard probes, and the energy-inequality audit with
    the constant ``K`` (a number, or fitted constants evaluated at ``M``).
    Report-only: nothing raises on failure.
    """
    norm = control.lq_norm(cost_params.q) if control is not None else 0.0
    in_ball = norm <= cost_params.M * (1.0 + 1e-12) + 1e-12

    weak_tol = tol if tol is not None else _default_weak_tol(traj)
    weak = max(abs(weak_residual(traj, probe)) for probe in _weak_probes(traj))

    if isinstance(K, FittedConstants):
        K_val = K.K_of(cost_params.M)
    else:
        K_val = float(K)
    energy_tol = tol if tol is not None else _default_weak_tol(traj)
    res = energy_inequality_audit(traj, params, beta, K_val)

    return AdmissibilityReport(
        control_norm=norm, M=cost_params.M, in_ball=bool(in_ball),
        weak_res=weak, weak_tol=weak_tol, weak_pass=bool(weak <= weak_tol),
        energy_residual=res, energy_tol=energy_tol,
        energy_pass=bool(res <= energy_tol),
        K_used=K_val, beta_used=float(beta),
    )
