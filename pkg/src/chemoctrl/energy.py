"""Energy trace, dissipation integrals and the audited energy inequality.

For a state ``(u, v)`` with ``z = sqrt(v + alpha^2)`` the energy is

    E = s/4 * integral g(u) + 1/2 * integral |grad z|^2,

and along a trajectory the audit accumulates four dissipation integrals
(entropy gradient, density-weighted z-gradient, Hessian, quartic) plus the
control forcing.  The inequality under audit bounds

    E(t2) + beta * (entropy + hessian + quartic) + 1/4 * cross

by ``E(t1) + K`` for every saved pair ``t1 < t2``; ``beta`` and ``K`` are
treated as audited parameters since no closed form exists for them, and
:func:`fit_constants` recovers an empirical ``K`` curve against the control
norm.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .grid import (
    Field,
    cell_gradient_sq,
    face_gradients,
    h1_seminorm,
    hessian_frobenius_sq,
    integrate,
)
from .model import g_energy, g_m_energy, z_transform


class AuditInfeasibleError(RuntimeError):
    """No admissible constants make the energy audit pass."""


@dataclass
class EnergyReport:
    """Energy trace plus per-interval dissipation integrals of one run.

    The dissipation arrays hold one entry per consecutive saved interval
    (``len(times) - 1``); all of them are nonnegative by construction.
    """

    times: np.ndarray
    energy: np.ndarray
    dissipation_entropy: np.ndarray
    dissipation_cross: np.ndarray
    dissipation_hessian: np.ndarray
    dissipation_quartic: np.ndarray
    control_forcing: np.ndarray
    beta_used: float
    K_used: float

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("report times must increase strictly")
        for name in ("dissipation_entropy", "dissipation_cross",
                     "dissipation_hessian", "dissipation_quartic",
                     "control_forcing"):
            arr = getattr(self, name)
            if arr.size != self.times.size - 1:
                raise ValueError(f"{name} must have one entry per interval")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
        if self.beta_used <= 0:
            raise ValueError("beta must be positive")
        if self.K_used < 0:
            raise ValueError("K must be nonnegative")

    def to_dict(self):
        return {
            "times": [float(t) for t in self.times],
            "energy": [float(e) for e in self.energy],
            "dissipation_entropy": [float(x) for x in self.dissipation_entropy],
            "dissipation_cross": [float(x) for x in self.dissipation_cross],
            "dissipation_hessian": [float(x) for x in self.dissipation_hessian],
            "dissipation_quartic": [float(x) for x in self.dissipation_quartic],
            "control_forcing": [float(x) for x in self.control_forcing],
            "beta_used": self.beta_used,
            "K_used": self.K_used,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)


@dataclass
class IntervalDissipation:
    """Dissipation integrals accumulated over one time window."""

    t1: float
    t2: float
    entropy: float
    cross: float
    hessian: float
    quartic: float
    control_forcing: float


@dataclass
class FittedConstants:
    """Empirical audit constants: one beta, one K per control norm."""

    beta: float
    control_norms: np.ndarray
    K_values: np.ndarray

    def K_of(self, norm):
        """K at a given control norm (piecewise linear, clamped at the ends)."""
        return float(np.interp(norm, self.control_norms, self.K_values))


def energy_value(state, params, truncated=False):
    """Energy of one state; ``truncated`` selects the capped entropy density."""
    g_fun = (lambda u: g_m_energy(u, params.s, params.m)) if truncated \
        else (lambda u: g_energy(u, params.s))
    z = z_transform(state.v, params.alpha)
    entropy = integrate(Field(state.grid, g_fun(state.u.values)))
    return params.s / 4.0 * entropy + 0.5 * h1_seminorm(z) ** 2


def _face_weighted_cross(grid, density_pow, z):
    """Integral of ``u^s |grad z|^2`` with arithmetic face means of ``u^s``."""
    total = 0.0
    for k, gz in enumerate(face_gradients(grid, z)):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        mean_pow = 0.5 * (density_pow[tuple(lo)] + density_pow[tuple(hi)])
        total += (mean_pow * gz**2).sum()
    return total * grid.cell_volume


def _level_quantities(traj, params):
    """Instantaneous energy and dissipation densities at every saved level."""
    grid = traj.grid
    s = params.s
    n = traj.n_levels
    E = np.zeros(n)
    ent = np.zeros(n)
    cross = np.zeros(n)
    hess = np.zeros(n)
    quart = np.zeros(n)
    forc = np.zeros(n)
    vol = grid.cell_volume
    for i in range(n):
        u = traj.u[i]
        z = np.sqrt(traj.v[i] + params.alpha**2)
        zf = Field(grid, z)
        E[i] = s / 4.0 * g_energy(u, s).sum() * vol + 0.5 * h1_seminorm(zf) ** 2
        ent[i] = h1_seminorm(Field(grid, (u + 1.0) ** (s / 2.0))) ** 2
        cross[i] = _face_weighted_cross(grid, u**s, z)
        hess[i] = hessian_frobenius_sq(grid, z).sum() * vol
        quart[i] = (cell_gradient_sq(grid, z) ** 2 / z**2).sum() * vol
        f = traj.control_slice(float(traj.times[i]))
        forc[i] = (f**2).sum() * vol
    return E, ent, cross, hess, quart, forc


def _interval_trapezoid(times, density, i1, i2):
    dt = np.diff(times[i1:i2 + 1])
    mid = 0.5 * (density[i1:i2] + density[i1 + 1:i2 + 1])
    return float((dt * mid).sum())


def dissipation_terms(traj, t1, t2, params):
    """Trapezoidal dissipation integrals over ``[t1, t2]``.

    Both endpoints must be saved time levels of the trajectory; anything else
    is refused rather than interpolated.
    """
    i1 = traj.index_of_time(t1)
    i2 = traj.index_of_time(t2)
    if not i1 < i2:
        raise ValueError("t1 must precede t2 on the trajectory time grid")
    _, ent, cross, hess, quart, forc = _level_quantities(traj, params)
    return IntervalDissipation(
        t1=float(t1), t2=float(t2),
        entropy=_interval_trapezoid(traj.times, ent, i1, i2),
        cross=_interval_trapezoid(traj.times, cross, i1, i2),
        hessian=_interval_trapezoid(traj.times, hess, i1, i2),
        quartic=_interval_trapezoid(traj.times, quart, i1, i2),
        control_forcing=_interval_trapezoid(traj.times, forc, i1, i2),
    )


def build_energy_report(traj, params, beta, K):
    """Energy trace and per-consecutive-interval dissipations of a run."""
    E, ent, cross, hess, quart, forc = _level_quantities(traj, params)
    dt = np.diff(traj.times)

    def per_interval(density):
        return dt * 0.5 * (density[:-1] + density[1:])

    return EnergyReport(
        times=traj.times.copy(), energy=E,
        dissipation_entropy=per_interval(ent),
        dissipation_cross=per_interval(cross),
        dissipation_hessian=per_interval(hess),
        dissipation_quartic=per_interval(quart),
        control_forcing=per_interval(forc),
        beta_used=float(beta), K_used=float(K),
    )


def _cumulative_trapezoid(times, density):
    dt = np.diff(times)
    return np.concatenate([[0.0],
                           np.cumsum(dt * 0.5 * (density[:-1] + density[1:]))])


def _audit_pieces(traj, params):
    """Per-level energy plus cumulative dissipation integrals from t=0.

    Returns ``(E, P, C)`` where ``P`` accumulates the beta-weighted trio
    (entropy + hessian + quartic) and ``C`` the density-weighted z-gradient
    term, so the audit accumulator is ``E + beta * P + C / 4`` for any beta.
    """
    E, ent, cross, hess, quart, _ = _level_quantities(traj, params)
    P = _cumulative_trapezoid(traj.times, ent + hess + quart)
    C = _cumulative_trapezoid(traj.times, cross)
    return E, P, C


def _audit_accumulator(traj, params, beta):
    """Cumulative ``E(t) + beta*(ent+hess+quart) + cross/4`` at saved levels."""
    E, P, C = _audit_pieces(traj, params)
    return E + beta * P + 0.25 * C


def energy_inequality_audit(traj, params, beta, K):
    """Worst signed residual of the energy inequality over all saved pairs.

    For every pair of saved levels ``t1 < t2`` the residual is

        E(t2) + beta*(entropy + hessian + quartic) + cross/4 - E(t1) - K,

    with the dissipation integrals taken over ``(t1, t2)``.  A positive
    return value means the inequality fails at this ``(beta, K)``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    A = _audit_accumulator(traj, params, beta)
    if A.size < 2:
        return -float(K)
    running_min = np.minimum.accumulate(A[:-1])
    return float(np.max(A[1:] - running_min)) - float(K)


def audit_pairs(traj, params, beta, K, stride=1):
    """Per-pair residual rows ``(t1, t2, residual)`` for plotting."""
    A = _audit_accumulator(traj, params, beta)
    idx = list(range(0, traj.n_levels, stride))
    if idx[-1] != traj.n_levels - 1:
        idx.append(traj.n_levels - 1)
    rows = []
    for a, i in enumerate(idx):
        for j in idx[a + 1:]:
            rows.append((float(traj.times[i]), float(traj.times[j]),
                         float(A[j] - A[i] - K)))
    return rows


def audit_pairs_to_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t1", "t2", "residual"])
        for t1, t2, r in rows:
            writer.writerow([repr(t1), repr(t2), repr(r)])


def _minimal_K(A):
    """Smallest nonnegative K making every pair residual nonpositive."""
    if A.size < 2:
        return 0.0
    running_min = np.minimum.accumulate(A[:-1])
    return max(0.0, float(np.max(A[1:] - running_min)))


def fit_constants(trajs, params, beta_range=(1e-6, 1.0), zero_tol=1e-8,
                  mono_tol=1e-8, bisection_steps=60):
    """Fit the audit constants over a family of runs.

    Searches for the largest ``beta`` in ``beta_range`` such that every
    uncontrolled run in the family is purely dissipative (its minimal K stays
    below ``zero_tol``), then reports the minimal admissible K of every run
    at that ``beta``.  The resulting K curve against the control norm must be
    nondecreasing within ``mono_tol``; a violation, or an infeasible lower
    end of the beta range, raises :class:`AuditInfeasibleError`.

    Parameters
    ----------
    trajs : sequence of Trajectory
        At least two runs, ideally with distinct control norms.
    params : ModelParams

    Returns
    -------
    FittedConstants
    """
    trajs = list(trajs)
    if not trajs:
        raise ValueError("need at least one trajectory")
    norms = np.array([
        t.control.lq_norm(params.q) if t.control is not None else 0.0
        for t in trajs
    ])
    pieces = [_audit_pieces(t, params) for t in trajs]

    def K_all(beta):
        return np.array([_minimal_K(E + beta * P + 0.25 * C)
                         for E, P, C in pieces])

    zero_idx = np.nonzero(norms <= 1e-14)[0]

    def passes(beta):
        if zero_idx.size == 0:
            return True
        return bool(np.all(K_all(beta)[zero_idx] <= zero_tol))

    lo, hi = beta_range
    if passes(hi):
        beta = hi
    elif not passes(lo):
        raise AuditInfeasibleError(
            f"uncontrolled runs fail the dissipation audit even at beta={lo}")
    else:
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            if passes(mid):
                lo = mid
            else:
                hi = mid
        beta = lo

    K = K_all(beta)
    order = np.argsort(norms, kind="stable")
    norms_sorted = norms[order]
    K_sorted = K[order]
    drops = K_sorted[:-1] - K_sorted[1:]
    if drops.size and float(drops.max()) > mono_tol:
        k = int(np.argmax(drops))
        raise AuditInfeasibleError(
            f"fitted K is not nondecreasing: K({norms_sorted[k]:.4g})="
            f"{K_sorted[k]:.6g} > K({norms_sorted[k + 1]:.4g})="
            f"{K_sorted[k + 1]:.6g}")
    return FittedConstants(beta=float(beta), control_norms=norms_sorted,
                           K_values=K_sorted)
