"""Named analytic presets for initial conditions, desired states and controls."""

from __future__ import annotations

import numpy as np

from .cost import DesiredState
from .grid import Field
from .sim import Control


def _gaussian_values(grid, amplitude, center, width, base):
    centers = grid.cell_centers()
    r_sq = np.zeros(grid.dims)
    for k in range(grid.ndim):
        c = center[k] * grid.lengths[k]
        w = width * grid.lengths[k]
        r_sq += ((centers[k] - c) / w) ** 2
    return base + amplitude * np.exp(-0.5 * r_sq)


def _cosine_values(grid, base, amplitude, modes):
    centers = grid.cell_centers()
    prof = np.ones(grid.dims)
    for k in range(grid.ndim):
        prof *= np.cos(modes[k] * np.pi * centers[k] / grid.lengths[k])
    return base + amplitude * prof


def field_preset(grid, name, **kw):
    """Build a field from a named profile.

    Names: ``constant`` (value), ``zero``, ``gaussian`` (amplitude, center,
    width, base), ``cosine`` (base, amplitude, modes) and ``random`` (seed,
    low, high).  Centers and widths are fractions of the box size.
    """
    if name == "constant":
        return Field.full(grid, kw.get("value", 1.0))
    if name == "zero":
        return Field.zeros(grid)
    if name == "gaussian":
        center = kw.get("center", [0.5] * grid.ndim)
        return Field(grid, _gaussian_values(
            grid, kw.get("amplitude", 1.0), center, kw.get("width", 0.15),
            kw.get("base", 0.0)))
    if name == "cosine":
        modes = kw.get("modes", [1] * grid.ndim)
        return Field(grid, _cosine_values(
            grid, kw.get("base", 1.0), kw.get("amplitude", 0.5), modes))
    if name == "random":
        rng = np.random.default_rng(kw.get("seed", 0))
        return Field(grid, rng.uniform(kw.get("low", 0.0), kw.get("high", 1.0),
                                       size=grid.dims))
    raise ValueError(f"unknown field preset {name!r}")


def desired_preset(name, **kw):
    """Desired-state presets: ``constant``, ``gaussian_bump``, ``time_decaying``."""
    if name == "constant":
        return DesiredState.constant(kw.get("value", 0.0))
    if name == "gaussian_bump":
        def bump(t, grid):
            center = kw.get("center", [0.5] * grid.ndim)
            return _gaussian_values(grid, kw.get("amplitude", 1.0), center,
                                    kw.get("width", 0.15), kw.get("base", 0.0))
        return DesiredState.from_callable(bump)
    if name == "time_decaying":
        rate = kw.get("rate", 1.0)

        def profile(t, grid):
            center = kw.get("center", [0.5] * grid.ndim)
            return kw.get("base", 0.0) + np.exp(-rate * t) * _gaussian_values(
                grid, kw.get("amplitude", 1.0), center, kw.get("width", 0.15), 0.0)
        return DesiredState.from_callable(profile)
    raise ValueError(f"unknown desired-state preset {name!r}")


def control_preset(grid, name, t_final, **kw):
    """Control presets: ``zero``, ``constant`` and ``random``.

    The random preset draws uniform values on a time lattice (seeded) and, if
    ``target_norm`` is given, scales to that space-time L^q norm.
    """
    if name == "zero":
        return Control.zero(grid, t_final)
    if name == "constant":
        return Control.constant(grid, kw.get("amplitude", 1.0), t_final)
    if name == "random":
        n_times = int(kw.get("times", 5))
        rng = np.random.default_rng(kw.get("seed", 0))
        amp = kw.get("amplitude", 1.0)
        times = np.linspace(0.0, t_final, max(n_times, 2))
        vals = rng.uniform(-amp, amp, size=(times.size,) + grid.dims)
        ctrl = Control(grid, times, vals)
        target = kw.get("target_norm")
        if target is not None:
            q = kw.get("q", 3.0)
            norm = ctrl.lq_norm(q)
            if norm > 0:
                ctrl = ctrl.scaled(target / norm)
        return ctrl
    raise ValueError(f"unknown control preset {name!r}")
