"""Uniform cell-centered box grids with zero-flux boundary closure.

The domain is an axis-aligned box in 1, 2 or 3 dimensions, discretized by a
uniform cell-centered grid.  All differential operators close the boundary
with mirror ghost cells, so that no flux crosses the boundary and discrete
integrals of divergence-form terms vanish identically.  A boolean mask marks
the subregion where the bilinear control is allowed to act.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Raised when an operation combines fields living on different grids."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform cell-centered grid on a box, with a control-region mask.

    Parameters
    ----------
    dims : tuple of int
        Cell counts per axis; every axis needs at least 2 cells.
    spacing : tuple of float
        Cell width per axis, strictly positive.
    control_mask : ndarray of bool, optional
        Marks the cells where the control acts.  Defaults to the whole
        domain.  Shape must equal ``dims``.
    """

    dims: tuple
    spacing: tuple
    control_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(h) for h in self.spacing)
        if len(dims) not in (1, 2, 3):
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(dims)}")
        if len(spacing) != len(dims):
            raise ValueError("dims and spacing must have the same length")
        if any(n < 2 for n in dims):
            raise ValueError(f"every axis needs at least 2 cells, got dims={dims}")
        if any(not np.isfinite(h) or h <= 0 for h in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        mask = self.control_mask
        if mask is None:
            mask = np.ones(dims, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != dims:
                raise ValueError(
                    f"control_mask shape {mask.shape} does not match dims {dims}"
                )
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "control_mask", mask)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def lengths(self):
        """Box side lengths per axis."""
        return tuple(n * h for n, h in zip(self.dims, self.spacing))

    @property
    def volume(self):
        """Measure of the whole box."""
        return float(np.prod(self.lengths))

    def axis_centers(self, axis):
        """Cell-center coordinates along one axis."""
        n, h = self.dims[axis], self.spacing[axis]
        return (np.arange(n) + 0.5) * h

    def cell_centers(self):
        """Cell-center coordinate arrays, one per axis, each of shape ``dims``."""
        axes = [self.axis_centers(k) for k in range(self.ndim)]
        return np.meshgrid(*axes, indexing="ij")

    def compatible_with(self, other):
        """Whether two grids describe the same discretization (mask included)."""
        return self is other or (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.control_mask, other.control_mask)
        )

    def box_mask(self, bounds):
        """Boolean mask of cells whose centers fall inside a coordinate box.

        Parameters
        ----------
        bounds : sequence of (lo, hi) pairs, one per axis.
        """
        if len(bounds) != self.ndim:
            raise ValueError("one (lo, hi) pair per axis required")
        centers = self.cell_centers()
        mask = np.ones(self.dims, dtype=bool)
        for k, (lo, hi) in enumerate(bounds):
            mask &= (centers[k] >= lo) & (centers[k] <= hi)
        return mask

    def with_mask(self, mask):
        """New grid with the same geometry and a different control mask."""
        return Grid(self.dims, self.spacing, control_mask=mask)

    def header_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "control_mask": [int(b) for b in self.control_mask.ravel(order="C")],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.header_dict(), fh, sort_keys=True)

    @classmethod
    def from_header(cls, header):
        dims = tuple(int(n) for n in header["dims"])
        mask = np.asarray(header["control_mask"], dtype=bool).reshape(dims)
        return cls(dims, tuple(header["spacing"]), control_mask=mask)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_header(json.load(fh))

    @classmethod
    def unit_box(cls, dims, control_mask=None):
        """Grid on the unit box [0,1]^d with the given cell counts."""
        dims = tuple(dims)
        spacing = tuple(1.0 / n for n in dims)
        return cls(dims, spacing, control_mask=control_mask)


@dataclass
class Field:
    """Scalar cell values on a grid.

    Entries must be finite; the array is stored as float64 with shape
    ``grid.dims``.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.dims:
            if vals.size == self.grid.n_cells:
                vals = vals.reshape(self.grid.dims)
            else:
                raise ValueError(
                    f"field has {vals.size} values, grid has {self.grid.n_cells} cells"
                )
        if not np.all(np.isfinite(vals)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(vals))[0])
            raise ValueError(f"non-finite field value at cell {bad}")
        self.values = vals

    @classmethod
    def full(cls, grid, value):
        return cls(grid, np.full(grid.dims, float(value)))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.dims))

    def copy(self):
        return Field(self.grid, self.values.copy())

    def min(self):
        return float(self.values.min())

    def max(self):
        return float(self.values.max())


def _require_same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if not g.compatible_with(f.grid):
            raise GridMismatchError("fields live on different grids")
    return g


# ---------------------------------------------------------------------------
# array-level kernels (shared with the time stepper)
# ---------------------------------------------------------------------------

def laplacian_array(grid, a):
    """Second-order cell-centered Laplacian with mirror-ghost closure."""
    out = np.zeros_like(a)
    for k in range(grid.ndim):
        h2 = grid.spacing[k] ** 2
        pad = [(0, 0)] * grid.ndim
        pad[k] = (1, 1)
        ap = np.pad(a, pad, mode="edge")
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[k] = slice(0, -2)
        hi[k] = slice(2, None)
        out += (ap[tuple(hi)] - 2.0 * a + ap[tuple(lo)]) / h2
    return out


def face_gradients(grid, a):
    """Interior-face gradients per axis.

    The list entry for axis ``k`` has shape ``dims`` with ``dims[k]-1`` along
    that axis.  Boundary faces carry zero gradient by the Neumann closure and
    are not stored.
    """
    grads = []
    for k in range(grid.ndim):
        grads.append(np.diff(a, axis=k) / grid.spacing[k])
    return grads


def divergence_from_fluxes(grid, fluxes):
    """Cell divergence of interior-face fluxes, zero flux at the boundary."""
    out = np.zeros(grid.dims)
    for k, fl in enumerate(fluxes):
        pad = [(0, 0)] * grid.ndim
        pad[k] = (1, 1)
        fp = np.pad(fl, pad, mode="constant")
        out += np.diff(fp, axis=k) / grid.spacing[k]
    return out


def chemotaxis_array(grid, mob, v):
    """Upwind conservative transport term and its per-cell outflow rate.

    Returns ``(-div(mob * grad v), rate)`` where ``rate[i]`` is the total
    outgoing face-gradient magnitude per unit cell volume.  An explicit Euler
    update ``u + dt * out`` keeps ``u`` nonnegative whenever
    ``dt * rate.max() <= 1``, because each cell can lose at most its own
    content (the upwind mobility is the donor-cell value).
    """
    fluxes = []
    rate = np.zeros(grid.dims)
    for k in range(grid.ndim):
        h = grid.spacing[k]
        dv = np.diff(v, axis=k) / h
        left = [slice(None)] * grid.ndim
        right = [slice(None)] * grid.ndim
        left[k] = slice(0, -1)
        right[k] = slice(1, None)
        upwind = np.where(dv > 0, mob[tuple(left)], mob[tuple(right)])
        fluxes.append(upwind * dv)
        # outgoing gradient magnitude accumulates at the donor cell
        out_l = np.where(dv > 0, dv, 0.0) / h
        out_r = np.where(dv < 0, -dv, 0.0) / h
        acc = np.zeros(grid.dims)
        acc[tuple(left)] += out_l
        acc[tuple(right)] += out_r
        rate += acc
    return -divergence_from_fluxes(grid, fluxes), rate


def cell_gradient_sq(grid, a):
    """Cellwise squared gradient magnitude from averaged face gradients."""
    total = np.zeros(grid.dims)
    for k, g in enumerate(face_gradients(grid, a)):
        pad = [(0, 0)] * grid.ndim
        pad[k] = (1, 1)
        gp = np.pad(g, pad, mode="constant")  # boundary faces: zero gradient
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        total += (0.5 * (gp[tuple(lo)] + gp[tuple(hi)])) ** 2
    return total


def hessian_frobenius_sq(grid, a):
    """Cellwise squared Frobenius norm of the discrete Hessian.

    Pure second differences on the diagonal, centered cross differences off
    the diagonal, both closed with mirror ghosts; off-diagonal pairs count
    twice.
    """
    total = np.zeros(grid.dims)
    for k in range(grid.ndim):
        h2 = grid.spacing[k] ** 2
        pad = [(0, 0)] * grid.ndim
        pad[k] = (1, 1)
        ap = np.pad(a, pad, mode="edge")
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[k] = slice(0, -2)
        hi[k] = slice(2, None)
        total += ((ap[tuple(hi)] - 2.0 * a + ap[tuple(lo)]) / h2) ** 2
    for k in range(grid.ndim):
        for l in range(k + 1, grid.ndim):
            pad = [(0, 0)] * grid.ndim
            pad[k] = (1, 1)
            pad[l] = (1, 1)
            ap = np.pad(a, pad, mode="edge")
            sl = {}
            for sk in (-1, 1):
                for sl_ in (-1, 1):
                    idx = [slice(None)] * grid.ndim
                    idx[k] = slice(1 + sk, (-1 + sk) or None)
                    idx[l] = slice(1 + sl_, (-1 + sl_) or None)
                    sl[(sk, sl_)] = ap[tuple(idx)]
            cross = (sl[(1, 1)] - sl[(1, -1)] - sl[(-1, 1)] + sl[(-1, -1)]) / (
                4.0 * grid.spacing[k] * grid.spacing[l]
            )
            total += 2.0 * cross**2
    return total


# ---------------------------------------------------------------------------
# public field operations
# ---------------------------------------------------------------------------

def laplacian_neumann(phi):
    """Discrete Laplacian of a field with zero-flux boundary closure.

    The stencil is the standard second-order cell-centered one; mirror ghost
    cells make the boundary flux vanish, so ``integrate(laplacian_neumann(phi))``
    is zero to round-off.

    Parameters
    ----------
    phi : Field

    Returns
    -------
    Field
    """
    return Field(phi.grid, laplacian_array(phi.grid, phi.values))


def chemotaxis_divergence(u_trunc, v):
    """Discrete ``-div(u_trunc * grad v)`` in conservative upwind flux form.

    The face flux is the face gradient of ``v`` times the mobility taken from
    the donor cell (the cell mass flows out of).  Fluxes telescope and vanish
    on the boundary, so the discrete integral of the result is zero to
    round-off.

    Parameters
    ----------
    u_trunc : Field
        Nonnegative mobility (typically a truncated density).
    v : Field
        Chemical concentration whose gradient drives the transport.

    Returns
    -------
    Field
    """
    grid = _require_same_grid(u_trunc, v)
    if u_trunc.values.min() < 0:
        raise ValueError("mobility must be nonnegative")
    out, _ = chemotaxis_array(grid, u_trunc.values, v.values)
    return Field(grid, out)


def integrate(phi):
    """Cell-volume-weighted sum of a field (the discrete domain integral)."""
    return float(phi.values.sum()) * phi.grid.cell_volume


def lp_norm(phi, p):
    """Discrete L^p norm over the domain; ``p = inf`` gives the max norm.

    Parameters
    ----------
    phi : Field
    p : float
        Exponent, at least 1 (may be ``np.inf``).
    """
    if p < 1:
        raise ValueError(f"L^p norm requires p >= 1, got p={p}")
    a = np.abs(phi.values)
    if np.isinf(p):
        return float(a.max())
    return float((a**p).sum() * phi.grid.cell_volume) ** (1.0 / p)


def h1_seminorm(phi):
    """L^2 norm of the face-difference gradient with Neumann closure.

    Each interior face contributes its squared gradient weighted by one cell
    volume; boundary faces carry zero gradient.
    """
    grid = phi.grid
    total = 0.0
    for g in face_gradients(grid, phi.values):
        total += (g**2).sum()
    return float(np.sqrt(total * grid.cell_volume))


def interpolation_diagnostic(phi):
    """Ratio ``|phi|_{L^{10/3}} / (|phi|_{L^2}^{2/5} |phi|_{H^1}^{3/5})``.

    The continuous interpolation estimate bounds this by an unknown constant,
    so the ratio is reported as a diagnostic, never asserted.
    """
    l2 = lp_norm(phi, 2.0)
    if l2 == 0.0:
        return 0.0
    h1 = np.sqrt(l2**2 + h1_seminorm(phi) ** 2)
    return lp_norm(phi, 10.0 / 3.0) / (l2**0.4 * h1**0.6)


# ---------------------------------------------------------------------------
# serialization: CSV per cell plus a JSON header for the grid
# ---------------------------------------------------------------------------

def field_to_csv(phi, path):
    """Write one row per cell: index coordinates, then the value."""
    grid = phi.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"i{k}" for k in range(grid.ndim)] + ["value"])
        for idx in np.ndindex(*grid.dims):
            writer.writerow(list(idx) + [repr(float(phi.values[idx]))])


def field_from_csv(grid, path):
    """Read a field written by :func:`field_to_csv` onto the given grid."""
    vals = np.empty(grid.dims)
    seen = np.zeros(grid.dims, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != grid.ndim + 1:
            raise ValueError(
                f"{path}: expected {grid.ndim} index columns plus a value"
            )
        for row in reader:
            idx = tuple(int(c) for c in row[: grid.ndim])
            vals[idx] = float(row[grid.ndim])
            seen[idx] = True
    if not seen.all():
        raise ValueError(f"{path}: missing rows for some cells")
    return Field(grid, vals)
