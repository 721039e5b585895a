"""Fluid velocity fields: the analytic 3D vortex and gridded snapshot data.

Every field exposes ``sample(x, t)`` returning a :class:`FieldSample` with the
velocity, its spatial gradient and its partial time derivative, and
``position_jacobians(x, t)`` returning the derivatives of those three
quantities with respect to the evaluation point. The latter is what the
reverse-mode engine needs to differentiate through particle positions.

Positions may carry leading batch dimensions, ``x.shape == (..., 3)``; the
time is a scalar shared by the whole batch.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

from .core import DomainError, DomainExitError, atomic_write_bytes, atomic_write_text


@dataclass(frozen=True)
class FieldSample:
    u: np.ndarray  # (..., 3)
    grad_u: np.ndarray  # (..., 3, 3), grad_u[..., i, j] = du_i/dx_j
    du_dt_partial: np.ndarray  # (..., 3)


def derivative_along_particle(sample: FieldSample, v) -> np.ndarray:
    """``du/dt = du/dt|_x + (v . grad) u`` along a path moving with velocity ``v``."""
    return sample.du_dt_partial + np.einsum("...ij,...j->...i", sample.grad_u, v)


def material_derivative(sample: FieldSample) -> np.ndarray:
    """``Du/Dt``, the derivative following the fluid element itself."""
    return derivative_along_particle(sample, sample.u)


def _as_points(x) -> np.ndarray:
    # keep extended precision if the caller uses it
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


class VortexField:
    """Rotating flow ``u = (-y w, x w, 0)`` with ``w = omega0 + alpha sin^2(z) cos^2(t)``."""

    bounds = None

    def __init__(self, omega0: float = 1.0, alpha: float = 0.2):
        if not omega0 > 0:
            raise DomainError(f"omega0 must be positive, got {omega0}")
        if not alpha >= 0:
            raise DomainError(f"alpha must be non-negative, got {alpha}")
        self.omega0 = float(omega0)
        self.alpha = float(alpha)

    def __repr__(self):
        return f"VortexField(omega0={self.omega0}, alpha={self.alpha})"

    def _omega(self, z, t):
        a = self.alpha
        sz, cz = np.sin(z), np.cos(z)
        ct, st = math.cos(t), math.sin(t)
        om = self.omega0 + a * sz**2 * ct**2
        om_z = 2.0 * a * sz * cz * ct**2
        om_t = -2.0 * a * sz**2 * ct * st
        om_zz = 2.0 * a * (cz**2 - sz**2) * ct**2
        om_tz = -4.0 * a * sz * cz * ct * st
        return om, om_z, om_t, om_zz, om_tz

    def sample(self, x, t: float) -> FieldSample:
        x = _as_points(x)
        px, py, pz = x[..., 0], x[..., 1], x[..., 2]
        om, om_z, om_t, _, _ = self._omega(pz, t)
        zero = np.zeros_like(px)
        u = np.stack([-py * om, px * om, zero], axis=-1)
        grad = np.zeros(x.shape[:-1] + (3, 3), dtype=x.dtype)
        grad[..., 0, 1] = -om
        grad[..., 0, 2] = -py * om_z
        grad[..., 1, 0] = om
        grad[..., 1, 2] = px * om_z
        dudt = np.stack([-py * om_t, px * om_t, zero], axis=-1)
        return FieldSample(u, grad, dudt)

    def position_jacobians(self, x, t: float):
        """Return ``(du/dx, d(grad u)/dx, d(du/dt)/dx)`` with the new axis last."""
        x = _as_points(x)
        px, py, pz = x[..., 0], x[..., 1], x[..., 2]
        om, om_z, om_t, om_zz, om_tz = self._omega(pz, t)
        du = self.sample(x, t).grad_u
        dgrad = np.zeros(x.shape[:-1] + (3, 3, 3), dtype=x.dtype)
        dgrad[..., 0, 1, 2] = -om_z
        dgrad[..., 0, 2, 1] = -om_z
        dgrad[..., 0, 2, 2] = -py * om_zz
        dgrad[..., 1, 0, 2] = om_z
        dgrad[..., 1, 2, 0] = om_z
        dgrad[..., 1, 2, 2] = px * om_zz
        ddudt = np.zeros(x.shape[:-1] + (3, 3), dtype=x.dtype)
        ddudt[..., 0, 1] = -om_t
        ddudt[..., 0, 2] = -py * om_tz
        ddudt[..., 1, 0] = om_t
        ddudt[..., 1, 2] = px * om_tz
        return du, dgrad, ddudt


class StillFluid:
    """Fluid at rest everywhere; useful for equilibrium checks."""

    bounds = None

    def sample(self, x, t: float) -> FieldSample:
        x = _as_points(x)
        lead = x.shape[:-1]
        return FieldSample(np.zeros(lead + (3,)), np.zeros(lead + (3, 3)), np.zeros(lead + (3,)))

    def position_jacobians(self, x, t: float):
        lead = np.shape(x)[:-1]
        return np.zeros(lead + (3, 3)), np.zeros(lead + (3, 3, 3)), np.zeros(lead + (3, 3))


# --------------------------------------------------------------------------
# Gridded snapshot data
# --------------------------------------------------------------------------


class IngestionError(ValueError):
    """A snapshot bundle failed validation; ``field`` names the offending key."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _natural_second_derivatives(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second derivatives of the natural cubic spline through ``f`` along ``axis``."""
    f = np.moveaxis(f, axis, 0)
    n = f.shape[0]
    M = np.zeros_like(f)
    if n > 2:
        rest = f.shape[1:]
        rhs = (6.0 / h**2) * (f[:-2] - 2.0 * f[1:-1] + f[2:])
        m = n - 2
        ab = np.zeros((3, m))
        ab[0, 1:] = 1.0
        ab[1, :] = 4.0
        ab[2, :-1] = 1.0
        M[1:-1] = solve_banded((1, 1), ab, rhs.reshape(m, -1)).reshape((m,) + rest)
    return np.moveaxis(M, 0, axis)


def _axis_weights(s: np.ndarray, h: float):
    """Local basis weights on one interval and their first derivative.

    ``s`` in [0, 1] is the position inside the interval. Rows of the returned
    ``(..., 2, 2)`` arrays index the coefficient type (value, second
    derivative), columns the left/right node.
    """
    r = 1.0 - s
    w = np.empty(s.shape + (2, 2))
    w[..., 0, 0] = r
    w[..., 0, 1] = s
    w[..., 1, 0] = (r**3 - r) * h * h / 6.0
    w[..., 1, 1] = (s**3 - s) * h * h / 6.0
    dw = np.empty(s.shape + (2, 2))
    dw[..., 0, 0] = -1.0 / h
    dw[..., 0, 1] = 1.0 / h
    dw[..., 1, 0] = -(3.0 * r**2 - 1.0) * h / 6.0
    dw[..., 1, 1] = (3.0 * s**2 - 1.0) * h / 6.0
    return w, dw


class GriddedField:
    """Velocity snapshots on a uniform box grid.

    Space is interpolated by tensor-product natural cubic splines, time
    linearly between bracketing snapshots. The spatial gradient is a central
    finite difference of the interpolant with step half the smallest grid
    spacing (one-sided near the boundary).

    Parameters
    ----------
    axes : tuple of (x, y, z) 1-d arrays, each uniformly spaced
    t_grid : strictly increasing snapshot times
    data : array of shape ``(3, nt, nz, ny, nx)``
    """

    def __init__(self, axes: Sequence[np.ndarray], t_grid, data):
        xs = [np.asarray(a, dtype=np.float64) for a in axes]
        if len(xs) != 3:
            raise IngestionError("need three axes", "axes")
        for name, a in zip("xyz", xs):
            if a.ndim != 1 or a.size < 2:
                raise IngestionError(f"axis {name} needs at least two nodes", f"n{name}")
            d = np.diff(a)
            if np.any(d <= 0) or np.max(np.abs(d - d[0])) > 1e-9 * abs(d[0]):
                raise IngestionError(f"axis {name} must be uniform and increasing", f"{name}_min")
        t_grid = np.asarray(t_grid, dtype=np.float64)
        if t_grid.ndim != 1 or t_grid.size < 2:
            raise IngestionError("need at least two snapshot times", "t")
        if np.any(np.diff(t_grid) <= 0):
            raise IngestionError("snapshot times must be strictly increasing", "t")
        data = np.asarray(data, dtype=np.float64)
        expected = (3, t_grid.size, xs[2].size, xs[1].size, xs[0].size)
        if data.shape != expected:
            raise IngestionError(f"data shape {data.shape} != {expected}", "data")
        self.x, self.y, self.z = xs
        self.t_grid = t_grid
        self.data = data
        self.spacing = np.array([a[1] - a[0] for a in xs])
        self.lower = np.array([a[0] for a in xs])
        self.upper = np.array([a[-1] for a in xs])
        self.bounds = np.stack([self.lower, self.upper], axis=1)
        self.delta = 0.5 * float(self.spacing.min())
        self.coef = self._build_coefficients()

    def _build_coefficients(self) -> np.ndarray:
        # coef[p, q, r] = Mz^p My^q Mx^r applied to the samples, shape
        # (2, 2, 2, 3, nt, nz, ny, nx)
        hx, hy, hz = self.spacing
        out = np.empty((2, 2, 2) + self.data.shape)
        out[0, 0, 0] = self.data
        for p in (0, 1):
            for q in (0, 1):
                if p == 0 and q == 0:
                    base = self.data
                elif q == 0:
                    base = _natural_second_derivatives(out[0, 0, 0], hz, axis=2)
                else:
                    base = _natural_second_derivatives(out[p, 0, 0], hy, axis=3)
                out[p, q, 0] = base
                out[p, q, 1] = _natural_second_derivatives(base, hx, axis=4)
        return out

    def __repr__(self):
        return (
            f"GriddedField(nx={self.x.size}, ny={self.y.size}, nz={self.z.size}, "
            f"nt={self.t_grid.size})"
        )

    # -- bounds ---------------------------------------------------------

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def _check(self, x, t):
        if not (self.t_grid[0] <= t <= self.t_grid[-1]):
            raise DomainExitError(f"time {t} outside snapshot range", "t", float(t))
        x = np.asarray(x)
        for k, name in enumerate("xyz"):
            c = x[..., k]
            bad = (c < self.lower[k]) | (c > self.upper[k]) | ~np.isfinite(c)
            if np.any(bad):
                val = float(np.asarray(c)[bad].flat[0])
                raise DomainExitError(f"{name}={val} outside [{self.lower[k]}, {self.upper[k]}]", name, val)

    def _time_bracket(self, t: float):
        i = int(np.searchsorted(self.t_grid, t, side="right")) - 1
        i = min(max(i, 0), self.t_grid.size - 2)
        dt = self.t_grid[i + 1] - self.t_grid[i]
        return i, dt

    # -- spline evaluation --------------------------------------------

    def _locate(self, x):
        x = np.asarray(x, dtype=np.float64)
        n = np.array([self.x.size, self.y.size, self.z.size])
        rel = (x - self.lower) / self.spacing
        idx = np.clip(np.floor(rel).astype(np.int64), 0, n - 2)
        s = np.clip(rel - idx, 0.0, 1.0)
        return idx, s

    def _spline(self, snap: int, x, grad: bool = False):
        """Spline value (and gradient) of all components at positions ``x``."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        xf = x.reshape(-1, 3)
        idx, s = self._locate(xf)
        wx, dwx = _axis_weights(s[:, 0], self.spacing[0])
        wy, dwy = _axis_weights(s[:, 1], self.spacing[1])
        wz, dwz = _axis_weights(s[:, 2], self.spacing[2])
        ix = idx[:, 0, None] + np.arange(2)
        iy = idx[:, 1, None] + np.arange(2)
        iz = idx[:, 2, None] + np.arange(2)
        c = self.coef[:, :, :, :, snap]  # (2,2,2,3,nz,ny,nx)
        # gather corners: (2,2,2,3,B,2,2,2)
        corners = c[:, :, :, :, iz[:, :, None, None], iy[:, None, :, None], ix[:, None, None, :]]
        val = np.einsum("bpa,bqc,bre,pqrkbace->bk", wz, wy, wx, corners, optimize=True)
        if not grad:
            return val.reshape(lead + (3,))
        gx = np.einsum("bpa,bqc,bre,pqrkbace->bk", wz, wy, dwx, corners, optimize=True)
        gy = np.einsum("bpa,bqc,bre,pqrkbace->bk", wz, dwy, wx, corners, optimize=True)
        gz = np.einsum("bpa,bqc,bre,pqrkbace->bk", dwz, wy, wx, corners, optimize=True)
        g = np.stack([gx, gy, gz], axis=-1)
        return val.reshape(lead + (3,)), g.reshape(lead + (3, 3))

    def _blend(self, x, t: float, grad: bool = False):
        i, dt = self._time_bracket(t)
        lam = (t - self.t_grid[i]) / dt
        if not grad:
            a = self._spline(i, x)
            b = self._spline(i + 1, x)
            return a + (b - a) * lam, (b - a) / dt
        a, ga = self._spline(i, x, grad=True)
        b, gb = self._spline(i + 1, x, grad=True)
        return a + (b - a) * lam, (b - a) / dt, ga + (gb - ga) * lam, (gb - ga) / dt

    def _fd_offsets(self, x):
        """Per-axis (plus, minus, divisor) points for the gradient stencil."""
        x = np.asarray(x, dtype=np.float64)
        d = self.delta
        out = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = d
            xp = x + e
            xm = x - e
            fwd_ok = xp[..., j] <= self.upper[j]
            bwd_ok = xm[..., j] >= self.lower[j]
            # one-sided where the centred stencil leaves the box
            xp = np.where((~fwd_ok)[..., None], x, xp)
            xm = np.where((~bwd_ok)[..., None], x, xm)
            div = np.where(fwd_ok & bwd_ok, 2.0 * d, d)
            out.append((xp, xm, div))
        return out

    def sample(self, x, t: float) -> FieldSample:
        x = np.asarray(x, dtype=np.float64)
        self._check(x, t)
        u, dudt = self._blend(x, t)
        grad = np.empty(x.shape[:-1] + (3, 3))
        for j, (xp, xm, div) in enumerate(self._fd_offsets(x)):
            up, _ = self._blend(xp, t)
            um, _ = self._blend(xm, t)
            grad[..., :, j] = (up - um) / div[..., None]
        return FieldSample(u, grad, dudt)

    def position_jacobians(self, x, t: float):
        x = np.asarray(x, dtype=np.float64)
        self._check(x, t)
        _, _, du, ddudt = self._blend(x, t, grad=True)
        dgrad = np.empty(x.shape[:-1] + (3, 3, 3))
        for j, (xp, xm, div) in enumerate(self._fd_offsets(x)):
            _, _, gp, _ = self._blend(xp, t, grad=True)
            _, _, gm, _ = self._blend(xm, t, grad=True)
            dgrad[..., :, j, :] = (gp - gm) / div[..., None, None]
        return du, dgrad, ddudt


def sample_field_on_grid(field, axes: Sequence[np.ndarray], t_grid) -> GriddedField:
    """Tabulate any field on a box grid (handy for building test bundles)."""
    x, y, z = (np.asarray(a, dtype=np.float64) for a in axes)
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    data = np.empty((3, len(t_grid), z.size, y.size, x.size))
    for k, t in enumerate(t_grid):
        data[:, k] = np.moveaxis(field.sample(pts, float(t)).u, -1, 0)
    return GriddedField((x, y, z), t_grid, data)


# --------------------------------------------------------------------------
# Snapshot-bundle format
# --------------------------------------------------------------------------

FORMAT_VERSION = 1
_INT_KEYS = ("nx", "ny", "nz", "nt")
_FLOAT_KEYS = ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")


def write_bundle(header_path, field: GriddedField, data_file: str | None = None) -> Path:
    """Write ``field`` as a snapshot bundle: ``key: value`` header plus raw f64 data."""
    header_path = Path(header_path)
    data_file = data_file or header_path.with_suffix(".bin").name
    lines = [
        f"format_version: {FORMAT_VERSION}",
        f"nx: {field.x.size}",
        f"ny: {field.y.size}",
        f"nz: {field.z.size}",
        f"nt: {field.t_grid.size}",
    ]
    for k, name in enumerate("xyz"):
        lines.append(f"{name}_min: {float(field.lower[k])!r}")
        lines.append(f"{name}_max: {float(field.upper[k])!r}")
    lines.append("t: " + ", ".join(repr(float(v)) for v in field.t_grid))
    lines.append(f"data_file: {data_file}")
    lines.append("byte_order: little-endian")
    lines.append("scalar: f64")
    atomic_write_text(header_path, "\n".join(lines) + "\n")
    atomic_write_bytes(header_path.parent / data_file, field.data.astype("<f8").tobytes(order="C"))
    return header_path


def read_bundle_header(header_path) -> dict:
    header = {}
    with open(header_path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise IngestionError(f"line {lineno} is not 'key: value'", f"line {lineno}")
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()
    return header


def grid_ingest(header_path) -> GriddedField:
    """Load a snapshot bundle and build its spline interpolant."""
    header_path = Path(header_path)
    hdr = read_bundle_header(header_path)
    required = ("format_version",) + _INT_KEYS + _FLOAT_KEYS + ("t", "data_file", "byte_order", "scalar")
    for key in required:
        if key not in hdr:
            raise IngestionError("missing key", key)
    if hdr["format_version"] != str(FORMAT_VERSION):
        raise IngestionError(f"unsupported version {hdr['format_version']}", "format_version")
    if hdr["byte_order"] != "little-endian":
        raise IngestionError(f"unsupported byte order {hdr['byte_order']}", "byte_order")
    if hdr["scalar"] != "f64":
        raise IngestionError(f"unsupported scalar type {hdr['scalar']}", "scalar")
    dims = {}
    for key in _INT_KEYS:
        try:
            dims[key] = int(hdr[key])
        except ValueError:
            raise IngestionError(f"not an integer: {hdr[key]!r}", key) from None
        if dims[key] < 2:
            raise IngestionError("need at least 2 points", key)
    lim = {}
    for key in _FLOAT_KEYS:
        try:
            lim[key] = float(hdr[key])
        except ValueError:
            raise IngestionError(f"not a number: {hdr[key]!r}", key) from None
    try:
        t = np.array([float(v) for v in hdr["t"].split(",")], dtype=np.float64)
    except ValueError:
        raise IngestionError("malformed time list", "t") from None
    if t.size != dims["nt"]:
        raise IngestionError(f"{t.size} times listed but nt={dims['nt']}", "nt")
    if np.any(np.diff(t) <= 0):
        raise IngestionError("snapshot times not strictly increasing", "t")
    data_path = header_path.parent / hdr["data_file"]
    if not data_path.exists():
        raise IngestionError(f"{data_path} not found", "data_file")
    raw = np.fromfile(data_path, dtype="<f8")
    n = 3 * dims["nt"] * dims["nz"] * dims["ny"] * dims["nx"]
    if raw.size != n:
        snaps = raw.size / (3 * dims["nz"] * dims["ny"] * dims["nx"])
        raise IngestionError(f"data holds {raw.size} values (~{snaps:g} snapshots), expected {n}", "nt")
    axes = [
        np.linspace(lim[f"{c}_min"], lim[f"{c}_max"], dims[f"n{c}"]) for c in "xyz"
    ]
    data = raw.reshape(3, dims["nt"], dims["nz"], dims["ny"], dims["nx"]).astype(np.float64)
    return GriddedField(axes, t, data)


def grid_sparsen(snapshots, times):
    """Average snapshots in blocks of 3, 5, ..., 5, 3.

    ``snapshots`` has the snapshot index first. Returns the averaged
    snapshots and the mean time of each block.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    n = snapshots.shape[0]
    if times.shape[0] != n:
        raise DomainError(f"{n} snapshots but {times.shape[0]} times")
    if n < 7 or (n - 6) % 5 != 0:
        raise DomainError(f"cannot split {n} snapshots into blocks of 3, 5, ..., 5, 3")
    edges = [0, 3] + list(range(8, n - 2, 5)) + [n]
    if edges[-2] != n - 3:
        edges.insert(-1, n - 3)
    blocks = list(zip(edges[:-1], edges[1:]))
    out = np.stack([snapshots[a:b].mean(axis=0) for a, b in blocks])
    out_t = np.array([times[a:b].mean() for a, b in blocks])
    return out, out_t


def sparsen_field(field: GriddedField) -> GriddedField:
    snaps = np.moveaxis(field.data, 1, 0)
    out, t = grid_sparsen(snaps, field.t_grid)
    return GriddedField((field.x, field.y, field.z), t, np.moveaxis(out, 0, 1))
