"""Dimensionless particle parameters, state containers and trajectory I/O."""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

STANDARD_GRAVITY = 9.81  # m/s^2


class DomainError(ValueError):
    """Input outside the domain of a mathematical operation."""


class DomainExitError(DomainError):
    """A flow field was evaluated outside its data region."""

    def __init__(self, message: str, coordinate: str, value: float):
        super().__init__(message)
        self.coordinate = coordinate
        self.value = value


class TruncatedTrajectoryError(RuntimeError):
    """A trajectory left the domain before reaching the final time.

    ``step`` is the index of the step whose evaluation failed and
    ``partial`` holds the states computed so far.
    """

    def __init__(self, step: int, partial: "Trajectory | None" = None, cause: Exception | None = None):
        super().__init__(f"trajectory left the domain at step {step}: {cause}")
        self.step = step
        self.partial = partial
        self.cause = cause


def _vec3(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def derive_dimensionless(m_p: float, m_f: float, a: float, nu: float, T_ref: float) -> tuple[float, float]:
    """Return ``(R, S)`` from particle/fluid masses, radius, viscosity and time scale."""
    for name, val in (("m_p", m_p), ("m_f", m_f), ("a", a), ("nu", nu), ("T_ref", T_ref)):
        if not val > 0:
            raise DomainError(f"{name} must be positive, got {val}")
    R = 3.0 * m_f / (m_f + 2.0 * m_p)
    S = (a * a / nu) / (3.0 * T_ref)
    return R, S


@dataclass(frozen=True)
class ReferenceScales:
    u_ref: float
    T_ref: float
    L_ref: float

    def __post_init__(self):
        if not (self.u_ref > 0 and self.T_ref > 0 and self.L_ref > 0):
            raise DomainError("reference scales must be positive")
        if abs(self.L_ref - self.u_ref * self.T_ref) > 1e-12 * self.L_ref:
            raise DomainError(
                f"L_ref={self.L_ref} inconsistent with u_ref*T_ref={self.u_ref * self.T_ref}"
            )

    @classmethod
    def from_velocity_time(cls, u_ref: float, T_ref: float) -> "ReferenceScales":
        return cls(u_ref=u_ref, T_ref=T_ref, L_ref=u_ref * T_ref)

    def gravity(self, g: float = STANDARD_GRAVITY) -> np.ndarray:
        """Dimensionless gravity ``(0, 0, g T_ref / u_ref)``.

        The equation of motion carries the gravity term as ``-(1 - R) G``, so
        this sign makes particles heavier than the fluid (``R < 1``) sink
        towards ``-z``.
        """
        return np.array([0.0, 0.0, g * self.T_ref / self.u_ref])


# Reference scales of the stirred-tank data set.
STIRRED_TANK_SCALES = ReferenceScales(u_ref=4.8e-1, T_ref=2.7e-1, L_ref=1.296e-1)

_KIND_TO_SCALE = {"length": "L_ref", "velocity": "u_ref", "time": "T_ref"}


def nondimensionalize(value, kind: str, scales: ReferenceScales):
    """Divide a dimensional length, velocity or time by its reference scale."""
    try:
        ref = getattr(scales, _KIND_TO_SCALE[kind])
    except KeyError:
        raise ValueError(f"unknown quantity kind {kind!r}") from None
    return np.asarray(value, dtype=np.float64) / ref if not np.isscalar(value) else value / ref


def redimensionalize(value, kind: str, scales: ReferenceScales):
    try:
        ref = getattr(scales, _KIND_TO_SCALE[kind])
    except KeyError:
        raise ValueError(f"unknown quantity kind {kind!r}") from None
    return np.asarray(value, dtype=np.float64) * ref if not np.isscalar(value) else value * ref


@dataclass(frozen=True)
class ParticleParams:
    """Dimensionless parameters of the particle equation of motion.

    ``R = 3 m_f / (m_f + 2 m_p)`` and ``S = (a^2/nu) / (3 T_ref)``. When the
    optional dimensional values are supplied they must reproduce ``R`` and ``S``.
    """

    R: float
    S: float
    G: np.ndarray
    t0: float = 0.0
    m_p: Optional[float] = None
    m_f: Optional[float] = None
    a: Optional[float] = None
    nu: Optional[float] = None
    T_ref: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "G", _vec3(self.G, "G"))
        if not (0.0 < self.R <= 3.0):
            raise DomainError(f"R must lie in (0, 3], got {self.R}")
        if not self.S > 0.0:
            raise DomainError(f"S must be positive, got {self.S}")
        if None not in (self.m_p, self.m_f):
            R = 3.0 * self.m_f / (self.m_f + 2.0 * self.m_p)
            if abs(R - self.R) > 1e-12 * abs(R):
                raise DomainError(f"R={self.R} disagrees with masses (R={R})")
        if None not in (self.a, self.nu, self.T_ref):
            S = (self.a**2 / self.nu) / (3.0 * self.T_ref)
            if abs(S - self.S) > 1e-12 * abs(S):
                raise DomainError(f"S={self.S} disagrees with a, nu, T_ref (S={S})")

    @classmethod
    def from_dimensional(cls, m_p, m_f, a, nu, T_ref, G, t0=0.0) -> "ParticleParams":
        R, S = derive_dimensionless(m_p, m_f, a, nu, T_ref)
        return cls(R=R, S=S, G=G, t0=t0, m_p=m_p, m_f=m_f, a=a, nu=nu, T_ref=T_ref)

    @property
    def basset_coefficient(self) -> float:
        """``R * sqrt(3 / (S pi))``, the prefactor of the history term."""
        return self.R * math.sqrt(3.0 / (self.S * math.pi))


@dataclass(frozen=True)
class ParticleState:
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _vec3(self.y, "y"))
        object.__setattr__(self, "w", _vec3(self.w, "w"))
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.w))):
            raise ValueError("particle state must be finite")

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.y, self.w])


def absolute_velocity(state: ParticleState, u) -> np.ndarray:
    """Particle velocity ``v = w + u``."""
    return state.w + np.asarray(u, dtype=np.float64)


@dataclass(frozen=True)
class Trajectory:
    """Particle states on a uniform time grid.

    ``H`` is the integrated Basset term of the reference solver and ``basset``
    the scaled network output of a UDE solve; both are optional.
    """

    t: np.ndarray
    y: np.ndarray
    w: np.ndarray
    H: Optional[np.ndarray] = None
    basset: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        n = t.shape[0]
        if t.ndim != 1 or n < 1:
            raise ValueError("time grid must be a non-empty 1-d array")
        for name in ("y", "w", "H", "basset"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (n, 3):
                raise ValueError(f"{name} must have shape ({n}, 3), got {arr.shape}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", t)
        if n > 1:
            dt = np.diff(t)
            h = (t[-1] - t[0]) / (n - 1)
            # spacing is only as exact as the rounding of t itself
            tol = 1e-12 * abs(h) + 4 * np.finfo(float).eps * np.max(np.abs(t))
            if np.any(dt <= 0) or np.max(np.abs(dt - h)) > tol:
                raise ValueError("time grid must be strictly increasing and uniform")
        if self.H is not None and np.any(self.H[0] != 0.0):
            raise ValueError("H must vanish at the initial time")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def h(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self) > 1 else 0.0

    @property
    def q(self) -> np.ndarray:
        """States as an ``(n, 6)`` array of ``(y, w)``."""
        return np.concatenate([self.y, self.w], axis=1)

    @property
    def states(self) -> list[ParticleState]:
        return [ParticleState(y, w) for y, w in zip(self.y, self.w)]

    def truncated(self, n: int) -> "Trajectory":
        sl = slice(0, n)
        return Trajectory(
            self.t[sl],
            self.y[sl],
            self.w[sl],
            None if self.H is None else self.H[sl],
            None if self.basset is None else self.basset[sl],
        )


def time_grid(t0: float, h: float, n_steps: int) -> np.ndarray:
    return t0 + h * np.arange(n_steps + 1, dtype=np.float64)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    _atomic_write(path, data)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_BASE_COLUMNS = ["t", "y1", "y2", "y3", "w1", "w2", "w3", "H1", "H2", "H3"]
_NN_COLUMNS = ["NN1", "NN2", "NN3"]


def format_trajectory(traj: Trajectory) -> str:
    """Render a trajectory as comma-separated text with 17 significant digits.

    Columns are ``t, y1..y3, w1..w3, H1..H3`` and, when network outputs are
    present, ``NN1..NN3``. A missing ``H`` series is written as ``nan``.
    """
    cols = list(_BASE_COLUMNS)
    H = traj.H if traj.H is not None else np.full((len(traj), 3), np.nan)
    blocks = [traj.t[:, None], traj.y, traj.w, H]
    if traj.basset is not None:
        cols += _NN_COLUMNS
        blocks.append(traj.basset)
    table = np.concatenate(blocks, axis=1)
    lines = [",".join(cols)]
    lines.extend(",".join("%.17g" % v for v in row) for row in table)
    return "\n".join(lines) + "\n"


def write_trajectory(path, traj: Trajectory) -> None:
    atomic_write_text(path, format_trajectory(traj))


def read_trajectory(path) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    if header[: len(_BASE_COLUMNS)] != _BASE_COLUMNS:
        raise ValueError(f"unexpected trajectory header {header}")
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    H = table[:, 7:10]
    if np.all(np.isnan(H)):
        H = None
    basset = table[:, 10:13] if header[10:13] == _NN_COLUMNS else None
    return Trajectory(table[:, 0], table[:, 1:4], table[:, 4:7], H, basset)
