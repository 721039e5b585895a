"""Reference solver for the particle equation with the Basset history term.

The relative velocity ``w = v - u`` obeys

    dw/dt = Gt(y, w, t) + dH/dt,
    H(t)  = -R sqrt(3/(S pi)) * int_{t0}^{t} w(tau) / sqrt(t - tau) dtau,

where ``Gt`` collects added mass, drag, shear and buoyancy. The singular
integral is evaluated with product-integration weights (piecewise polynomial
interpolation of ``w`` integrated exactly against the kernel) and the smooth
part with Adams-Bashforth, which makes each step a scalar linear solve for
``w_{n+1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Any, Optional, Sequence

import numpy as np

from .core import DomainExitError, ParticleParams, Trajectory, TruncatedTrajectoryError, time_grid
from .flowfields import FieldSample, derivative_along_particle


def _moments(a: float, b: float) -> np.ndarray:
    """``int_a^b s^(k - 1/2) ds`` for k = 0, 1, 2."""
    ra, rb = math.sqrt(a), math.sqrt(b)
    return np.array(
        [
            2.0 * (rb - ra),
            (2.0 / 3.0) * (rb**3 - ra**3),
            (2.0 / 5.0) * (rb**5 - ra**5),
        ]
    )


def _lagrange_kernel_weights(nodes: Sequence[int], a: float, b: float) -> np.ndarray:
    """Integrals over [a, b] of each Lagrange basis polynomial times ``s^(-1/2)``."""
    mom = _moments(a, b)
    out = np.empty(len(nodes))
    for i, si in enumerate(nodes):
        others = [sj for sj in nodes if sj != si]
        # monomial coefficients of prod (s - sj) / (si - sj)
        coef = np.array([1.0])
        denom = 1.0
        for sj in others:
            coef = np.convolve(coef, [-sj, 1.0])
            denom *= si - sj
        out[i] = coef @ mom[: coef.size] / denom
    return out


def _weights_for(n: int, order: int) -> np.ndarray:
    """Weights ``mu[n][0..n]`` in the scaled variable ``s = (t_n - tau)/h``.

    Node ``j`` (``s = j``) carries ``w(t_{n-j})``. Order 1 uses linear
    interpolation on every interval. Order 2 uses quadratics on interval pairs
    counted from ``t0``, so the start of the trajectory (where ``w`` is least
    smooth) is treated identically at every ``n``; an odd leftover interval at
    the recent end reuses the three newest nodes, and ``n = 1`` falls back to
    linear.
    """
    mu = np.zeros(n + 1)
    if order == 1 or n == 1:
        for j in range(n):
            mu[j : j + 2] += _lagrange_kernel_weights((j, j + 1), j, j + 1)
        return mu
    hi = n
    while hi >= 2:
        mu[hi - 2 : hi + 1] += _lagrange_kernel_weights((hi - 2, hi - 1, hi), hi - 2, hi)
        hi -= 2
    if hi == 1:
        mu[0:3] += _lagrange_kernel_weights((0, 1, 2), 0, 1)
    return mu


@dataclass(frozen=True)
class QuadratureTable:
    """Triangular table of history weights, ``mu[n]`` has ``n + 1`` entries.

    ``sqrt(h) * sum_j mu[n][j] * w(t_{n-j})`` approximates
    ``int_{t0}^{t_n} w(tau) / sqrt(t_n - tau) dtau``; the weights themselves do
    not depend on ``h``.
    """

    order: int
    mu: tuple

    @property
    def n_max(self) -> int:
        return len(self.mu) - 1

    def integrate(self, values: np.ndarray, h: float, n: Optional[int] = None) -> np.ndarray:
        """Apply row ``n`` to samples ``values[0..n]`` ordered oldest first."""
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[0] - 1 if n is None else n
        return math.sqrt(h) * np.tensordot(self.mu[n], values[n::-1], axes=(0, 0))


def build_quadrature(n_max: int, order: int = 2) -> QuadratureTable:
    if n_max < 1:
        raise ValueError(f"n_max must be at least 1, got {n_max}")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    mu = [np.zeros(1)] + [_weights_for(n, order) for n in range(1, n_max + 1)]
    for row in mu:
        row.flags.writeable = False
    return QuadratureTable(order=order, mu=tuple(mu))


def g_tilde(w, sample: FieldSample, v, params: ParticleParams) -> np.ndarray:
    """History-free right-hand side of the relative-velocity equation.

    ``(R-1) du/dt - (R/S) w - R (w.grad) u - (1-R) G`` with ``du/dt`` taken
    along the particle path of velocity ``v``.
    """
    R, S = params.R, params.S
    dudt = derivative_along_particle(sample, v)
    shear = np.einsum("...ij,...j->...i", sample.grad_u, w)
    return (R - 1.0) * dudt - (R / S) * w - R * shear - (1.0 - R) * params.G


def ab_integral(history: Sequence[np.ndarray], h: float, order: int) -> np.ndarray:
    """Adams-Bashforth approximation of the integral over one step.

    ``history`` holds the most recent values last. Order 2 needs two values
    and degrades to order 1 when only one is available.
    """
    if len(history) == 0:
        raise ValueError("Adams-Bashforth needs at least one right-hand-side value")
    if order == 1 or len(history) == 1:
        return h * np.asarray(history[-1])
    return h * (1.5 * np.asarray(history[-1]) - 0.5 * np.asarray(history[-2]))


@dataclass
class SolveConfig:
    h: float
    n_steps: int
    field: Any
    params: ParticleParams
    order: int = 2

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be at least 1, got {self.n_steps}")
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2, got {self.order}")

    @property
    def xi(self) -> float:
        return math.sqrt(self.h) * self.params.basset_coefficient


@dataclass
class _SolverState:
    """Running histories of one solve (oldest first)."""

    t: list
    y: list
    w: list
    H: list
    gt: list = dc_field(default_factory=list)
    v: list = dc_field(default_factory=list)


def _rhs_terms(y, w, t, config: SolveConfig):
    sample = config.field.sample(y, t)
    v = w + sample.u
    return g_tilde(w, sample, v, config.params), v


def history_terms(w_hist: np.ndarray, table: QuadratureTable, n: int) -> np.ndarray:
    """``sum_{j=0}^{n} (mu[n+1][j+1] - mu[n][j]) w_{n-j}`` for the step n -> n+1."""
    coef = table.mu[n + 1][1:] - table.mu[n]
    return np.tensordot(coef, w_hist[n::-1], axes=(0, 0))


def step(state: _SolverState, table: QuadratureTable, config: SolveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Advance the solve by one step and return ``(y_{n+1}, w_{n+1})``.

    Appends the current right-hand-side values to ``state`` as a side effect
    so the Adams-Bashforth history stays in sync.
    """
    n = len(state.w) - 1
    h = config.h
    gt, v = _rhs_terms(state.y[n], state.w[n], state.t[n], config)
    state.gt.append(gt)
    state.v.append(v)
    w_hist = np.asarray(state.w)
    xi = config.xi
    rhs = state.w[n] + ab_integral(state.gt[-2:], h, config.order) - xi * history_terms(w_hist, table, n)
    w_new = rhs / (1.0 + xi * table.mu[n + 1][0])
    y_new = state.y[n] + ab_integral(state.v[-2:], h, config.order)
    return y_new, w_new


def history_increment(w_hist: np.ndarray, table: QuadratureTable, n: int, xi: float) -> np.ndarray:
    """``H_{n+1} - H_n`` given ``w_0..w_{n+1}`` (oldest first)."""
    return -xi * table.mu[n + 1][0] * w_hist[n + 1] - xi * history_terms(w_hist, table, n)


def history_direct(w_hist: np.ndarray, table: QuadratureTable, n: int, xi: float) -> np.ndarray:
    """``H_n = -xi sum_j mu[n][j] w_{n-j}`` evaluated in one sum."""
    if n == 0:
        return np.zeros(np.shape(w_hist)[1:])
    return -xi * np.tensordot(table.mu[n], w_hist[n::-1], axes=(0, 0))


def solve_marge(y0, w0=None, config: SolveConfig = None, table: QuadratureTable | None = None) -> Trajectory:
    """Integrate the full equation with the history term from ``(y0, w0)``.

    Raises :class:`TruncatedTrajectoryError` carrying the partial trajectory
    if the particle leaves the field's domain.
    """
    if config is None:
        raise TypeError("solve_marge requires a SolveConfig")
    y0 = np.asarray(y0, dtype=np.float64).reshape(3)
    w0 = np.zeros(3) if w0 is None else np.asarray(w0, dtype=np.float64).reshape(3)
    if table is None or table.n_max < config.n_steps or table.order != config.order:
        table = build_quadrature(config.n_steps, config.order)
    t = time_grid(config.params.t0, config.h, config.n_steps)
    state = _SolverState(t=list(t), y=[y0], w=[w0], H=[np.zeros(3)])
    xi = config.xi
    for n in range(config.n_steps):
        try:
            y_new, w_new = step(state, table, config)
        except DomainExitError as exc:
            partial = Trajectory(t[: n + 1], np.array(state.y), np.array(state.w), np.array(state.H))
            raise TruncatedTrajectoryError(n, partial, exc) from exc
        state.y.append(y_new)
        state.w.append(w_new)
        state.H.append(state.H[n] + history_increment(np.asarray(state.w), table, n, xi))
    bounds = getattr(config.field, "bounds", None)
    if bounds is not None and not config.field.contains(state.y[-1]):
        n = config.n_steps
        partial = Trajectory(t[:n], np.array(state.y[:n]), np.array(state.w[:n]), np.array(state.H[:n]))
        raise TruncatedTrajectoryError(n, partial, DomainExitError("final position outside domain", "y", float("nan")))
    return Trajectory(t, np.array(state.y), np.array(state.w), np.array(state.H))


def basset_rate(traj: Trajectory) -> np.ndarray:
    """``dH/dt`` at the grid points of a solved trajectory.

    Second-order central differences of the stored ``H`` in the interior and
    one-sided three-point differences at both ends. Needs at least three
    points. Integrating the result with the trapezoid rule reproduces ``H``
    to second order when the history starts smoothly (``dw/dt = 0`` at
    ``t0``); a start with nonzero initial acceleration makes ``H`` behave as
    ``(t - t0)^(3/2)`` and limits any such reconstruction to order 3/2.
    """
    if traj.H is None:
        raise ValueError("trajectory carries no history series")
    if len(traj) < 3:
        raise ValueError("need at least three points")
    return np.gradient(traj.H, traj.t, axis=0, edge_order=2)
