"""Universal differential equation: the history term replaced by a network.

The state ``q = (y, w)`` evolves by

    dy/dt = w + u
    dw/dt = (R-1) du/dt - (R/S) w - R (w.grad) u - R sqrt(3/(S pi)) NN(...) - (1-R) G

and is integrated with the midpoint rule. Every function here accepts plain
arrays or taped :class:`~marge_ude.autodiff.Var` states, with an optional
leading batch axis over trajectories.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .core import DomainExitError, ParticleParams, Trajectory, TruncatedTrajectoryError, time_grid
from .nn import NetworkParams, RecurrentState, fnn_apply, lstm_apply

INPUT_DIM = 19


class StepFailureError(RuntimeError):
    """The midpoint iteration produced non-finite values."""


@dataclass(frozen=True)
class IntegratorConfig:
    h: float
    n_steps: int
    mode: str = "implicit"
    picard_iters: int = 10

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be at least 1, got {self.n_steps}")
        if self.mode not in ("implicit", "explicit"):
            raise ValueError(f"mode must be 'implicit' or 'explicit', got {self.mode!r}")
        if self.picard_iters < 1:
            raise ValueError("picard_iters must be at least 1")


@dataclass(frozen=True)
class UdeInputs:
    t: float
    q: np.ndarray
    dw_dt: np.ndarray
    u: np.ndarray
    Du_Dt: np.ndarray
    u0: np.ndarray

    def packed(self) -> np.ndarray:
        lead = np.shape(self.q)[:-1]
        tcol = np.full(lead + (1,), float(self.t))
        return np.concatenate([tcol, self.q, self.dw_dt, self.u, self.Du_Dt, self.u0], axis=-1)


@dataclass
class Network:
    """A parameter set unpacked once for repeated evaluation inside a solve."""

    params: NetworkParams

    def __post_init__(self):
        self.arch = self.params.arch
        self.weights = self.params.unpack()

    def initial_state(self, batch: Optional[int]):
        return RecurrentState.zeros(self.arch, batch) if self.arch.recurrent else None

    def __call__(self, x, state):
        if self.arch.recurrent:
            return lstm_apply(self.weights, self.arch, x, state)
        return fnn_apply(self.weights, self.arch, x), None


def _physics(q, t: float, field, params: ParticleParams):
    """Field sample and the history-free right-hand side at state ``q``."""
    y = q[..., 0:3]
    w = q[..., 3:6]
    u, grad, dudt_p = ad.field_sample(field, y, t)
    v = w + u
    du_dt = dudt_p + ad.matvec(grad, v)
    Du_Dt = dudt_p + ad.matvec(grad, u)
    R, S = params.R, params.S
    g_tilde = (R - 1.0) * du_dt - (R / S) * w - R * ad.matvec(grad, w) - (1.0 - R) * params.G
    return v, u, Du_Dt, g_tilde


def _pack(t: float, q, g_tilde, u, Du_Dt, u0):
    lead = ad.value_of(q).shape[:-1]
    tcol = np.full(lead + (1,), float(t))
    return ad.concat([tcol, q, g_tilde, u, Du_Dt, np.broadcast_to(u0, lead + (3,))], axis=-1)


def assemble_inputs(q, t: float, field, params: ParticleParams, u0) -> UdeInputs:
    """Network inputs ``(t, y, w, dw/dt, u, Du/Dt, u0)`` at state ``q = (y, w)``.

    ``dw/dt`` is the history-free right-hand side at ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    _, u, Du_Dt, g_tilde = _physics(q, t, field, params)
    return UdeInputs(t, q, g_tilde, u, Du_Dt, np.broadcast_to(np.asarray(u0, dtype=np.float64), u.shape))


def ude_rhs(q, t: float, field, params: ParticleParams, net: Optional[Network], rec_state, u0):
    """Right-hand side ``d(y, w)/dt``.

    Returns ``(dq, new_rec_state, basset)`` where ``basset`` is the scaled
    history surrogate ``-R sqrt(3/(S pi)) NN``. With ``net=None`` the history
    term is dropped (the WOH model) and ``basset`` is ``None``.
    """
    v, u, Du_Dt, g_tilde = _physics(q, t, field, params)
    if net is None:
        return ad.concat([v, g_tilde], axis=-1), rec_state, None
    nn_out, new_state = net(_pack(t, q, g_tilde, u, Du_Dt, u0), rec_state)
    basset = -params.basset_coefficient * nn_out
    return ad.concat([v, g_tilde + basset], axis=-1), new_state, basset


def midpoint_step(q, t: float, h: float, rhs: Callable, mode: str = "implicit", picard_iters: int = 10):
    """One midpoint-rule step for ``dq/dt = rhs(t, q)[0]``.

    Implicit mode runs exactly ``picard_iters`` fixed-point sweeps of
    ``q' = q + h f(t + h/2, (q + q')/2)`` from an explicit Euler predictor.
    Returns ``(q_next, aux)`` where ``aux`` is the second item returned by the
    last ``rhs`` evaluation.
    """
    f0, aux = rhs(t, q)
    if mode == "explicit":
        f1, aux = rhs(t + 0.5 * h, q + (0.5 * h) * f0)
        q_new = q + h * f1
    elif mode == "implicit":
        q_new = q + h * f0
        for _ in range(picard_iters):
            f1, aux = rhs(t + 0.5 * h, 0.5 * (q + q_new))
            q_new = q + h * f1
    else:
        raise ValueError(f"unknown midpoint mode {mode!r}")
    if not np.all(np.isfinite(ad.value_of(q_new))):
        raise StepFailureError(f"non-finite state after midpoint step at t={t}")
    return q_new, aux


def fluid_velocity_at(field, y0, t0: float) -> np.ndarray:
    return field.sample(np.asarray(y0, dtype=np.float64), t0).u


def integrate(q0, field, params: ParticleParams, config: IntegratorConfig, net: Optional[Network] = None,
              u0=None, rec_state=None, t0: Optional[float] = None, first_step: int = 0):
    """Integrate (possibly batched, possibly taped) states.

    Returns the list of states ``q_0..q_N`` and the final recurrent state.
    Times are ``t0 + h * (first_step + k)`` so a resumed integration sees
    exactly the same time values as an uninterrupted one.
    """
    t0 = params.t0 if t0 is None else t0
    batch = ad.value_of(q0).shape[0] if ad.value_of(q0).ndim == 2 else None
    if u0 is None:
        u0 = fluid_velocity_at(field, ad.value_of(q0)[..., 0:3], t0 + config.h * first_step)
    if net is not None and rec_state is None:
        rec_state = net.initial_state(batch)
    states = [q0]
    q = q0
    for k in range(config.n_steps):
        t = t0 + config.h * (first_step + k)
        state_k = rec_state

        def rhs(tt, qq):
            dq, new_state, _ = ude_rhs(qq, tt, field, params, net, state_k, u0)
            return dq, new_state

        try:
            q, rec_state = midpoint_step(q, t, config.h, rhs, config.mode, config.picard_iters)
        except DomainExitError as exc:
            raise TruncatedTrajectoryError(k, None, exc) from exc
        states.append(q)
    return states, rec_state


def solve_ude(y0, w0, net: Optional[NetworkParams], field, params: ParticleParams, config: IntegratorConfig,
              u0=None, rec_state=None, t0: Optional[float] = None, first_step: int = 0) -> Trajectory:
    """Integrate one trajectory of the UDE (or of the WOH model when ``net`` is None).

    The returned trajectory carries ``basset``, the scaled history surrogate at
    every grid point (zeros for WOH).
    """
    y0 = np.asarray(y0, dtype=np.float64).reshape(3)
    w0 = np.zeros(3) if w0 is None else np.asarray(w0, dtype=np.float64).reshape(3)
    t0 = params.t0 if t0 is None else t0
    network = Network(net) if net is not None else None
    if u0 is None:
        u0 = fluid_velocity_at(field, y0, t0 + config.h * first_step)
    q0 = np.concatenate([y0, w0])
    if network is not None and rec_state is None:
        rec_state = network.initial_state(None)
    t = t0 + config.h * (first_step + np.arange(config.n_steps + 1))
    states = [q0]
    basset = []
    q = q0
    for k in range(config.n_steps):
        tk = float(t[k])
        try:
            _, _, b = ude_rhs(q, tk, field, params, network, rec_state, u0)
            basset.append(np.zeros(3) if b is None else b)
            frozen = rec_state

            def rhs(tt, qq):
                dq, new_state, _ = ude_rhs(qq, tt, field, params, network, frozen, u0)
                return dq, new_state

            q, rec_state = midpoint_step(q, tk, config.h, rhs, config.mode, config.picard_iters)
        except DomainExitError as exc:
            qs = np.array(states)
            partial = Trajectory(t[: k + 1], qs[:, :3], qs[:, 3:], basset=None)
            raise TruncatedTrajectoryError(k, partial, exc) from exc
        states.append(q)
    try:
        _, _, b = ude_rhs(q, float(t[-1]), field, params, network, rec_state, u0)
    except DomainExitError as exc:
        qs = np.array(states)
        raise TruncatedTrajectoryError(config.n_steps, Trajectory(t, qs[:, :3], qs[:, 3:]), exc) from exc
    basset.append(np.zeros(3) if b is None else b)
    qs = np.array(states)
    return Trajectory(t, qs[:, :3], qs[:, 3:], basset=np.array(basset))


def solve_woh(y0, w0, field, params: ParticleParams, config: IntegratorConfig, **kwargs) -> Trajectory:
    """The model without history term."""
    return solve_ude(y0, w0, None, field, params, config, **kwargs)
