"""Adam and L-BFGS (two-loop recursion with a strong-Wolfe line search)."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Return the updated parameters; moments and step counter are updated in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise OptimizerError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LbfgsState:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 20
    pairs: deque = field(default_factory=deque)
    iterations: int = 0
    stalled: bool = False
    last_loss: Optional[float] = None
    last_grad: Optional[np.ndarray] = None
    rejected_pairs: int = 0


def two_loop_direction(grad: np.ndarray, pairs) -> np.ndarray:
    """Search direction ``-H grad`` from stored curvature pairs."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic interpolating two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    return x if np.isfinite(x) else None


def strong_wolfe(phi: Callable[[float], tuple], f0: float, g0: float, alpha0: float = 1.0,
                 c1: float = 1e-4, c2: float = 0.9, max_trials: int = 20, alpha_max: float = 1e10):
    """Bracketing/zoom line search for the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, dphi, payload)``. Returns
    ``(alpha, f, payload)`` on success and ``None`` when no acceptable step
    was found within ``max_trials`` function evaluations.
    """
    if not g0 < 0:
        return None
    trials = 0
    a_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = alpha0
    lo = hi = None
    while trials < max_trials:
        f, g, payload = phi(alpha)
        trials += 1
        if not np.isfinite(f) or f > f0 + c1 * alpha * g0 or (a_prev > 0 and f >= f_prev):
            lo, hi = (a_prev, f_prev, g_prev), (alpha, f, g)
            break
        if abs(g) <= -c2 * g0:
            return alpha, f, payload
        if g >= 0:
            lo, hi = (alpha, f, g), (a_prev, f_prev, g_prev)
            break
        a_prev, f_prev, g_prev = alpha, f, g
        alpha = min(2.0 * alpha, alpha_max)
    else:
        return None
    # zoom between lo (satisfies sufficient decrease, lowest f) and hi
    while trials < max_trials:
        (a_lo, f_lo, g_lo), (a_hi, f_hi, g_hi) = lo, hi
        width = abs(a_hi - a_lo)
        alpha = None
        if np.isfinite(f_hi) and np.isfinite(g_hi):
            alpha = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        lo_edge, hi_edge = min(a_lo, a_hi), max(a_lo, a_hi)
        if alpha is None or not (lo_edge + 0.1 * width <= alpha <= hi_edge - 0.1 * width):
            alpha = 0.5 * (a_lo + a_hi)
        f, g, payload = phi(alpha)
        trials += 1
        if not np.isfinite(f) or f > f0 + c1 * alpha * g0 or f >= f_lo:
            hi = (alpha, f, g)
        else:
            if abs(g) <= -c2 * g0:
                return alpha, f, payload
            if g * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (alpha, f, g)
        if width < 1e-16 * max(1.0, hi_edge):
            break
    return None


def lbfgs_step(state: LbfgsState, theta: np.ndarray, loss_fn: Callable, grad_fn: Callable) -> np.ndarray:
    """One L-BFGS iteration.

    ``loss_fn(theta)`` returns the loss and ``grad_fn(theta)`` its gradient; a
    callable returning both at once can be passed as ``loss_fn`` with
    ``grad_fn=None``. On line-search failure the parameters are returned
    unchanged and ``state.stalled`` is set.
    """
    if grad_fn is None:
        evaluate = loss_fn
    else:
        def evaluate(th):
            return loss_fn(th), grad_fn(th)

    if state.last_grad is None or state.last_loss is None:
        f0, g = evaluate(theta)
    else:
        f0, g = state.last_loss, state.last_grad
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(f0) or not np.all(np.isfinite(g)):
        raise OptimizerError("non-finite loss or gradient")
    state.last_loss, state.last_grad = f0, g
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        state.stalled = False
        return theta
    d = two_loop_direction(g, state.pairs)
    dg = d @ g
    if not dg < 0:
        state.pairs.clear()
        d = -g
        dg = d @ g
    alpha0 = 1.0 if state.pairs else min(1.0, 1.0 / gnorm)

    def phi(alpha):
        th = theta + alpha * d
        f, gr = evaluate(th)
        gr = np.asarray(gr, dtype=np.float64)
        return f, gr @ d, (th, gr)

    found = strong_wolfe(phi, f0, dg, alpha0, state.c1, state.c2, state.max_trials)
    if found is None:
        state.stalled = True
        log.info("L-BFGS line search failed at iteration %d", state.iterations)
        return theta
    alpha, f_new, (theta_new, g_new) = found
    s = theta_new - theta
    y = g_new - g
    sy = s @ y
    if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
        state.pairs.append((s, y, 1.0 / sy))
        while len(state.pairs) > state.memory:
            state.pairs.popleft()
    else:
        state.rejected_pairs += 1
    state.last_loss, state.last_grad = f_new, g_new
    state.iterations += 1
    state.stalled = False
    return theta_new
