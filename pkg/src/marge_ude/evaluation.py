"""Accuracy metrics for trajectory pairs and the clustering experiment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .core import ParticleParams, Trajectory, TruncatedTrajectoryError
from .nn import NetworkParams
from .solver import SolveConfig, build_quadrature, solve_marge
from .ude import IntegratorConfig, solve_ude

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


class UndefinedMetricError(ValueError):
    """The reference trajectory makes a relative metric meaningless."""


@dataclass(frozen=True)
class TrajectoryPair:
    reference: Trajectory
    candidate: Trajectory
    label: str = "UDE"

    def __post_init__(self):
        if len(self.reference) == 0:
            raise ValueError("empty trajectory pair")
        if self.reference.t.shape != self.candidate.t.shape or not np.array_equal(self.reference.t, self.candidate.t):
            raise ValueError("reference and candidate time grids differ")


def _pointwise(pair: TrajectoryPair) -> np.ndarray:
    return np.linalg.norm(pair.candidate.y - pair.reference.y, axis=1)


def relative_distance(pair: TrajectoryPair) -> tuple[float, float, float]:
    """``(d_max, d_min, d_avg)``: pointwise position error over ``max_i |y_i|``."""
    scale = np.max(np.linalg.norm(pair.reference.y, axis=1))
    if not scale > 0:
        raise UndefinedMetricError("reference positions are all zero")
    d = _pointwise(pair) / scale
    return float(d.max()), float(d.min()), float(d.mean())


def final_distance(pair: TrajectoryPair) -> float:
    """Distance of the final positions relative to the final reference position."""
    ref = np.linalg.norm(pair.reference.y[-1])
    if not ref > 0:
        raise UndefinedMetricError("final reference position is zero")
    return float(np.linalg.norm(pair.candidate.y[-1] - pair.reference.y[-1]) / ref)


def integrated_basset(candidate: Trajectory) -> np.ndarray:
    """Cumulative trapezoid of the scaled network output, zero at ``t_0``."""
    if candidate.basset is None:
        raise ValueError("trajectory carries no network output series")
    return cumulative_trapezoid(candidate.basset, candidate.t, axis=0, initial=0.0)


@dataclass(frozen=True)
class ErrorSeries:
    t: np.ndarray
    error: np.ndarray
    absolute: np.ndarray  # True where the reference norm was below ZERO_NORM


def error_over_time(pair: TrajectoryPair, normalization: str = "pointwise") -> ErrorSeries:
    """Relative position error at every step.

    ``pointwise`` divides by ``|y_i|``; steps with ``|y_i| < 1e-12`` report
    the absolute error and are flagged. ``max`` divides every step by
    ``max_i |y_i|``.
    """
    num = _pointwise(pair)
    ref = np.linalg.norm(pair.reference.y, axis=1)
    if normalization == "max":
        scale = ref.max()
        if not scale > 0:
            raise UndefinedMetricError("reference positions are all zero")
        return ErrorSeries(pair.reference.t.copy(), num / scale, np.zeros(len(num), dtype=bool))
    if normalization != "pointwise":
        raise ValueError(f"unknown normalization {normalization!r}")
    small = ref < ZERO_NORM
    err = np.where(small, num, num / np.where(small, 1.0, ref))
    return ErrorSeries(pair.reference.t.copy(), err, small)


@dataclass(frozen=True)
class Aggregate:
    avg: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "Aggregate":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.min()), float(v.max()))


@dataclass
class PairMetrics:
    label: str
    d_max: float
    d_min: float
    d_avg: float
    d_final: float


@dataclass
class MetricsReport:
    label: str
    pairs: list
    errors: list = field(default_factory=list)  # ErrorSeries per pair

    def __post_init__(self):
        for m in self.pairs:
            if not m.d_min <= m.d_avg <= m.d_max:
                raise AssertionError(f"inconsistent distances {m}")

    def aggregate(self, name: str) -> Aggregate:
        return Aggregate.of([getattr(m, name) for m in self.pairs])

    @classmethod
    def from_pairs(cls, label: str, pairs) -> "MetricsReport":
        rows, errs = [], []
        for pair in pairs:
            d_max, d_min, d_avg = relative_distance(pair)
            rows.append(PairMetrics(pair.label, d_max, d_min, d_avg, final_distance(pair)))
            errs.append(error_over_time(pair))
        return cls(label, rows, errs)

    def table(self) -> str:
        lines = ["label,d_max,d_min,d_avg,d_final"]
        for m in self.pairs:
            lines.append(f"{m.label},{m.d_max!r},{m.d_min!r},{m.d_avg!r},{m.d_final!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = ["metric,avg,min,max"]
        for name in ("d_max", "d_min", "d_avg", "d_final"):
            a = self.aggregate(name)
            lines.append(f"{name},{a.avg!r},{a.min!r},{a.max!r}")
        return "\n".join(lines) + "\n"


def grid_positions(box, n: int) -> np.ndarray:
    """``n^3`` equally spaced points spanning ``box`` with inclusive endpoints, x fastest."""
    box = np.asarray(box, dtype=np.float64)
    axes = [np.linspace(lo, hi, n) for lo, hi in box]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


@dataclass
class ClusteringResult:
    report: MetricsReport
    initial: np.ndarray  # surviving initial positions
    reference_final: np.ndarray
    candidate_final: np.ndarray
    discarded: list

    def final_positions_table(self) -> str:
        lines = ["x0,y0,z0,ref_x,ref_y,ref_z,cand_x,cand_y,cand_z"]
        for row in np.hstack([self.initial, self.reference_final, self.candidate_final]):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def clustering_experiment(net: Optional[NetworkParams], field_, params: ParticleParams, h: float, n_steps: int,
                          box, grid_n: int = 5, order: int = 2, integrator: IntegratorConfig | None = None,
                          label: Optional[str] = None, candidate=None) -> ClusteringResult:
    """Reference and candidate solves from every node of a ``grid_n^3`` grid.

    The candidate is the UDE with ``net``, or the model without history when
    ``net`` is None. ``candidate(y0)`` overrides both (used for
    self-comparison). Pairs where either solve leaves the domain are dropped.
    """
    integ = integrator or IntegratorConfig(h, n_steps)
    label = label or ("WOH" if net is None else net.arch.kind.upper())
    table = build_quadrature(n_steps, order)
    ref_cfg = SolveConfig(h, n_steps, field_, params, order)
    pairs, kept, discarded = [], [], []
    for i, y0 in enumerate(grid_positions(box, grid_n)):
        try:
            ref = solve_marge(y0, None, ref_cfg, table)
            cand = candidate(y0) if candidate is not None else solve_ude(y0, None, net, field_, params, integ)
            if not field_bounds_ok(field_, cand):
                raise TruncatedTrajectoryError(n_steps, cand, None)
        except TruncatedTrajectoryError:
            discarded.append(i)
            continue
        pairs.append(TrajectoryPair(ref, cand, label))
        kept.append(y0)
    if not pairs:
        raise UndefinedMetricError("every clustering pair left the domain")
    if discarded:
        log.info("clustering discarded %d of %d pairs", len(discarded), grid_n**3)
    report = MetricsReport.from_pairs(label, pairs)
    return ClusteringResult(
        report,
        np.array(kept),
        np.array([p.reference.y[-1] for p in pairs]),
        np.array([p.candidate.y[-1] for p in pairs]),
        discarded,
    )


def field_bounds_ok(field_, traj: Trajectory) -> bool:
    contains = getattr(field_, "contains", None)
    if contains is None:
        return True
    return bool(np.all(contains(traj.y)))
