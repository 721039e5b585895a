"""Ground-truth datasets, the trajectory loss and the two-phase training loop."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .core import DomainError, ParticleParams, Trajectory, TruncatedTrajectoryError, atomic_write_text
from .nn import NetworkParams, zero_output_head
from .optim import AdamState, LbfgsState, OptimizerError, adam_step, lbfgs_step
from .solver import SolveConfig, build_quadrature, solve_marge
from .ude import IntegratorConfig, Network, StepFailureError, integrate

log = logging.getLogger(__name__)

# [-1, 1]^3, the sampling box of the vortex experiments
UNIT_BOX = np.array([[-1.0, 1.0]] * 3)
DEFAULT_COUNTS = (1, 5, 10, 25, 50, 100)


class EmptyDatasetError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


def sample_initial_positions(n: int, box, seed) -> np.ndarray:
    """``n`` points uniform in ``box`` (rows ``[lo, hi]`` per axis).

    Points are drawn one after another from a single stream, so the first
    ``k`` points of a larger draw equal a draw of size ``k``.
    """
    if n < 1:
        raise ValueError(f"need at least one point, got {n}")
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (3, 2) or np.any(box[:, 1] <= box[:, 0]):
        raise DomainError(f"degenerate sampling box {box.tolist()}")
    rng = np.random.default_rng(seed)
    unit = rng.random((n, 3))
    return box[:, 0] + unit * (box[:, 1] - box[:, 0])


@dataclass
class DataConfig:
    h: float = 0.1
    t_train: float = 10.0
    t_test: float = 60.0
    order: int = 2
    box: np.ndarray = field(default_factory=lambda: UNIT_BOX.copy())
    val_count: int = 20
    test_count: int = 5

    @property
    def n_train_steps(self) -> int:
        return int(round(self.t_train / self.h))

    @property
    def n_test_steps(self) -> int:
        return int(round(self.t_test / self.h))


@dataclass
class Dataset:
    """Training, validation and test trajectories.

    ``train`` holds the trajectories of the largest requested count;
    ``subset(k)`` returns the survivors among the first ``k`` draws, so
    subsets are nested.
    """

    train: list  # (draw index, Trajectory)
    val: list
    test: list
    seed: int
    box: np.ndarray
    counts: tuple
    discarded: dict = field(default_factory=dict)

    def subset(self, k: int) -> list[Trajectory]:
        return [traj for idx, traj in self.train if idx < k]

    def digest(self) -> str:
        h = hashlib.sha256()
        for group in (self.train, self.val, self.test):
            for idx, traj in group:
                h.update(np.int64(idx).tobytes())
                h.update(traj.q.tobytes())
        return h.hexdigest()


def _solve_all(positions, cfg: SolveConfig, table) -> tuple[list, list]:
    kept, dropped = [], []
    for i, y0 in enumerate(positions):
        try:
            kept.append((i, solve_marge(y0, None, cfg, table)))
        except TruncatedTrajectoryError:
            dropped.append(i)
    return kept, dropped


def build_dataset(field_, params: ParticleParams, config: DataConfig, counts: Sequence[int] = DEFAULT_COUNTS,
                  seed: int = 0) -> Dataset:
    """Sample initial positions and solve the full equation from each.

    Train, validation and test positions come from independent child seeds.
    Trajectories leaving the field's domain are dropped, not replaced.
    """
    counts = tuple(sorted(int(c) for c in counts))
    if not counts or counts[0] < 1:
        raise ValueError("counts must be positive")
    ss = np.random.SeedSequence(seed)
    s_train, s_val, s_test = ss.spawn(3)
    train_pos = sample_initial_positions(counts[-1], config.box, s_train)
    val_pos = sample_initial_positions(config.val_count, config.box, s_val) if config.val_count else np.zeros((0, 3))
    test_pos = sample_initial_positions(config.test_count, config.box, s_test) if config.test_count else np.zeros((0, 3))
    allpos = np.concatenate([train_pos, val_pos, test_pos])
    if len(np.unique(allpos, axis=0)) != len(allpos):
        raise DomainError("sampled initial positions are not pairwise distinct")
    n_train = config.n_train_steps
    n_test = config.n_test_steps
    table = build_quadrature(max(n_train, n_test), config.order)
    train_cfg = SolveConfig(config.h, n_train, field_, params, config.order)
    test_cfg = SolveConfig(config.h, n_test, field_, params, config.order)
    train, d_train = _solve_all(train_pos, train_cfg, table)
    val, d_val = _solve_all(val_pos, train_cfg, table)
    test, d_test = _solve_all(test_pos, test_cfg, table)
    if not train:
        raise EmptyDatasetError("every training trajectory left the domain")
    discarded = {"train": d_train, "val": d_val, "test": d_test}
    if any(discarded.values()):
        log.info("discarded trajectories: %s", discarded)
    return Dataset(train, val, test, seed, np.asarray(config.box), counts, discarded)


def loss(Q, Q_hat) -> float:
    """Mean over time steps of the squared distance between states ``(y, w)``."""
    Q = np.asarray(Q.q if isinstance(Q, Trajectory) else Q, dtype=np.float64)
    Q_hat = np.asarray(Q_hat.q if isinstance(Q_hat, Trajectory) else Q_hat, dtype=np.float64)
    if Q.shape != Q_hat.shape:
        raise ValueError(f"trajectory shapes differ: {Q.shape} vs {Q_hat.shape}")
    d = Q - Q_hat
    return float(np.sum(d * d) / Q.shape[0])


class BatchObjective:
    """Full-batch loss over a set of reference trajectories.

    All trajectories are integrated together as one batch; the loss is the
    mean of the per-trajectory losses.
    """

    def __init__(self, trajectories: Sequence[Trajectory], field_, params: ParticleParams,
                 integ: IntegratorConfig, arch):
        if not trajectories:
            raise ValueError("objective needs at least one trajectory")
        n = len(trajectories[0])
        if any(len(t) != n for t in trajectories):
            raise ValueError("reference trajectories must share a time grid")
        if integ.n_steps != n - 1:
            raise ValueError(f"integrator runs {integ.n_steps} steps but references have {n - 1}")
        self.refs = np.stack([t.q for t in trajectories], axis=1)  # (n, B, 6)
        self.q0 = self.refs[0].copy()
        self.t0 = float(trajectories[0].t[0])
        self.field = field_
        self.params = params
        self.integ = integ
        self.arch = arch
        self.n_points = n
        self.batch = len(trajectories)

    def _loss_expr(self, theta):
        net = Network(NetworkParams(self.arch, theta))
        states, _ = integrate(self.q0, self.field, self.params, self.integ, net, t0=self.t0)
        total = 0.0
        for q, ref in zip(states[1:], self.refs[1:]):
            total = total + ad.sum_(ad.square(q - ref))
        # q_0 equals the reference exactly and adds nothing
        return total * (1.0 / (self.n_points * self.batch))

    # A blown-up or escaping integration counts as an infinite loss, which the
    # line search treats as a rejected trial step.
    def value(self, theta: np.ndarray) -> float:
        try:
            return float(self._loss_expr(np.asarray(theta)))
        except (StepFailureError, TruncatedTrajectoryError):
            return float("inf")

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        tape = ad.Tape()
        th = tape.var(theta)
        try:
            out = self._loss_expr(th)
        except (StepFailureError, TruncatedTrajectoryError):
            return float("inf"), np.full(np.shape(theta), np.nan)
        return float(out.value), tape.gradient(out, th)


@dataclass
class TrainRun:
    arch: object
    adam_epochs: int = 300
    lbfgs_iters: int = 200
    adam_lr: float = 0.01
    seed: int = 0
    n_train: Optional[int] = None  # training-subset size, None for all
    zero_head: bool = True  # start from a zero output layer, i.e. from the model without history


@dataclass
class TrainResult:
    theta: np.ndarray
    best_theta: np.ndarray
    best_val: float
    history: list  # (epoch, train_loss, val_loss)
    final_loss: float
    final_val: float
    initial_loss: float
    lbfgs_stalled: bool = False
    arch: object = None

    @property
    def params(self) -> NetworkParams:
        return NetworkParams(self.arch, self.theta)


def train(run: TrainRun, net: NetworkParams, dataset: Dataset, field_, params: ParticleParams,
          integ: IntegratorConfig) -> TrainResult:
    """Adam for ``run.adam_epochs`` full-batch epochs, then L-BFGS.

    With ``run.zero_head`` the output layer of ``net`` is zeroed first, so
    training starts from the model without history. Each epoch records the
    training loss at the current parameters and the validation loss at the
    same parameters (forward-only, never differentiated). Returns the final
    and the best-validation parameters.
    """
    train_set = dataset.subset(run.n_train) if run.n_train else [t for _, t in dataset.train]
    if not train_set:
        raise EmptyDatasetError("no training trajectories")
    objective = BatchObjective(train_set, field_, params, integ, net.arch)
    val_set = [t for _, t in dataset.val]
    val_objective = BatchObjective(val_set, field_, params, integ, net.arch) if val_set else None

    def val_loss(theta):
        return val_objective.value(theta) if val_objective else float("nan")

    if run.zero_head:
        net = zero_output_head(net)
    theta = np.array(net.theta, dtype=np.float64)
    history = []
    best_theta, best_val = theta.copy(), np.inf

    def check(epoch, value):
        if not np.isfinite(value):
            raise TrainingError(epoch, f"non-finite loss {value}")

    initial_loss = objective.value(theta)
    check(0, initial_loss)

    adam = AdamState(lr=run.adam_lr)
    for epoch in range(run.adam_epochs):
        value, grad = objective.value_and_grad(theta)
        check(epoch, value)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(epoch, "non-finite gradient")
        v = val_loss(theta)
        history.append((epoch, value, v))
        if v < best_val:
            best_val, best_theta = v, theta.copy()
        theta = adam_step(adam, theta, grad)
        if epoch % 25 == 0:
            log.info("adam epoch %d loss %.4e val %.4e", epoch, value, v)

    lbfgs = LbfgsState()
    epoch = run.adam_epochs
    for _ in range(run.lbfgs_iters):
        try:
            theta_new = lbfgs_step(lbfgs, theta, objective.value_and_grad, None)
        except OptimizerError as exc:
            raise TrainingError(epoch, str(exc)) from exc
        if lbfgs.stalled:
            break
        theta = theta_new
        check(epoch, lbfgs.last_loss)
        v = val_loss(theta)
        history.append((epoch, lbfgs.last_loss, v))
        if v < best_val:
            best_val, best_theta = v, theta.copy()
        epoch += 1

    final_loss = objective.value(theta)
    final_val = val_loss(theta)
    if final_val < best_val:
        best_val, best_theta = final_val, theta.copy()
    return TrainResult(theta, best_theta, best_val, history, final_loss, final_val, initial_loss,
                       lbfgs.stalled, net.arch)


# -- run records ------------------------------------------------------------


def format_loss_history(history) -> str:
    lines = ["# epoch train_loss val_loss"]
    for epoch, tr, va in history:
        lines.append(f"{epoch} {tr!r} {va!r}")
    return "\n".join(lines) + "\n"


def write_loss_history(path, history) -> None:
    atomic_write_text(path, format_loss_history(history))


def read_loss_history(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            epoch, tr, va = line.split()
            out.append((int(epoch), float(tr), float(va)))
    return out


def write_manifest(path, manifest: dict) -> None:
    """Run manifest as YAML (seed, schedule, architecture, dataset digest, ...)."""
    atomic_write_text(path, yaml.safe_dump(manifest, sort_keys=False))
