"""Acceptance suite.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion with the measured quantities.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid
from scipy.special import beta

from marge_ude.core import ParticleParams, Trajectory, read_trajectory, write_trajectory
from marge_ude.evaluation import TrajectoryPair, clustering_experiment, relative_distance
from marge_ude.flowfields import (
    GriddedField,
    StillFluid,
    VortexField,
    grid_ingest,
    grid_sparsen,
    material_derivative,
    write_bundle,
)
from marge_ude.nn import ArchDescriptor, init_params, param_count, read_params, write_params, zero_params
from marge_ude.solver import SolveConfig, basset_rate, build_quadrature, solve_marge
from marge_ude.training import (
    UNIT_BOX,
    BatchObjective,
    DataConfig,
    TrainRun,
    build_dataset,
    train,
    write_loss_history,
)
from marge_ude.ude import IntegratorConfig, midpoint_step, solve_ude, solve_woh

VORTEX = VortexField()
HEAVY = ParticleParams(R=0.968, S=1.0, G=np.array([0.0, 0.0, 1.0]))


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# -- 1: parameter counts ------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_parameter_counts(record_property):
    fnn = param_count(ArchDescriptor("fnn"))
    lstm = param_count(ArchDescriptor("lstm"))
    detail(record_property, f"FNN {fnn}, LSTM {lstm}")
    assert fnn == 13955
    assert lstm == 13395


# -- 2: quadrature ------------------------------------------------------------


@pytest.mark.criterion(2)
def test_c2_quadrature(record_property):
    tables = {m: build_quadrature(256, m) for m in (1, 2)}
    h = 0.07
    worst = 0.0
    for m, table in tables.items():
        for degree in range(m + 1):
            # a degree-m interpolant needs m intervals, so exactness starts at n = max(degree, 1)
            for n in range(max(degree, 1), 65):
                tau = h * np.arange(n + 1)
                exact = (n * h) ** (degree + 0.5) * beta(degree + 1, 0.5)
                worst = max(worst, abs(table.integrate(tau**degree, h) - exact) / exact)
    w01 = tables[1].mu[1]
    first = max(abs(w01[0] - 4 / 3), abs(w01[1] - 2 / 3))
    sum_rule = max(
        abs(math.sqrt(h) * tables[m].mu[n].sum() - 2 * math.sqrt(n * h)) / (2 * math.sqrt(n * h))
        for m in (1, 2) for n in range(1, 257)
    )
    detail(record_property, f"exactness rel err {worst:.1e}, first weights err {first:.1e}, "
                            f"sum rule rel err {sum_rule:.1e}")
    assert worst <= 1e-11
    assert first <= 1e-14
    assert sum_rule <= 1e-12


# -- 3: convergence -----------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_convergence(record_property):
    y0 = np.array([0.5, 0.3, 0.1])
    finals = [solve_marge(y0, None, SolveConfig(h, int(round(1 / h)), VORTEX, HEAVY)).y[-1]
              for h in (0.02, 0.01, 0.005)]
    p = math.log2(np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2]))
    mids = {}
    for mode in ("implicit", "explicit"):
        errs = []
        for n in (10, 20, 40, 80):
            q = np.array([1.0])
            for k in range(n):
                q, _ = midpoint_step(q, k / n, 1 / n, lambda t, q: (-q, None), mode)
            errs.append(abs(q[0] - math.exp(-1)))
        mids[mode] = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    detail(record_property, f"Daitche order {p:.3f}, midpoint orders "
                            + ", ".join(f"{k} {min(v):.3f}..{max(v):.3f}" for k, v in mids.items()))
    assert 1.7 <= p <= 2.3
    for orders in mids.values():
        assert all(abs(o - 2.0) <= 0.1 for o in orders)


# -- 4: fixed points ----------------------------------------------------------


@pytest.mark.criterion(4)
def test_c4_fixed_points(record_property):
    tracer = ParticleParams(R=1.0, S=1.0, G=np.array([0.0, 0.0, 1.0]))
    y0 = np.array([0.5, 0.3, 0.1])
    arch = ArchDescriptor("fnn")
    integ = IntegratorConfig(0.1, 50)
    tracer_runs = [solve_marge(y0, None, SolveConfig(0.1, 50, VORTEX, tracer)),
                   solve_ude(y0, None, zero_params(arch), VORTEX, tracer, integ),
                   solve_woh(y0, None, VORTEX, tracer, integ)]
    still = ParticleParams(R=0.6, S=1.0, G=np.zeros(3))
    still_runs = [solve_marge(y0, None, SolveConfig(0.1, 50, StillFluid(), still)),
                  solve_ude(y0, None, zero_params(arch), StillFluid(), still, integ),
                  solve_ude(y0, None, zero_params(ArchDescriptor("lstm")), StillFluid(), still, integ),
                  solve_woh(y0, None, StillFluid(), still, integ)]
    tracer_ok = all(np.all(tr.w == 0.0) for tr in tracer_runs)
    still_ok = all(np.all(tr.y == y0) and np.all(tr.w == 0.0) for tr in still_runs)
    detail(record_property, f"tracer w == 0: {tracer_ok}, still fluid stationary: {still_ok}")
    assert tracer_ok and still_ok


# -- 5: gradient fidelity -----------------------------------------------------


def _grad_error(arch, seed):
    rng = np.random.default_rng(seed)
    y0 = rng.uniform(-1, 1, (2, 3))
    refs = [solve_marge(y, None, SolveConfig(0.1, 5, VORTEX, HEAVY)) for y in y0]
    obj = BatchObjective(refs, VORTEX, HEAVY, IntegratorConfig(0.1, 5), arch)
    theta = init_params(arch, seed).theta
    _, grad = obj.value_and_grad(theta)
    # the finite-difference oracle runs in extended precision
    obj.q0 = obj.q0.astype(np.longdouble)
    obj.refs = obj.refs.astype(np.longdouble)
    base = theta.astype(np.longdouble)
    eps = np.longdouble(1e-6)
    fd = np.empty(len(theta), dtype=np.longdouble)
    for i in range(len(theta)):
        a, b = base.copy(), base.copy()
        a[i] += eps
        b[i] -= eps
        fd[i] = (obj._loss_expr(a) - obj._loss_expr(b)) / (2 * eps)
    fd = fd.astype(np.float64)
    mask = np.abs(grad) > 1e-8
    return float(np.max(np.abs(grad - fd)[mask] / np.abs(grad[mask])))


@pytest.mark.criterion(5)
@pytest.mark.parametrize("arch", [ArchDescriptor("fnn", fnn_hidden=(4, 4)), ArchDescriptor("lstm", lstm_hidden=2)],
                         ids=["fnn", "lstm"])
def test_c5_gradient_fidelity(arch, record_property):
    start = time.perf_counter()
    worst = max(_grad_error(arch, seed) for seed in range(20))
    detail(record_property, f"{arch.kind} ({param_count(arch)} params) max rel err {worst:.1e} over 20 seeds "
                            f"in {time.perf_counter() - start:.0f} s")
    assert worst <= 1e-5


# -- 6, 7, 9: training ---------------------------------------------------------

TRAIN_SEED = 0


def criterion6_run(out_dir):
    dataset = build_dataset(VORTEX, HEAVY, DataConfig(val_count=0, test_count=5), counts=(5,), seed=TRAIN_SEED)
    arch = ArchDescriptor("fnn")
    run = TrainRun(arch, adam_epochs=300, lbfgs_iters=50, adam_lr=0.01, seed=TRAIN_SEED)
    start = time.perf_counter()
    result = train(run, init_params(arch, TRAIN_SEED), dataset, VORTEX, HEAVY, IntegratorConfig(0.1, 100))
    elapsed = time.perf_counter() - start
    out_dir.mkdir(parents=True, exist_ok=True)
    write_params(out_dir / "params.bin", result.params)
    write_loss_history(out_dir / "loss_history.txt", result.history)
    return dataset, result, elapsed, out_dir


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    return criterion6_run(tmp_path_factory.mktemp("c6") / "run")


def mean_avg_distance(refs, candidate):
    return float(np.mean([relative_distance(TrajectoryPair(ref, candidate(ref)))[2] for ref in refs]))


@pytest.mark.criterion(6)
@pytest.mark.slow
def test_c6_training_efficacy(trained, record_property):
    dataset, result, elapsed, _ = trained
    ratio = result.final_loss / result.initial_loss
    n_train = DataConfig().n_train_steps
    held_out = [ref for _, ref in dataset.test]
    assert len(held_out) == 5

    def distances(n):
        refs = [ref.truncated(n + 1) for ref in held_out]
        integ = IntegratorConfig(0.1, n)
        ude = mean_avg_distance(refs, lambda r: solve_ude(r.y[0], None, result.params, VORTEX, HEAVY, integ))
        woh = mean_avg_distance(refs, lambda r: solve_woh(r.y[0], None, VORTEX, HEAVY, integ))
        return ude, woh

    ude, woh = distances(n_train)
    ude_long, woh_long = distances(DataConfig().n_test_steps)
    detail(record_property, f"loss {result.initial_loss:.3e} -> {result.final_loss:.3e} (ratio {ratio:.2e}); "
                            f"held-out d_avg over [0,10] UDE {ude:.3e} WOH {woh:.3e} (ratio {ude / woh:.3f}); "
                            f"info over [0,60] ratio {ude_long / woh_long:.3f}; trained in {elapsed:.0f} s")
    assert ratio <= 1e-2
    assert ude <= 0.5 * woh


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_c7_sinking_and_clustering(trained, record_property):
    _, result, _, _ = trained
    n = DataConfig().n_test_steps
    woh = clustering_experiment(None, VORTEX, HEAVY, 0.1, n, UNIT_BOX, grid_n=3)
    fnn = clustering_experiment(result.params, VORTEX, HEAVY, 0.1, n, UNIT_BOX, grid_n=3)
    sinks = woh.candidate_final[:, 2] <= woh.reference_final[:, 2]
    d_woh = woh.report.aggregate("d_final").avg
    d_fnn = fnn.report.aggregate("d_final").avg
    detail(record_property, f"WOH sinks at least as far in {int(sinks.sum())}/{len(sinks)} pairs; "
                            f"over [0,60] average final distance FNN {d_fnn:.3e} vs WOH {d_woh:.3e}")
    assert len(woh.report.pairs) == 27 and len(fnn.report.pairs) == 27
    assert np.all(sinks)
    assert d_fnn < d_woh


@pytest.mark.criterion(9)
@pytest.mark.slow
def test_c9_determinism(trained, tmp_path, record_property):
    _, first, _, first_dir = trained
    _, second, _, second_dir = criterion6_run(tmp_path / "again")
    # compared as bytes: the validation column is NaN when no validation set is used
    same_hist = (np.array(first.history).tobytes() == np.array(second.history).tobytes()
                 and (first_dir / "loss_history.txt").read_bytes() == (second_dir / "loss_history.txt").read_bytes())
    same_params = (first_dir / "params.bin").read_bytes() == (second_dir / "params.bin").read_bytes()
    detail(record_property, f"loss histories identical: {same_hist}, parameter files identical: {same_params}")
    assert same_hist and same_params


# -- 8: integrated Basset consistency ------------------------------------------------


@pytest.mark.criterion(8)
def test_c8_integrated_basset(record_property):
    y0 = np.array([0.5, 0.3, 0.1])
    # gravity balancing the initial fluid acceleration gives a start with dw/dt = 0
    params = ParticleParams(R=0.968, S=1.0, G=-material_derivative(VORTEX.sample(y0, 0.0)))
    errs = []
    for h in (0.1, 0.05, 0.025):
        traj = solve_marge(y0, None, SolveConfig(h, int(round(10 / h)), VORTEX, params))
        rec = cumulative_trapezoid(basset_rate(traj), traj.t, axis=0, initial=0.0)
        errs.append(float(np.abs(rec - traj.H).max()))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    detail(record_property, "max errors " + ", ".join(f"{e:.2e}" for e in errs)
           + "; ratios " + ", ".join(f"{r:.2f}" for r in ratios))
    assert all(r >= 3.5 for r in ratios)


# -- 10: formats ---------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_c10_round_trips(tmp_path, record_property):
    rng = np.random.default_rng(10)
    axes = (np.linspace(-1, 1, 7), np.linspace(-1.5, 1.5, 11), np.linspace(0, 2, 9))
    grid = GriddedField(axes, [0.0, 0.25, 0.75], rng.normal(size=(3, 3, 9, 11, 7)))
    write_bundle(tmp_path / "flow.yaml", grid)
    back = grid_ingest(tmp_path / "flow.yaml")
    bundle_ok = (back.data.tobytes() == grid.data.tobytes() and back.t_grid.tobytes() == grid.t_grid.tobytes()
                 and all(a.tobytes() == b.tobytes() for a, b in zip((grid.x, grid.y, grid.z),
                                                                     (back.x, back.y, back.z))))

    params = init_params(ArchDescriptor("lstm"), 3)
    write_params(tmp_path / "p.bin", params)
    reread = read_params(tmp_path / "p.bin")
    params_ok = reread.arch == params.arch and reread.theta.tobytes() == params.theta.tobytes()

    traj = solve_marge(np.array([0.5, 0.3, 0.1]), None, SolveConfig(0.1, 30, VORTEX, HEAVY))
    traj = Trajectory(traj.t, traj.y, traj.w, traj.H, rng.normal(size=traj.y.shape))
    write_trajectory(tmp_path / "t.csv", traj)
    t_back = read_trajectory(tmp_path / "t.csv")
    traj_ok = all(getattr(traj, k).tobytes() == getattr(t_back, k).tobytes() for k in ("t", "y", "w", "H", "basset"))

    snaps = rng.normal(size=(1001, 3, 2, 2, 2))
    sparse, times = grid_sparsen(snaps, np.arange(1001.0))
    detail(record_property, f"bundle {bundle_ok}, params {params_ok}, trajectory {traj_ok}, "
                            f"sparsen 1001 -> {len(sparse)} snapshots")
    assert bundle_ok and params_ok and traj_ok
    assert sparse.shape[0] == 201 and times.shape == (201,)
