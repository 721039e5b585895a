"""Command-line front end.

    marge-ude generate  --config cfg.yaml --out runs/data
    marge-ude train     --config cfg.yaml --out runs/fnn --arch fnn
    marge-ude evaluate  --config cfg.yaml --out runs/fnn --params runs/fnn/params.bin
    marge-ude cluster   --config cfg.yaml --out runs/woh --baseline woh
    marge-ude basset    --config cfg.yaml --out runs/fnn --params runs/fnn/params.bin
    marge-ude errortime --config cfg.yaml --out runs/fnn --params runs/fnn/params.bin
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .core import DomainError, TruncatedTrajectoryError, atomic_write_text, write_trajectory
from .evaluation import (MetricsReport, TrajectoryPair, clustering_experiment, error_over_time,
                         integrated_basset)
from .nn import init_params, read_params, write_params
from .training import TrainingError, TrainRun, build_dataset, train, write_loss_history, write_manifest
from .ude import solve_ude

log = logging.getLogger("marge_ude")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _common_manifest(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.raw,
        "field": {"type": cfg.field_type, "params": cfg.field_params,
                  "bundle": None if cfg.bundle is None else str(cfg.bundle), "sparsen": cfg.sparsen},
        "particle": {"R": cfg.R, "S": cfg.S, "G": list(cfg.G)},
        "solver": {"h": cfg.h, "t_train": cfg.t_train, "t_test": cfg.t_test, "order": cfg.order,
                   "integrator": cfg.integrator, "picard_iters": cfg.picard_iters},
    }


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, tag: str | None = None, **sections) -> None:
    manifest = _common_manifest(cfg, command)
    manifest.update(sections)
    name = f"manifest_{command}" + (f"_{tag}" if tag else "") + ".yaml"
    write_manifest(out / name, manifest)


def _candidate(args, cfg):
    """``(label, NetworkParams or None)`` from ``--baseline`` / ``--params``."""
    if args.baseline == "woh":
        return "WOH", None
    path = Path(args.params) if args.params else Path(args.out) / "params.bin"
    if not path.exists():
        raise FileNotFoundError(f"parameter file {path} not found (pass --params or --baseline woh)")
    params = read_params(path)
    return params.arch.kind.upper(), params


def _params_source(args) -> str | None:
    if args.baseline == "woh":
        return None
    return str(Path(args.params) if args.params else Path(args.out) / "params.bin")


def _test_pairs(args, cfg):
    field_ = cfg.make_field()
    particle = cfg.particle()
    ds = build_dataset(field_, particle, cfg.data_config(field_), counts=(1,), seed=cfg.seed)
    label, net = _candidate(args, cfg)
    integ = cfg.integrator_config("test")
    pairs = []
    for idx, ref in ds.test:
        try:
            cand = solve_ude(ref.y[0], ref.w[0], net, field_, particle, integ)
        except TruncatedTrajectoryError:
            log.info("test trajectory %d: candidate left the domain, discarded", idx)
            continue
        pairs.append((idx, TrajectoryPair(ref, cand, label)))
    if not pairs:
        raise DomainError("no test trajectory survived")
    return label, pairs


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    field_ = cfg.make_field()
    ds = build_dataset(field_, cfg.particle(), cfg.data_config(field_), cfg.counts, cfg.seed)
    for group in ("train", "val", "test"):
        for idx, traj in getattr(ds, group):
            write_trajectory(out / group / f"traj_{idx:04d}.csv", traj)
    written = {g: len(getattr(ds, g)) for g in ("train", "val", "test")}
    _write_manifest(out, cfg, "generate", dataset={
        "counts": list(ds.counts),
        "box": np.asarray(ds.box).tolist(),
        "written": written,
        "discarded": ds.discarded,
        "sha256": ds.digest(),
    })
    print(f"wrote {sum(written.values())} trajectories to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    field_ = cfg.make_field()
    particle = cfg.particle()
    ds = build_dataset(field_, particle, cfg.data_config(field_), cfg.counts, cfg.seed)
    arch = cfg.arch(args.arch)
    run = TrainRun(arch, cfg.adam_epochs, cfg.lbfgs_iters, cfg.adam_lr, cfg.seed,
                   cfg.n_train or max(cfg.counts), cfg.zero_head)
    result = train(run, init_params(arch, cfg.seed), ds, field_, particle, cfg.integrator_config("train"))
    write_params(out / "params.bin", result.params)
    write_params(out / "best_params.bin", result.params.with_theta(result.best_theta))
    write_loss_history(out / "loss_history.txt", result.history)
    _write_manifest(out, cfg, "train", train={
        "arch": arch.to_dict(),
        "n_train": run.n_train,
        "trajectories": len(ds.subset(run.n_train)),
        "adam_epochs": run.adam_epochs,
        "adam_lr": run.adam_lr,
        "lbfgs_iters": run.lbfgs_iters,
        "lbfgs_accepted": len(result.history) - run.adam_epochs,
        "zero_head": run.zero_head,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "final_val_loss": result.final_val,
        "best_val_loss": result.best_val,
        "dataset_sha256": ds.digest(),
    })
    print(f"final training loss {result.final_loss:.6e} (initial {result.initial_loss:.6e})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    label, pairs = _test_pairs(args, cfg)
    report = MetricsReport.from_pairs(label, [p for _, p in pairs])
    tag = label.lower()
    atomic_write_text(out / f"metrics_{tag}.csv", report.table())
    atomic_write_text(out / f"summary_{tag}.csv", report.summary())
    for idx, pair in pairs:
        write_trajectory(out / f"eval_{tag}" / f"traj_{idx:04d}.csv", pair.candidate)
    _write_manifest(out, cfg, "evaluate", tag, evaluate={"label": label, "params": _params_source(args),
                                                        "trajectories": [idx for idx, _ in pairs]})
    sys.stdout.write(report.summary())
    return 0


def cmd_cluster(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    field_ = cfg.make_field()
    label, net = _candidate(args, cfg)
    integ = cfg.integrator_config("test")
    res = clustering_experiment(net, field_, cfg.particle(), cfg.h, integ.n_steps, cfg.sampling_box(field_),
                                cfg.grid_n, cfg.order, integ, label)
    tag = label.lower()
    atomic_write_text(out / f"cluster_{tag}.csv", res.report.table())
    atomic_write_text(out / f"cluster_{tag}_summary.csv", res.report.summary())
    atomic_write_text(out / f"cluster_{tag}_final_positions.csv", res.final_positions_table())
    _write_manifest(out, cfg, "cluster", tag, cluster={"label": label, "params": _params_source(args),
                                                      "grid_n": cfg.grid_n, "discarded": res.discarded})
    sys.stdout.write(res.report.summary())
    return 0


def cmd_basset(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    label, pairs = _test_pairs(args, cfg)
    tag = label.lower()
    for idx, pair in pairs:
        H_nn = integrated_basset(pair.candidate)
        table = np.column_stack([pair.reference.t, pair.reference.H, H_nn])
        lines = ["t,H1,H2,H3,HNN1,HNN2,HNN3"]
        lines += [",".join(f"{v:.17g}" for v in row) for row in table]
        atomic_write_text(out / f"basset_{tag}" / f"traj_{idx:04d}.csv", "\n".join(lines) + "\n")
    _write_manifest(out, cfg, "basset", tag, basset={"label": label, "params": _params_source(args),
                                                    "trajectories": [idx for idx, _ in pairs]})
    print(f"wrote {len(pairs)} Basset series to {out / f'basset_{tag}'}")
    return 0


def cmd_errortime(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    label, pairs = _test_pairs(args, cfg)
    lines = ["trajectory,t,error,absolute"]
    for idx, pair in pairs:
        series = error_over_time(pair, cfg.normalization)
        for t, e, a in zip(series.t, series.error, series.absolute):
            lines.append(f"{idx},{t:.17g},{e:.17g},{int(a)}")
    path = out / f"errortime_{label.lower()}.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    _write_manifest(out, cfg, "errortime", label.lower(), errortime={
        "label": label, "params": _params_source(args), "normalization": cfg.normalization})
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "generate": (cmd_generate, "solve the reference equation and write the dataset"),
    "train": (cmd_train, "train a network and write parameters and loss history"),
    "evaluate": (cmd_evaluate, "distance metrics on the test trajectories"),
    "cluster": (cmd_cluster, "final-position clustering on a regular grid"),
    "basset": (cmd_basset, "integrated Basset force, reference against network"),
    "errortime": (cmd_errortime, "relative position error over time"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marge-ude", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--arch", choices=("fnn", "lstm"), default="fnn")
        if name in ("evaluate", "cluster", "basset", "errortime"):
            p.add_argument("--params", help="parameter file (default: <out>/params.bin)")
            p.add_argument("--baseline", choices=("woh",), help="evaluate the model without history term")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command][0](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
