"""Experiment configuration read from YAML.

Sections: ``field``, ``particle``, ``solver``, ``train``, ``eval``. Every
problem found while validating is reported with its key path, all at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .core import ParticleParams
from .flowfields import StillFluid, VortexField, grid_ingest, sparsen_field
from .nn import ArchDescriptor
from .training import UNIT_BOX, DataConfig
from .ude import IntegratorConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


_KNOWN = {
    "field": {"type", "params", "bundle", "sparsen"},
    "particle": {"R", "S", "G", "t0"},
    "solver": {"h", "t_train", "t_test", "order", "integrator", "picard_iters"},
    "train": {"counts", "n_train", "val_count", "test_count", "adam_epochs", "adam_lr", "lbfgs_iters", "seed",
              "box", "zero_head", "fnn_hidden", "lstm_hidden"},
    "eval": {"grid_n", "normalization"},
}


@dataclass
class ExperimentConfig:
    field_type: str = "vortex"
    field_params: dict = field(default_factory=dict)
    bundle: Optional[Path] = None
    sparsen: bool = False
    R: float = 0.968
    S: float = 1.0
    G: tuple = (0.0, 0.0, 1.0)
    t0: float = 0.0
    h: float = 0.1
    t_train: float = 10.0
    t_test: float = 60.0
    order: int = 2
    integrator: str = "implicit"
    picard_iters: int = 10
    counts: tuple = (1, 5, 10, 25, 50, 100)
    n_train: Optional[int] = None
    val_count: int = 20
    test_count: int = 5
    adam_epochs: int = 300
    adam_lr: float = 0.01
    lbfgs_iters: int = 200
    seed: int = 0
    box: Optional[list] = None
    zero_head: bool = True
    fnn_hidden: tuple = (64, 64, 64, 64)
    lstm_hidden: int = 48
    grid_n: int = 5
    normalization: str = "pointwise"
    raw: dict = field(default_factory=dict)

    # -- derived objects --------------------------------------------------

    def make_field(self):
        if self.field_type == "vortex":
            return VortexField(**self.field_params)
        if self.field_type == "still":
            return StillFluid()
        f = grid_ingest(self.bundle)
        return sparsen_field(f) if self.sparsen else f

    def particle(self) -> ParticleParams:
        return ParticleParams(R=self.R, S=self.S, G=np.asarray(self.G, dtype=np.float64), t0=self.t0)

    def sampling_box(self, field_=None) -> np.ndarray:
        if self.box is not None:
            return np.asarray(self.box, dtype=np.float64)
        if getattr(field_, "bounds", None) is not None:
            return np.asarray(field_.bounds, dtype=np.float64)
        return UNIT_BOX.copy()

    def data_config(self, field_=None) -> DataConfig:
        return DataConfig(self.h, self.t_train, self.t_test, self.order, self.sampling_box(field_),
                          self.val_count, self.test_count)

    def integrator_config(self, horizon: str = "train") -> IntegratorConfig:
        T = self.t_train if horizon == "train" else self.t_test
        return IntegratorConfig(self.h, int(round(T / self.h)), self.integrator, self.picard_iters)

    def arch(self, kind: str) -> ArchDescriptor:
        return ArchDescriptor(kind, fnn_hidden=tuple(self.fnn_hidden), lstm_hidden=self.lstm_hidden)


def _get(section: dict, key: str, path: str, kind, problems: list, default: Any):
    if key not in section:
        return default
    value = section[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        problems.append(f"{path}.{key}: expected {kind.__name__}, got {value!r}")
        return default


def parse_config(data: dict | None, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed YAML mapping; unknown keys and bad values raise :class:`ConfigError`."""
    data = data or {}
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    cfg = ExperimentConfig(raw=data)
    for name in data:
        if name not in _KNOWN:
            problems.append(f"{name}: unknown section")
    sections = {}
    for name, keys in _KNOWN.items():
        sec = data.get(name) or {}
        if not isinstance(sec, dict):
            problems.append(f"{name}: expected a mapping")
            sec = {}
        for key in sec:
            if key not in keys:
                problems.append(f"{name}.{key}: unknown key")
        sections[name] = sec

    f = sections["field"]
    cfg.field_type = str(f.get("type", cfg.field_type))
    if cfg.field_type not in ("vortex", "still", "bundle"):
        problems.append(f"field.type: expected vortex, still or bundle, got {cfg.field_type!r}")
    params = f.get("params") or {}
    if not isinstance(params, dict) or any(k not in ("omega0", "alpha") for k in params):
        problems.append("field.params: expected a mapping with keys omega0, alpha")
    else:
        cfg.field_params = {k: _get(params, k, "field.params", float, problems, None) for k in params}
    if cfg.field_type == "bundle":
        if "bundle" not in f:
            problems.append("field.bundle: required when field.type is bundle")
        else:
            p = Path(str(f["bundle"]))
            cfg.bundle = p if p.is_absolute() or base_dir is None else base_dir / p
    cfg.sparsen = _get(f, "sparsen", "field", bool, problems, cfg.sparsen)

    p = sections["particle"]
    cfg.R = _get(p, "R", "particle", float, problems, cfg.R)
    cfg.S = _get(p, "S", "particle", float, problems, cfg.S)
    cfg.t0 = _get(p, "t0", "particle", float, problems, cfg.t0)
    if "G" in p:
        try:
            G = tuple(float(v) for v in p["G"])
            if len(G) != 3:
                raise ValueError
            cfg.G = G
        except (TypeError, ValueError):
            problems.append(f"particle.G: expected three numbers, got {p['G']!r}")
    if not 0 < cfg.R <= 3:
        problems.append(f"particle.R: must lie in (0, 3], got {cfg.R}")
    if not cfg.S > 0:
        problems.append(f"particle.S: must be positive, got {cfg.S}")

    s = sections["solver"]
    cfg.h = _get(s, "h", "solver", float, problems, cfg.h)
    cfg.t_train = _get(s, "t_train", "solver", float, problems, cfg.t_train)
    cfg.t_test = _get(s, "t_test", "solver", float, problems, cfg.t_test)
    cfg.order = _get(s, "order", "solver", int, problems, cfg.order)
    cfg.integrator = str(s.get("integrator", cfg.integrator))
    cfg.picard_iters = _get(s, "picard_iters", "solver", int, problems, cfg.picard_iters)
    if not cfg.h > 0:
        problems.append(f"solver.h: must be positive, got {cfg.h}")
    for key in ("t_train", "t_test"):
        T = getattr(cfg, key)
        if cfg.h > 0 and (T <= 0 or abs(T / cfg.h - round(T / cfg.h)) > 1e-9 * T / cfg.h):
            problems.append(f"solver.{key}: must be a positive multiple of solver.h, got {T}")
    if cfg.order not in (1, 2):
        problems.append(f"solver.order: must be 1 or 2, got {cfg.order}")
    if cfg.integrator not in ("implicit", "explicit"):
        problems.append(f"solver.integrator: must be implicit or explicit, got {cfg.integrator!r}")

    t = sections["train"]
    if "counts" in t:
        try:
            cfg.counts = tuple(int(c) for c in t["counts"])
            if not cfg.counts or min(cfg.counts) < 1:
                raise ValueError
        except (TypeError, ValueError):
            problems.append(f"train.counts: expected a list of positive integers, got {t['counts']!r}")
    if t.get("n_train") is not None:
        cfg.n_train = _get(t, "n_train", "train", int, problems, None)
    for key in ("val_count", "test_count", "adam_epochs", "lbfgs_iters", "seed", "lstm_hidden"):
        setattr(cfg, key, _get(t, key, "train", int, problems, getattr(cfg, key)))
        if getattr(cfg, key) < 0:
            problems.append(f"train.{key}: must be non-negative")
    cfg.adam_lr = _get(t, "adam_lr", "train", float, problems, cfg.adam_lr)
    cfg.zero_head = _get(t, "zero_head", "train", bool, problems, cfg.zero_head)
    if "fnn_hidden" in t:
        try:
            cfg.fnn_hidden = tuple(int(n) for n in t["fnn_hidden"])
        except (TypeError, ValueError):
            problems.append(f"train.fnn_hidden: expected a list of integers, got {t['fnn_hidden']!r}")
    if "box" in t:
        try:
            box = np.asarray(t["box"], dtype=np.float64)
            if box.shape != (3, 2) or np.any(box[:, 1] <= box[:, 0]):
                raise ValueError
            cfg.box = box.tolist()
        except (TypeError, ValueError):
            problems.append(f"train.box: expected three [lo, hi] pairs with lo < hi, got {t['box']!r}")

    e = sections["eval"]
    cfg.grid_n = _get(e, "grid_n", "eval", int, problems, cfg.grid_n)
    if cfg.grid_n < 1:
        problems.append(f"eval.grid_n: must be at least 1, got {cfg.grid_n}")
    cfg.normalization = str(e.get("normalization", cfg.normalization))
    if cfg.normalization not in ("pointwise", "max"):
        problems.append(f"eval.normalization: must be pointwise or max, got {cfg.normalization!r}")

    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file {path}>: {exc}"]) from exc
    return parse_config(data, path.parent)
