"""Flat-parameter feedforward and LSTM networks.

All trainable values live in one flat vector ``theta``. The layout is fixed:

* FNN: for each layer, the weight matrix ``(out, in)`` row-major, then its bias.
* LSTM: ``W_ih (4H, D)``, ``b_ih (4H)``, ``W_hh (4H, H)``, ``b_hh (4H)``,
  then the dense head ``W_out (O, H)``, ``b_out (O)``. Gate blocks are
  ordered input, forget, cell candidate, output.

Forward functions work on numpy arrays and on :class:`~marge_ude.autodiff.Var`
alike; inputs carry an optional leading batch axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .core import atomic_write_bytes

LAYOUT_VERSION = 1
_MAGIC = b"MARGE-UDE-PARAMS\n"


@dataclass(frozen=True)
class ArchDescriptor:
    kind: str = "fnn"
    input_dim: int = 19
    output_dim: int = 3
    fnn_hidden: tuple = (64, 64, 64, 64)
    lstm_hidden: int = 48

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("fnn", "lstm"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "fnn_hidden", tuple(int(n) for n in self.fnn_hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be positive")

    @property
    def recurrent(self) -> bool:
        return self.kind == "lstm"

    def blocks(self) -> list[tuple[str, tuple]]:
        """Names and shapes of the parameter blocks in layout order."""
        if self.kind == "fnn":
            sizes = [self.input_dim, *self.fnn_hidden, self.output_dim]
            out = []
            for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                out += [(f"W{k}", (b, a)), (f"b{k}", (b,))]
            return out
        H, D = self.lstm_hidden, self.input_dim
        return [
            ("W_ih", (4 * H, D)),
            ("b_ih", (4 * H,)),
            ("W_hh", (4 * H, H)),
            ("b_hh", (4 * H,)),
            ("W_out", (self.output_dim, H)),
            ("b_out", (self.output_dim,)),
        ]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "fnn_hidden": list(self.fnn_hidden),
            "lstm_hidden": self.lstm_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(
            kind=d["kind"],
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            fnn_hidden=tuple(d.get("fnn_hidden", (64, 64, 64, 64))),
            lstm_hidden=int(d.get("lstm_hidden", 48)),
        )


FNN_DEFAULT = ArchDescriptor("fnn")
LSTM_DEFAULT = ArchDescriptor("lstm")


def param_count(arch: ArchDescriptor) -> int:
    return int(sum(np.prod(shape) for _, shape in arch.blocks()))


@dataclass(frozen=True)
class NetworkParams:
    arch: ArchDescriptor
    theta: Any  # flat float64 array, or a Var while recording

    def __post_init__(self):
        n = param_count(self.arch)
        shape = ad.value_of(self.theta).shape
        if shape != (n,):
            raise ValueError(f"theta has shape {shape}, expected ({n},)")
        if not np.all(np.isfinite(ad.value_of(self.theta))):
            raise ValueError("parameters must be finite")

    def with_theta(self, theta) -> "NetworkParams":
        return NetworkParams(self.arch, theta)

    def unpack(self) -> dict:
        return unpack(self.arch, self.theta)


def unpack(arch: ArchDescriptor, theta) -> dict:
    """Split the flat vector into named blocks (views, or recorded slices)."""
    out = {}
    pos = 0
    for name, shape in arch.blocks():
        n = int(np.prod(shape))
        out[name] = ad.reshape(theta[pos : pos + n], shape)
        pos += n
    return out


def init_params(arch: ArchDescriptor, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.blocks():
        if len(shape) == 1:
            parts.append(np.zeros(shape))
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
    return NetworkParams(arch, np.concatenate(parts))


def zero_params(arch: ArchDescriptor) -> NetworkParams:
    return NetworkParams(arch, np.zeros(param_count(arch)))


def output_head_slice(arch: ArchDescriptor) -> slice:
    """Position of the last dense layer (weights and bias) inside ``theta``."""
    n = param_count(arch)
    hidden = arch.fnn_hidden[-1] if arch.kind == "fnn" else arch.lstm_hidden
    return slice(n - arch.output_dim * (hidden + 1), n)


def zero_output_head(params: NetworkParams) -> NetworkParams:
    """Copy of ``params`` whose output layer is zero, so the network outputs zero."""
    theta = np.array(ad.value_of(params.theta), dtype=np.float64)
    theta[output_head_slice(params.arch)] = 0.0
    return NetworkParams(params.arch, theta)


def fnn_apply(weights: dict, arch: ArchDescriptor, x):
    n_layers = len(arch.fnn_hidden) + 1
    h = x
    for k in range(n_layers):
        h = ad.affine(h, weights[f"W{k}"], weights[f"b{k}"])
        if k < n_layers - 1:
            h = ad.tanh(h)
    return h


def _check_input(arch: ArchDescriptor, x):
    if ad.value_of(x).shape[-1] != arch.input_dim:
        raise ValueError(f"expected input of size {arch.input_dim}, got {ad.value_of(x).shape[-1]}")


def fnn_forward(params: NetworkParams, x):
    """Four tanh layers (by default) followed by a linear output layer."""
    if params.arch.kind != "fnn":
        raise ValueError("fnn_forward needs an FNN architecture")
    _check_input(params.arch, x)
    return fnn_apply(params.unpack(), params.arch, x)


@dataclass(frozen=True)
class RecurrentState:
    hidden: Any
    cell: Any

    @classmethod
    def zeros(cls, arch: ArchDescriptor, batch: Optional[int] = None) -> "RecurrentState":
        shape = (arch.lstm_hidden,) if batch is None else (batch, arch.lstm_hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def lstm_apply(weights: dict, arch: ArchDescriptor, x, state: RecurrentState):
    H = arch.lstm_hidden
    z = ad.affine(x, weights["W_ih"], weights["b_ih"]) + ad.affine(state.hidden, weights["W_hh"], weights["b_hh"])
    i = ad.sigmoid(z[..., 0:H])
    f = ad.sigmoid(z[..., H : 2 * H])
    g = ad.tanh(z[..., 2 * H : 3 * H])
    o = ad.sigmoid(z[..., 3 * H : 4 * H])
    c_new = f * state.cell + i * g
    h_new = o * ad.tanh(c_new)
    out = ad.affine(h_new, weights["W_out"], weights["b_out"])
    return out, RecurrentState(h_new, c_new)


def lstm_forward(params: NetworkParams, x, state: RecurrentState):
    """One LSTM cell update plus the linear head; returns ``(output, new_state)``."""
    if params.arch.kind != "lstm":
        raise ValueError("lstm_forward needs an LSTM architecture")
    _check_input(params.arch, x)
    return lstm_apply(params.unpack(), params.arch, x, state)


# -- parameter files --------------------------------------------------------


def write_params(path, params: NetworkParams) -> None:
    """Parameter file: magic line, JSON header line, little-endian f64 payload."""
    theta = np.asarray(ad.value_of(params.theta), dtype=np.float64)
    header = dict(params.arch.to_dict(), layout_version=LAYOUT_VERSION, count=int(theta.size))
    blob = _MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + theta.astype("<f8").tobytes()
    atomic_write_bytes(path, blob)


def read_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a parameter file")
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"{path}: unsupported layout version {header.get('layout_version')}")
    arch = ArchDescriptor.from_dict(header)
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if theta.size != header["count"] or theta.size != param_count(arch):
        raise ValueError(f"{path}: payload holds {theta.size} values, header says {header['count']}")
    return NetworkParams(arch, theta)
