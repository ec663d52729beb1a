"""Latent Modifier Network: a d -> 100 -> 100 -> d perceptron mixed with its input."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape

HIDDEN = 100
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

_MAGIC = b"D2DLMN\x00\x00"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIId")  # magic, version, d, hidden, activation code, slope
_ACT_CODES = {"leaky_relu": 0, "relu": 1, "tanh": 2}


def param_count(d: int) -> int:
    if d < 1:
        raise ValueError("d must be >= 1")
    return 201 * d + 10200


@dataclass
class LmnParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    activation: str = "leaky_relu"
    slope: float = 0.01

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_NAMES]

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> LmnParams:
        return LmnParams(*(a.copy() for a in self.arrays()), activation=self.activation, slope=self.slope)

    def replace(self, arrays) -> LmnParams:
        return LmnParams(*arrays, activation=self.activation, slope=self.slope)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_params(d: int, rng: np.random.Generator, activation: str = "leaky_relu",
                slope: float = 0.01) -> LmnParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if d < 1:
        raise ValueError("d must be >= 1")

    def layer(fan_out, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)

    W1, b1 = layer(HIDDEN, d)
    W2, b2 = layer(HIDDEN, HIDDEN)
    W3, b3 = layer(d, HIDDEN)
    return LmnParams(W1, b1, W2, b2, W3, b3, activation=activation, slope=slope)


def lmn_forward_on_tape(x: tape.Tensor, leaves, params: LmnParams) -> tape.Tensor:
    """Network output with weights given as tape leaves (ordered as PARAM_NAMES)."""
    W1, b1, W2, b2, W3, b3 = leaves
    if x.shape != (W1.shape[1],):
        raise tape.ShapeError("lmn_forward", x.shape, W1.shape)
    act = params.activation
    h1 = tape.activation(tape.affine(W1, x, b1), act, params.slope)
    h2 = tape.activation(tape.affine(W2, h1, b2), act, params.slope)
    return tape.affine(W3, h2, b3)


def lmn_forward(x, params: LmnParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d,):
        raise ValueError(f"expected a latent of size {params.d}, got shape {x.shape}")
    g = tape.Graph()
    leaves = [g.const(a) for a in params.arrays()]
    return lmn_forward_on_tape(g.const(x), leaves, params).value.copy()


def mix_latent(x, y, w: float):
    """w * x + (1 - w) * y; works on arrays and on tape tensors."""
    if isinstance(y, tape.Tensor):
        xt = x if isinstance(x, tape.Tensor) else y.graph.const(x)
        if xt.shape != y.shape:
            raise tape.ShapeError("mix_latent", xt.shape, y.shape)
        return tape.add(tape.scale(xt, w), tape.scale(y, 1.0 - w))
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"mix_latent: shapes {x.shape} and {y.shape} differ")
    return w * x + (1.0 - w) * y


def save_params(params: LmnParams, path) -> None:
    code = _ACT_CODES[params.activation]
    header = _HEADER.pack(_MAGIC, _FORMAT_VERSION, params.d, HIDDEN, code, params.slope)
    body = params.flat().astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_params(path) -> LmnParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated LMN file")
    magic, version, d, hidden, code, slope = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an LMN parameter file")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if hidden != HIDDEN:
        raise ValueError(f"{path}: hidden width {hidden} != {HIDDEN}")
    flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if flat.size != param_count(d):
        raise ValueError(f"{path}: expected {param_count(d)} values, found {flat.size}")
    shapes = [(HIDDEN, d), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (d, HIDDEN), (d,)]
    arrays, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    activation = {v: k for k, v in _ACT_CODES.items()}[code]
    return LmnParams(*arrays, activation=activation, slope=slope)
