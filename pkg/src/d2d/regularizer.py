"""Gaussian-shell penalties on the norm of the mixed latent.

A d-dimensional standard normal sample concentrates on the sphere of radius
sqrt(d - 1).  ``reg_prime`` is the negative log-likelihood of the norm under
the chi distribution (up to constants); ``reg_pow`` shifts and scales it so
its optimum sits just above zero and raises it to the 10th power, which
flattens the basin and steepens the walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape

EXPONENT = 10


def shell_radius(d: int) -> float:
    if d < 2:
        raise ValueError(f"shell radius needs d >= 2, got {d}")
    return math.sqrt(d - 1)


def reg_prime_of_norm(r: float, d: int) -> float:
    if r <= 0:
        raise ValueError("reg_prime is undefined at zero norm")
    return 0.5 * r * r - (d - 1) * math.log(r)


def reg_prime_min(d: int) -> float:
    """Value of reg_prime on the shell, its global minimum."""
    return reg_prime_of_norm(shell_radius(d), d)


def reg_prime(x, d: int | None = None) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return reg_prime_of_norm(float(np.linalg.norm(x)), d or x.size)


def reg_prime_grad(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = d or x.size
    r2 = float(np.dot(x.ravel(), x.ravel()))
    if r2 == 0:
        raise ValueError("reg_prime is undefined at zero norm")
    return x * (1.0 - (d - 1) / r2)


def _ceil_sig(x: float, digits: int) -> float:
    if x == 0:
        return 0.0
    q = 10.0 ** (math.floor(math.log10(abs(x))) - digits + 1)
    return math.ceil(x / q) * q


def default_shift(d: int, a: float = 0.03) -> float:
    """Shift that puts the optimum of ``a * reg_prime + c`` just above zero.

    Rounded up at four significant digits; at d = 16384, a = 0.03 this is 2139.
    """
    return _ceil_sig(-a * reg_prime_min(d), 4)


@dataclass(frozen=True)
class RegConfig:
    a: float = 0.03
    c: float | None = None  # None: derived from the latent dimension
    exponent: int = EXPONENT

    def shift(self, d: int) -> float:
        return self.c if self.c is not None else default_shift(d, self.a)


def reg_pow(x, cfg: RegConfig = RegConfig(), d: int | None = None) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    d = d or x.size
    return (cfg.a * reg_prime(x, d) + cfg.shift(d)) ** cfg.exponent


def basin_value(x, cfg: RegConfig = RegConfig(), d: int | None = None) -> float:
    """``a * reg_prime + c``; its 10th power is the penalty."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = d or x.size
    return cfg.a * reg_prime(x, d) + cfg.shift(d)


def reg_prime_on_tape(x: tape.Tensor, d: int | None = None) -> tape.Tensor:
    d = d or x.value.size
    sq = tape.squared_norm(x)
    return tape.scale(sq, 0.5) - tape.scale(tape.log(sq), 0.5 * (d - 1))


def reg_pow_on_tape(x: tape.Tensor, cfg: RegConfig = RegConfig(), d: int | None = None) -> tape.Tensor:
    d = d or x.value.size
    inner = tape.scale(reg_prime_on_tape(x, d), cfg.a) + cfg.shift(d)
    return tape.power(inner, cfg.exponent)
