"""Detector-logit count critic.

Detections are kept when ``sigmoid(z) >= tau``, i.e. ``z >= tau_z`` with
``tau_z = logit(tau)``.  The soft count replaces that step by a steep
sigmoid of slope ``beta``; the D2D loss multiplies each sigmoid by the
signed distance to the threshold so that its gradient does not vanish far
from ``tau_z``.

Everything here works on plain arrays.  The ``*_on_tape`` variants build the
same quantities on a :class:`d2d.tape.Graph` for the optimisation loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import stable_sigmoid

OVER = "over"
UNDER = "under"
SATISFIED = "satisfied"


def logit_threshold(tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return math.log(tau / (1.0 - tau))


@dataclass(frozen=True)
class CriticConfig:
    tau: float = 0.2
    beta: float = 300.0
    tau_z: float = field(init=False)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "tau_z", logit_threshold(self.tau))


def _as_matrix(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError(f"logits must be n x m with m >= 1, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


@dataclass(frozen=True)
class LogitMatrix:
    """Raw detection logits, one row per detection slot, one column per class."""

    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _as_matrix(self.z))

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def m(self) -> int:
        return self.z.shape[1]


def _single(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        if z.shape[1] != 1:
            raise ValueError("single-class operation given a multi-class matrix")
        z = z[:, 0]
    return z


def soft_count(z, cfg: CriticConfig) -> float:
    z = _single(z)
    return float(np.sum(stable_sigmoid(cfg.beta * (z - cfg.tau_z))))


def hard_count(z, cfg: CriticConfig) -> int:
    return int(np.count_nonzero(_single(z) >= cfg.tau_z))


def branch(f: float, target: float) -> str:
    if f > target:
        return OVER
    if f < target:
        return UNDER
    return SATISFIED


def critic_loss(z, target: int, cfg: CriticConfig) -> tuple[float, str]:
    """Single-class D2D loss and the branch it was evaluated on."""
    z = _single(z)
    side = branch(soft_count(z, cfg), target)
    if side == SATISFIED:
        return 0.0, side
    s = 1.0 if side == OVER else -1.0
    u = s * (z - cfg.tau_z)
    return float(np.sum(stable_sigmoid(cfg.beta * u) * u)), side


def critic_grad(z, target: int, cfg: CriticConfig) -> np.ndarray:
    """Closed-form gradient of :func:`critic_loss` with respect to the logits."""
    z = _single(z)
    side = branch(soft_count(z, cfg), target)
    if side == SATISFIED:
        return np.zeros_like(z)
    s = 1.0 if side == OVER else -1.0
    u = s * (z - cfg.tau_z)
    sig = stable_sigmoid(cfg.beta * u)
    return s * (sig + cfg.beta * sig * (1.0 - sig) * u)


def soft_count_grad(z, cfg: CriticConfig) -> np.ndarray:
    sig = stable_sigmoid(cfg.beta * (_single(z) - cfg.tau_z))
    return cfg.beta * sig * (1.0 - sig)


def assignments(z) -> np.ndarray:
    """Class label of each slot; ties go to the lowest class index."""
    return np.argmax(_as_matrix(z), axis=1)


def per_class_counts(z, cfg: CriticConfig) -> list[tuple[float, int]]:
    """(soft, hard) count per class, each slot counted for its argmax class."""
    z = _as_matrix(z)
    labels = assignments(z)
    zmax = z[np.arange(z.shape[0]), labels]
    sig = stable_sigmoid(cfg.beta * (zmax - cfg.tau_z))
    kept = zmax >= cfg.tau_z
    out = []
    for j in range(z.shape[1]):
        mine = labels == j
        out.append((float(np.sum(sig[mine])), int(np.count_nonzero(mine & kept))))
    return out


def support_signs(z, targets, cfg: CriticConfig) -> np.ndarray:
    """+1 where an entry is pushed down, -1 where it is pushed up.

    An entry is pushed up iff it is its slot's max logit and that class is
    not over-generated (soft count <= requested).
    """
    z = _as_matrix(z)
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape != (z.shape[1],):
        raise ValueError(f"need one target per class ({z.shape[1]}), got {targets.shape}")
    if np.any(targets < 0):
        raise ValueError("targets must be non-negative")
    soft = np.array([s for s, _ in per_class_counts(z, cfg)])
    not_over = soft <= targets
    labels = assignments(z)
    signs = np.ones_like(z)
    rows = np.arange(z.shape[0])
    up = not_over[labels]
    signs[rows[up], labels[up]] = -1.0
    return signs


def multi_critic_loss(z, targets, cfg: CriticConfig) -> float:
    z = _as_matrix(z)
    u = support_signs(z, targets, cfg) * (z - cfg.tau_z)
    return float(np.sum(stable_sigmoid(cfg.beta * u) * u))


def multi_critic_grad(z, targets, cfg: CriticConfig) -> np.ndarray:
    z = _as_matrix(z)
    s = support_signs(z, targets, cfg)
    u = s * (z - cfg.tau_z)
    sig = stable_sigmoid(cfg.beta * u)
    return s * (sig + cfg.beta * sig * (1.0 - sig) * u)


# --- tape versions -------------------------------------------------------
#
# Logits on the tape are flat, row-major over (slot, class).

def signed_loss_on_tape(z: tape.Tensor, signs: np.ndarray, cfg: CriticConfig) -> tape.Tensor:
    """sum(sigmoid(beta * u) * u) with u = signs * (z - tau_z)."""
    g = z.graph
    shifted = z - np.full(z.shape, cfg.tau_z)
    u = tape.mul(shifted, g.const(np.asarray(signs, dtype=np.float64).ravel()))
    return tape.sum_(tape.mul(tape.sigmoid(tape.scale(u, cfg.beta)), u))


def d2d_loss_on_tape(z: tape.Tensor, targets, cfg: CriticConfig, n_classes: int) -> tuple[tape.Tensor, str]:
    """D2D loss for a flat logit tensor; single-class prompts use the two-branch form."""
    zm = z.value.reshape(-1, n_classes)
    targets = np.atleast_1d(targets)
    if n_classes == 1:
        side = branch(soft_count(zm, cfg), int(targets[0]))
        if side == SATISFIED:
            return tape.scale(tape.sum_(z), 0.0), side
        signs = np.full(zm.shape, 1.0 if side == OVER else -1.0)
        return signed_loss_on_tape(z, signs, cfg), side
    return signed_loss_on_tape(z, support_signs(zm, targets, cfg), cfg), "multi"


def count_gap_on_tape(z: tape.Tensor, targets, cfg: CriticConfig, n_classes: int) -> tuple[tape.Tensor, str]:
    """sum_j |f_j - N_j|: the plain soft count used directly as a critic."""
    zm = z.value.reshape(-1, n_classes)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    labels = assignments(zm)
    soft = np.array([s for s, _ in per_class_counts(zm, cfg)])
    direction = np.sign(soft - targets)
    coeff = np.zeros(zm.shape)
    coeff[np.arange(zm.shape[0]), labels] = direction[labels]
    g = z.graph
    sig = tape.sigmoid(tape.scale(z - np.full(z.shape, cfg.tau_z), cfg.beta))
    gap = tape.sum_(tape.mul(sig, g.const(coeff.ravel()))) - float(np.dot(direction, targets))
    return gap, "over" if direction.sum() > 0 else "under"
