"""A frozen, seeded, differentiable stand-in for generator + detector.

The latent is split into S slots of q coordinates.  Slot i becomes an
embedding ``e_i = tanh(A_i x[iq:(i+1)q])`` and class j scores it with
``z_ij = g * (u_j . e_i) + v_j``.  Counting thresholds these logits exactly
as a detector would.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tape
from .critic import CriticConfig, LogitMatrix, assignments, d2d_loss_on_tape, logit_threshold

CALIBRATION_SAMPLES = 1000
TARGET_FRACTION = 0.375
BASE_OFFSET = 1.0


class WorldCalibrationError(RuntimeError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WorldParams:
    seed: int
    slots: int
    slot_dim: int
    n_classes: int
    gain: float
    eval_tau: float
    A: np.ndarray        # (S, q, q)
    U: np.ndarray        # (m, q), unit rows
    v: np.ndarray        # (m,)
    box_center: np.ndarray  # (2, q)
    box_size: np.ndarray    # (2, q)

    @property
    def d(self) -> int:
        return self.slots * self.slot_dim

    def spec(self) -> dict:
        return {"seed": self.seed, "slots": self.slots, "slot_dim": self.slot_dim,
                "classes": self.n_classes, "gain": self.gain, "eval_tau": self.eval_tau}

    def embed_matrix(self) -> np.ndarray:
        """Block-diagonal d x d map from latent to pre-tanh slot embeddings."""
        S, q = self.slots, self.slot_dim
        M = np.zeros((S * q, S * q))
        for i in range(S):
            M[i * q:(i + 1) * q, i * q:(i + 1) * q] = self.A[i]
        return M

    def readout(self, classes: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Matrix and bias mapping flat embeddings to flat (slot, class) logits."""
        classes = self._classes(classes)
        G = self.gain * self.U[classes]
        return np.kron(np.eye(self.slots), G), np.tile(self.v[classes], self.slots)

    def _classes(self, classes) -> list[int]:
        if classes is None:
            return list(range(self.n_classes))
        classes = [int(c) for c in classes]
        if any(c < 0 or c >= self.n_classes for c in classes):
            raise ValueError(f"class index out of range for a world with {self.n_classes} classes: {classes}")
        return classes


@dataclass(frozen=True)
class DetectionSet:
    logits: LogitMatrix
    boxes: np.ndarray  # (S, 4): cx, cy, w, h in [0, 1]
    classes: tuple[int, ...]


def _slot_embeddings(x, world: WorldParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (world.d,):
        raise ValueError(f"latent must have {world.d} entries, got shape {x.shape}")
    xs = x.reshape(world.slots, world.slot_dim)
    return np.tanh(np.einsum("sij,sj->si", world.A, xs))


def _logits_from_embeddings(e, world, classes):
    return world.gain * e @ world.U[classes].T + world.v[classes]


def generate(x, world: WorldParams, classes: Sequence[int] | None = None) -> DetectionSet:
    classes = world._classes(classes)
    e = _slot_embeddings(x, world)
    z = _logits_from_embeddings(e, world, classes)
    sig = lambda t: 1.0 / (1.0 + np.exp(-t))
    centers = sig(e @ world.box_center.T)
    sizes = 0.05 + 0.25 * sig(e @ world.box_size.T)
    return DetectionSet(LogitMatrix(z), np.hstack([centers, sizes]), tuple(classes))


class TapeWorld:
    """Generator bound to a fixed class query, for repeated use on the tape."""

    def __init__(self, world: WorldParams, classes: Sequence[int] | None = None):
        self.world = world
        self.classes = world._classes(classes)
        self.embed = world.embed_matrix()
        self.R, self.bias = world.readout(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def __call__(self, x: tape.Tensor) -> tape.Tensor:
        if x.shape != (self.world.d,):
            raise tape.ShapeError("generate", x.shape, (self.world.d,))
        e = tape.tanh(tape.matvec(self.embed, x))
        return tape.affine(self.R, e, self.bias)


def oracle_counts(detections: DetectionSet, tau: float) -> list[int]:
    """Hard per-class counts; evaluation only, never differentiated."""
    z = detections.logits.z
    tz = logit_threshold(tau)
    labels = assignments(z)
    kept = z[np.arange(z.shape[0]), labels] >= tz
    return [int(np.count_nonzero(kept & (labels == j))) for j in range(z.shape[1])]


def oracle_count(detections: DetectionSet, tau: float, j: int) -> int:
    return oracle_counts(detections, tau)[j]


def _class_fractions(gain, embeds, U, v, tz) -> np.ndarray:
    # embeds: (samples, S, q); single-class query per class
    z = gain * np.einsum("nsq,mq->nsm", embeds, U) + v
    return (z >= tz).mean(axis=(0, 1))


def make_world(seed: int = 0, slots: int = 16, slot_dim: int = 8, n_classes: int = 3,
               eval_tau: float = 0.2, max_bisect: int = 60) -> WorldParams:
    """Draw a frozen world and calibrate its gain.

    The gain is bisected so that, for standard normal latents, a slot clears
    the threshold for a single-class query with probability 0.375 on average
    over classes; every class must then land in [S/4, S/2] expected count.
    """
    if slots < 1 or slot_dim < 2 or n_classes < 1:
        raise ValueError("need slots >= 1, slot_dim >= 2, n_classes >= 1")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / np.sqrt(slot_dim), size=(slots, slot_dim, slot_dim))
    U = rng.normal(size=(n_classes, slot_dim))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    box_center = rng.normal(size=(2, slot_dim))
    box_size = rng.normal(size=(2, slot_dim))
    tz = logit_threshold(eval_tau)
    v = np.full(n_classes, tz - BASE_OFFSET)

    sample_rng = np.random.default_rng([seed, 1])
    xs = sample_rng.normal(size=(CALIBRATION_SAMPLES, slots, slot_dim))
    embeds = np.tanh(np.einsum("sij,nsj->nsi", A, xs))

    lo, hi = 1e-3, 1e3
    if _class_fractions(hi, embeds, U, v, tz).mean() < TARGET_FRACTION:
        raise WorldCalibrationError("no gain reaches the target count fraction")
    for _ in range(max_bisect):
        mid = np.sqrt(lo * hi)
        if _class_fractions(mid, embeds, U, v, tz).mean() < TARGET_FRACTION:
            lo = mid
        else:
            hi = mid
    gain = float(hi)
    fractions = _class_fractions(gain, embeds, U, v, tz)
    if np.any(fractions < 0.25) or np.any(fractions > 0.5):
        raise WorldCalibrationError(f"per-class count fractions {fractions} outside [0.25, 0.5]")

    return WorldParams(seed, slots, slot_dim, n_classes, gain, eval_tau,
                       _frozen(A), _frozen(U), _frozen(v), _frozen(box_center), _frozen(box_size))


def world_from_spec(spec: dict) -> WorldParams:
    world = make_world(spec["seed"], spec["slots"], spec["slot_dim"], spec["classes"], spec.get("eval_tau", 0.2))
    if "gain" in spec and not np.isclose(world.gain, spec["gain"], rtol=1e-12, atol=0):
        raise ValueError(f"world gain {world.gain} does not match recorded {spec['gain']}")
    return world


def eval_config(world: WorldParams) -> CriticConfig:
    return CriticConfig(tau=world.eval_tau)


def direct_descent(x, world: WorldParams, cls: int, target: int, steps: int = 400, eta: float = 0.01):
    """Plain gradient descent on the D2D loss over the latent itself.

    Stops as soon as the oracle count hits ``target``; returns the final
    latent and whether it did.
    """
    tw = TapeWorld(world, [cls])
    cfg = eval_config(world)
    x = np.array(x, dtype=np.float64)
    for _ in range(steps):
        if oracle_counts(generate(x, world, [cls]), world.eval_tau)[0] == target:
            return x, True
        g = tape.Graph()
        leaf = g.leaf(x)
        loss, _ = d2d_loss_on_tape(tw(leaf), [target], cfg, 1)
        x = x - eta * tape.backward(g, loss)[leaf.id]
    return x, oracle_counts(generate(x, world, [cls]), world.eval_tau)[0] == target


def controllability(world: WorldParams, n_latents: int = 40, max_offset: int = 3, steps: int = 400,
                    seed: int = 0) -> float:
    """Fraction of latents whose count direct descent can move by up to +-max_offset."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_latents):
        x = rng.normal(size=world.d)
        cls = int(rng.integers(world.n_classes))
        n0 = oracle_count(generate(x, world, [cls]), world.eval_tau, 0)
        offsets = [o for o in range(-max_offset, max_offset + 1) if o and 0 <= n0 + o <= world.slots]
        target = n0 + int(rng.choice(offsets))
        hits += direct_descent(x, world, cls, target, steps)[1]
    return hits / n_latents
