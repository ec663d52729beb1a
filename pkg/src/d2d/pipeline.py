"""Alignment, calibration and count-correcting optimisation of the initial latent."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tape
from .critic import CriticConfig, count_gap_on_tape, d2d_loss_on_tape, per_class_counts
from .lmn import LmnParams, lmn_forward_on_tape, mix_latent
from .regularizer import (RegConfig, basin_value, reg_pow_on_tape, reg_prime_min,
                          reg_prime_on_tape)
from .world import TapeWorld, WorldParams, generate, oracle_counts

log = logging.getLogger(__name__)

MODES = ("d2d", "f-only", "direct-latent", "no-op")
EARLY_STOP = "early-stop"
BUDGET_EXHAUSTED = "budget-exhausted"
FAILED = "failed"


class AlignmentError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignConfig:
    n_latents: int = 100
    epochs: int = 200
    eta: float = 1e-3  # 1e-4 suits d = 16384; too slow to align at d = 128
    lam: float = 0.01
    seed: int = 1


@dataclass(frozen=True)
class CalibConfig:
    t_min: int = 70
    eta: float = 1e-3
    lam: float = 0.01
    tolerance: float = 0.99975
    max_resamples: int = 10

    def tau_reg(self, d: int) -> float:
        """Acceptance threshold for ``lam * reg_prime``; -712.8 at d = 16384."""
        return self.tolerance * self.lam * reg_prime_min(d)


@dataclass(frozen=True)
class OptimConfig:
    eta: float = 5e-4
    alpha: float = 5.0
    lam: float = 1e-4
    K: int = 200
    grad_cap: float = 10.0
    lr_decay: float = 0.25
    lam_growth: float = 2.0
    adaptive_lr: bool = True
    adaptive_lambda: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    critic: CriticConfig = field(default_factory=CriticConfig)
    w: float = 0.2
    reg: RegConfig = field(default_factory=RegConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["critic"] = {"tau": self.critic.tau, "beta": self.critic.beta}
        return out


@dataclass(frozen=True)
class Prompt:
    classes: tuple[int, ...]
    counts: tuple[int, ...]
    tag: str = "small"
    index: int = 0

    def to_dict(self) -> dict:
        return {"index": self.index, "tag": self.tag, "classes": list(self.classes), "counts": list(self.counts)}


@dataclass
class RunRecord:
    prompt: Prompt
    mode: str
    seed: int
    targets: list[int]
    initial_counts: list[int]
    final_counts: list[int]
    start_counts: list[int] = field(default_factory=list)
    calib_iterations: int = 0
    resamples: int = 0
    iterations: int = 0
    generator_calls: int = 0
    stop_reason: str = BUDGET_EXHAUSTED
    failure: str | None = None
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def correct(self) -> bool:
        return self.final_counts == self.targets

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "prompt": self.prompt.to_dict(), "mode": self.mode, "seed": self.seed,
            "targets": self.targets, "initial_counts": self.initial_counts,
            "start_counts": self.start_counts, "final_counts": self.final_counts,
            "correct": self.correct, "calib_iterations": self.calib_iterations,
            "resamples": self.resamples, "iterations": self.iterations,
            "generator_calls": self.generator_calls, "stop_reason": self.stop_reason,
            "failure": self.failure, "losses": self.losses,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        p = d["prompt"]
        prompt = Prompt(tuple(p["classes"]), tuple(p["counts"]), p["tag"], p["index"])
        keys = ("start_counts", "calib_iterations", "resamples", "iterations", "generator_calls",
                "stop_reason", "failure", "losses", "wall_time")
        return cls(prompt, d["mode"], d["seed"], d["targets"], d["initial_counts"], d["final_counts"],
                   **{k: d[k] for k in keys if k in d})


# --- parameter states ----------------------------------------------------

class LmnState:
    """Tunable LMN weights applied to a fixed initial latent."""

    def __init__(self, params: LmnParams, x: np.ndarray, w: float):
        self.params = params
        self.x = np.asarray(x, dtype=np.float64)
        self.w = w

    def build(self, g: tape.Graph):
        leaves = [g.leaf(a) for a in self.params.arrays()]
        y = lmn_forward_on_tape(g.const(self.x), leaves, self.params)
        return leaves, mix_latent(self.x, y, self.w)

    def latent(self) -> np.ndarray:
        g = tape.Graph()
        return self.build(g)[1].value.copy()

    def apply(self, grads, lr: float):
        for a, gr in zip(self.params.arrays(), grads):
            a -= lr * gr


class LatentState:
    """The initial latent itself as the tunable parameter."""

    def __init__(self, x: np.ndarray):
        self.x = np.array(x, dtype=np.float64)

    def build(self, g: tape.Graph):
        leaf = g.leaf(self.x)
        return [leaf], leaf

    def latent(self) -> np.ndarray:
        return self.x.copy()

    def apply(self, grads, lr: float):
        self.x -= lr * grads[0]


# --- alignment and calibration -------------------------------------------

def _reg_step(state: LmnState, lam: float, d: int):
    g = tape.Graph()
    leaves, xp = state.build(g)
    loss = tape.scale(reg_prime_on_tape(xp, d), lam)
    grads = tape.backward(g, loss)
    return loss.item(), [grads[t.id] for t in leaves]


def pre_align(params: LmnParams, d: int, cfg: AlignConfig = AlignConfig(), w: float = 0.2) -> LmnParams:
    """Fit the LMN so that its mixed output sits on the Gaussian shell.

    Visits ``n_latents`` latents in turn and takes ``epochs`` descent steps on
    ``lam * reg_prime`` of the mixed latent for each.  Returns new parameters.
    """
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    for k in range(cfg.n_latents):
        state = LmnState(params, rng.normal(size=d), w)
        for epoch in range(cfg.epochs):
            try:
                loss, grads = _reg_step(state, cfg.lam, d)
            except tape.TapeError as exc:
                raise AlignmentError(f"alignment diverged at latent {k}, epoch {epoch}: {exc}") from exc
            state.apply(grads, cfg.eta)
    return params


def shell_deviation(params: LmnParams, xs, w: float) -> np.ndarray:
    """Relative distance of each mixed latent's norm from sqrt(d - 1)."""
    out = []
    for x in xs:
        r = np.linalg.norm(LmnState(params, x, w).latent())
        out.append(abs(r - np.sqrt(len(x) - 1)) / np.sqrt(len(x) - 1))
    return np.array(out)


@dataclass
class Calibration:
    params: LmnParams
    x: np.ndarray
    t: int
    resamples: int


def calibrate(params: LmnParams, x, cfg: CalibConfig, K: int, w: float = 0.2,
              rng: np.random.Generator | None = None) -> Calibration:
    """Adapt the LMN to a new latent using only the shell regulariser.

    Runs up to ``K`` steps per latent; accepts at the first step t >= t_min whose
    loss is within ``tau_reg``.  Otherwise draws a fresh latent (keeping the
    weights) and tries again.  Returns the accepted latent and step index.
    """
    params = params.copy()
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    threshold = cfg.tau_reg(d)
    rng = rng or np.random.default_rng()
    resamples = 0
    while True:
        state = LmnState(params, x, w)
        for t in range(1, K + 1):
            try:
                loss, grads = _reg_step(state, cfg.lam, d)
            except tape.TapeError as exc:
                raise CalibrationError(f"calibration diverged at step {t}: {exc}") from exc
            if t >= cfg.t_min and loss <= threshold:
                return Calibration(params, x, t, resamples)
            state.apply(grads, cfg.eta)
        resamples += 1
        if resamples > cfg.max_resamples:
            raise CalibrationError(f"calibration did not converge after {cfg.max_resamples} resamples")
        x = rng.normal(size=d)


# --- numeracy optimisation -----------------------------------------------

def _counts(zm: np.ndarray, cfg: CriticConfig) -> list[int]:
    return [h for _, h in per_class_counts(zm, cfg)]


def rescale_gradients(grads, cap: float) -> list[np.ndarray]:
    """Scale all gradients by one positive factor so their joint norm is at most ``cap``."""
    norm = float(np.sqrt(sum(np.vdot(a, a) for a in grads)))
    if norm > cap:
        return [a * (cap / norm) for a in grads]
    return list(grads)


def optimize_numeracy(state, prompt: Prompt, tw: TapeWorld, cfg: PipelineConfig,
                      record: RunRecord, start: int = 1, loss_kind: str = "d2d") -> RunRecord:
    """Stage-2 loop: check counts, stop if they match, else take one update.

    Epochs run from ``start`` to K inclusive, so calibration steps share the
    budget.  Each epoch is one generator call; epoch K only checks, so its
    generation is the output.  The record is filled in place and returned.
    """
    opt, crit, reg = cfg.optim, cfg.critic, cfg.reg
    targets = list(prompt.counts)
    m = tw.n_classes
    d = tw.world.d
    lam_scale = 1.0
    record.stop_reason = BUDGET_EXHAUSTED
    for epoch in range(start, opt.K + 1):
        g = tape.Graph()
        try:
            leaves, xp = state.build(g)
            z = tw(xp)
            record.generator_calls += 1
            zm = z.value.reshape(-1, m)
            if epoch == start:
                record.start_counts = _counts(zm, crit)
            if _counts(zm, crit) == targets:
                record.stop_reason = EARLY_STOP
                break
            if epoch == opt.K:
                break  # the budget's last generation is the output
            if loss_kind == "d2d":
                critic_term, _ = d2d_loss_on_tape(z, targets, crit, m)
            else:
                critic_term, _ = count_gap_on_tape(z, targets, crit, m)

            if opt.adaptive_lambda:
                lam_scale = lam_scale * opt.lam_growth if basin_value(xp.value, reg, d) > 1.0 else 1.0
            total = (tape.scale(critic_term, opt.alpha)
                     + tape.scale(reg_pow_on_tape(xp, reg, d), opt.lam * lam_scale))
            grads = tape.backward(g, total)
        except tape.TapeError as exc:
            record.stop_reason = FAILED
            record.failure = str(exc)
            log.warning("run %s/%s failed: %s", prompt.index, record.mode, exc)
            break
        gs = rescale_gradients([grads[t.id] for t in leaves], opt.grad_cap)
        lr = opt.eta
        if opt.adaptive_lr:
            soft = np.array([s for s, _ in per_class_counts(zm, crit)])
            if np.all(np.abs(soft - np.asarray(targets)) < 1.0):
                lr *= opt.lr_decay
        state.apply(gs, lr)
        record.iterations += 1
        record.losses.append(total.item())

    det = generate(state.latent(), tw.world, tw.classes)
    record.final_counts = oracle_counts(det, tw.world.eval_tau)
    return record


def run_prompt(prompt: Prompt, world: WorldParams, params: LmnParams | None, seed: int,
               mode: str = "d2d", cfg: PipelineConfig = PipelineConfig()) -> RunRecord:
    """Sample the initial latent for (prompt, seed) and run one correction mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    started = time.perf_counter()
    rng = np.random.default_rng([seed, prompt.index])
    x = rng.normal(size=world.d)
    tw = TapeWorld(world, prompt.classes)
    targets = list(prompt.counts)
    record = RunRecord(prompt, mode, seed, targets, [], [])

    if mode == "no-op":
        counts = oracle_counts(generate(x, world, prompt.classes), world.eval_tau)
        record.initial_counts = record.start_counts = record.final_counts = counts
        record.generator_calls = 1
        record.stop_reason = EARLY_STOP if counts == targets else BUDGET_EXHAUSTED
    elif mode == "direct-latent":
        record.initial_counts = oracle_counts(generate(x, world, prompt.classes), world.eval_tau)
        optimize_numeracy(LatentState(x), prompt, tw, cfg, record, start=1)
    else:
        if params is None:
            raise ValueError(f"mode {mode!r} needs LMN parameters")
        try:
            cal = calibrate(params, x, cfg.calib, cfg.optim.K, cfg.w, rng)
        except CalibrationError as exc:
            record.initial_counts = oracle_counts(generate(x, world, prompt.classes), world.eval_tau)
            record.final_counts = list(record.initial_counts)
            record.stop_reason, record.failure = FAILED, str(exc)
            record.wall_time = time.perf_counter() - started
            return record
        record.calib_iterations, record.resamples = cal.t, cal.resamples
        record.initial_counts = oracle_counts(generate(cal.x, world, prompt.classes), world.eval_tau)
        state = LmnState(cal.params, cal.x, cfg.w)
        optimize_numeracy(state, prompt, tw, cfg, record, start=cal.t,
                          loss_kind="d2d" if mode == "d2d" else "f-only")
    record.wall_time = time.perf_counter() - started
    return record
