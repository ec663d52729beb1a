"""Synthetic prompt suites, accuracy/breakdown metrics and parameter sweeps."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .critic import CriticConfig
from .lmn import LmnParams, init_params
from .pipeline import MODES, PipelineConfig, Prompt, RunRecord, pre_align, run_prompt
from .world import WorldParams, make_world

FORMAT_VERSION = 1
TAGS = ("small", "multi", "large")
COUNT_RANGES = {"small": (1, 10), "multi": (1, 9), "large": (11, 20)}
BUDGETS = {"small": 200, "multi": 400, "large": 200}
LARGE_MIN_SLOTS = 24
LOW_DENSITY_MAX = 10

TAU_GRID = (0.1, 0.2, 0.5, 0.8)
BETA_GRID = (1.0, 10.0, 100.0, 300.0, 400.0)
W_GRID = (0.0, 0.2, 0.5, 0.8)
SWEEP_GRIDS = {"tau": TAU_GRID, "beta": BETA_GRID, "w": W_GRID}


def world_for_tag(tag: str, seed: int = 0, slot_dim: int = 8, n_classes: int = 3) -> WorldParams:
    slots = LARGE_MIN_SLOTS if tag == "large" else 16
    return make_world(seed, slots, slot_dim, n_classes)


def build_suite(tag: str, n_prompts: int, rng, n_classes: int = 3, slots: int | None = None) -> list[Prompt]:
    if tag not in TAGS:
        raise ValueError(f"unknown suite tag {tag!r}")
    if tag == "large" and slots is not None and slots < LARGE_MIN_SLOTS:
        raise ValueError(f"the large suite asks for up to 20 objects; needs >= {LARGE_MIN_SLOTS} slots, world has {slots}")
    if tag == "multi" and n_classes < 2:
        raise ValueError("the multi suite needs at least two classes")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lo, hi = COUNT_RANGES[tag]
    prompts = []
    for i in range(n_prompts):
        if tag == "multi":
            classes = tuple(int(c) for c in rng.choice(n_classes, size=2, replace=False))
            counts = tuple(int(c) for c in rng.integers(lo, hi + 1, size=2))
        else:
            classes = (int(rng.integers(n_classes)),)
            counts = (int(rng.integers(lo, hi + 1)),)
        prompts.append(Prompt(classes, counts, tag, i))
    return prompts


_ALIGN_CACHE: dict = {}


def aligned_lmn(d: int, cfg: PipelineConfig, init_seed: int = 0, activation: str = "leaky_relu") -> LmnParams:
    key = (d, cfg.w, cfg.align, init_seed, activation)
    if key not in _ALIGN_CACHE:
        fresh = init_params(d, np.random.default_rng(init_seed), activation=activation)
        _ALIGN_CACHE[key] = pre_align(fresh, d, cfg.align, cfg.w)
    return _ALIGN_CACHE[key].copy()


def bucket(record: RunRecord) -> str:
    """Numeracy of the initial generation: over, under, correct, or mixed."""
    diff = np.asarray(record.initial_counts) - np.asarray(record.targets)
    if np.all(diff == 0):
        return "correct"
    if np.all(diff >= 0):
        return "over"
    if np.all(diff <= 0):
        return "under"
    return "mixed"


def _pct(hits: int, n: int) -> float:
    return 100.0 * hits / n if n else float("nan")


@dataclass
class SuiteResult:
    mode: str
    records: list[RunRecord] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.records})

    def seed_accuracy(self) -> dict[int, float]:
        out = {}
        for s in self.seeds:
            mine = [r for r in self.records if r.seed == s]
            out[s] = _pct(sum(r.correct for r in mine), len(mine))
        return out

    @property
    def accuracy(self) -> float:
        return _pct(sum(r.correct for r in self.records), len(self.records))

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.seed_accuracy().values())))

    @property
    def std(self) -> float:
        acc = list(self.seed_accuracy().values())
        return float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0

    def breakdown(self) -> dict[str, dict]:
        out = {}
        for name in ("over", "under", "correct", "mixed"):
            mine = [r for r in self.records if bucket(r) == name]
            if name == "mixed" and not mine:
                continue
            hits = sum(r.correct for r in mine)
            out[name] = {"runs": len(mine), "corrected": hits, "rate": _pct(hits, len(mine))}
        return out

    def density_facets(self) -> dict[str, float]:
        """Accuracy split by total requested count (two-class prompts only)."""
        multi = [r for r in self.records if len(r.targets) > 1]
        low = [r for r in multi if sum(r.targets) <= LOW_DENSITY_MAX]
        high = [r for r in multi if sum(r.targets) > LOW_DENSITY_MAX]
        return {"low": _pct(sum(r.correct for r in low), len(low)),
                "high": _pct(sum(r.correct for r in high), len(high))}


def _run_task(args):
    prompt, world, params, seed, mode, cfg = args
    return run_prompt(prompt, world, params, seed, mode, cfg)


def run_suite(suite: Sequence[Prompt], modes: Iterable[str], seeds: Iterable[int], world: WorldParams,
              params: LmnParams | None, cfg: PipelineConfig, jobs: int = 1) -> dict[str, SuiteResult]:
    modes, seeds = list(modes), list(seeds)
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    tasks = [(p, world, params, s, mode, cfg) for mode in modes for s in seeds for p in suite]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        records = [_run_task(t) for t in tasks]
    results = {mode: SuiteResult(mode) for mode in modes}
    for rec in records:
        results[rec.mode].records.append(rec)
    return results


def with_param(cfg: PipelineConfig, param: str, value: float) -> PipelineConfig:
    if param == "tau":
        return replace(cfg, critic=CriticConfig(tau=value, beta=cfg.critic.beta))
    if param == "beta":
        return replace(cfg, critic=CriticConfig(tau=cfg.critic.tau, beta=value))
    if param == "w":
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {value}")
        return replace(cfg, w=value)
    raise ValueError(f"cannot sweep {param!r}; choose tau, beta or w")


def sweep(param: str, values: Sequence[float], suite: Sequence[Prompt], world: WorldParams,
          cfg: PipelineConfig, seeds: Sequence[int] = (0,), modes: Sequence[str] = ("d2d",),
          params: LmnParams | None = None, jobs: int = 1) -> list[dict]:
    """Accuracy per value of one parameter, all else fixed.

    The LMN is re-aligned for every w, since alignment itself mixes with w.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        vcfg = with_param(cfg, param, float(value))
        vparams = params
        if vparams is None or param == "w":
            vparams = aligned_lmn(world.d, vcfg)
        for mode, res in run_suite(suite, modes, seeds, world, vparams, vcfg, jobs).items():
            rows.append({"param": param, "value": float(value), "mode": mode,
                         "accuracy_mean": res.mean, "accuracy_std": res.std, "runs": len(res.records)})
    return rows


# --- output files --------------------------------------------------------

SUMMARY_COLUMNS = ("mode", "accuracy_mean", "accuracy_std", "seeds", "runs",
                   "over_runs", "over_corrected_pct", "under_runs", "under_corrected_pct",
                   "correct_runs", "correct_maintained_pct", "low_density_pct", "high_density_pct",
                   "format_version", "manifest_id")
ACCURACY_COLUMNS = ("mode", "seed", "accuracy", "runs", "format_version", "manifest_id")
SWEEP_COLUMNS = ("param", "value", "mode", "accuracy_mean", "accuracy_std", "runs", "format_version", "manifest_id")


def _fmt(x):
    return repr(round(x, 10)) if isinstance(x, float) else x


def write_records(path, results: dict[str, SuiteResult], manifest_id: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results.values():
            for rec in res.records:
                row = {"format_version": FORMAT_VERSION, "manifest_id": manifest_id, **rec.to_dict()}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary(path, results: dict[str, SuiteResult], manifest_id: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for mode, res in results.items():
            b = res.breakdown()
            dens = res.density_facets()
            w.writerow([_fmt(v) for v in (
                mode, res.mean, res.std, len(res.seeds), len(res.records),
                b["over"]["runs"], b["over"]["rate"], b["under"]["runs"], b["under"]["rate"],
                b["correct"]["runs"], b["correct"]["rate"], dens["low"], dens["high"],
                FORMAT_VERSION, manifest_id)])


def write_accuracy(path, results: dict[str, SuiteResult], manifest_id: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ACCURACY_COLUMNS)
        for mode, res in results.items():
            for seed, acc in res.seed_accuracy().items():
                n = sum(1 for r in res.records if r.seed == seed)
                w.writerow([mode, seed, _fmt(acc), n, FORMAT_VERSION, manifest_id])


def write_sweep(path, rows: list[dict], manifest_id: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS[:6]] + [FORMAT_VERSION, manifest_id])


def default_jobs() -> int:
    return os.cpu_count() or 1
