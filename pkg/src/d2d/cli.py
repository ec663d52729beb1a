"""Command-line entry point: ``d2d {align,run,bench,sweep,gradcheck,report,config}``.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure,
4 acceptance-gate failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, config, gradcheck
from .config import ConfigError
from .lmn import init_params, load_params, save_params
from .pipeline import Prompt, pre_align, run_prompt, shell_deviation
from .world import make_world

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GATE = 0, 2, 3, 4

log = logging.getLogger("d2d")

SHELL_PROBE_SEED = 12345
SHELL_PROBE_LATENTS = 50


class GateFailure(Exception):
    pass


def _common(p: argparse.ArgumentParser, jobs=False):
    p.add_argument("--config", help="INI config file; its values override flags")
    p.add_argument("--world-seed", type=int)
    p.add_argument("--suite", choices=bench.TAGS)
    p.add_argument("--mode", action="append", help="correction mode (repeatable)")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", help="comma-separated latent seeds")
    seeds.add_argument("--n-seeds", type=int, help="use seeds 0..N-1")
    p.add_argument("--tau", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--w", type=float)
    p.add_argument("--k", help="step budget (integer or auto)")
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--suite-seed", type=int)
    p.add_argument("--lmn", help="pre-aligned LMN file; aligned in-process when absent")
    p.add_argument("--out", required=True, help="output directory")
    if jobs:
        p.add_argument("--jobs", type=int, default=bench.default_jobs())


def _settings(args) -> dict:
    seeds = args.seeds
    if getattr(args, "n_seeds", None) is not None:
        seeds = ",".join(str(i) for i in range(args.n_seeds))
    flags = {
        "world.seed": getattr(args, "world_seed", None),
        "bench.suite": getattr(args, "suite", None),
        "bench.modes": ",".join(args.mode) if getattr(args, "mode", None) else None,
        "bench.seeds": seeds,
        "critic.tau": getattr(args, "tau", None),
        "critic.beta": getattr(args, "beta", None),
        "mix.w": getattr(args, "w", None),
        "optim.k": getattr(args, "k", None),
        "bench.n_prompts": getattr(args, "n_prompts", None),
        "bench.suite_seed": getattr(args, "suite_seed", None),
    }
    return config.resolve(flags, args.config)


def _world(settings):
    return make_world(settings["world.seed"], config.slots_of(settings), settings["world.slot_dim"],
                      settings["world.classes"], settings["world.eval_tau"])


def _lmn(settings, cfg, d, path=None):
    if path:
        try:
            params = load_params(path)
        except OSError as exc:
            raise ConfigError(f"cannot read LMN file {path}: {exc}") from exc
        if params.d != d:
            raise ConfigError(f"LMN file {path} has d = {params.d}, world needs {d}")
        return params
    return bench.aligned_lmn(d, cfg, settings["align.init_seed"], settings["align.activation"])


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_align(args) -> int:
    settings = _settings(args)
    cfg = config.pipeline_config(settings)
    d = args.d or config.slots_of(settings) * settings["world.slot_dim"]
    out = _outdir(args.out)
    fresh = init_params(d, np.random.default_rng(settings["align.init_seed"]), settings["align.activation"])
    params = pre_align(fresh, d, cfg.align, cfg.w)
    probe = np.random.default_rng(SHELL_PROBE_SEED).normal(size=(SHELL_PROBE_LATENTS, d))
    dev = shell_deviation(params, probe, cfg.w)
    save_params(params, out / "lmn.bin")
    manifest = config.make_manifest("align", settings, d=d, outputs={"lmn": "lmn.bin"})
    config.write_manifest(out / "manifest.json", manifest)
    print(f"aligned LMN for d={d}: mean shell deviation {dev.mean():.4f}, "
          f"within 5%: {np.mean(dev <= 0.05):.0%} of {len(dev)} fresh latents")
    print(f"wrote {out / 'lmn.bin'}")
    return EXIT_OK


def cmd_run(args) -> int:
    settings = _settings(args)
    cfg = config.pipeline_config(settings)
    world = _world(settings)
    if len(args.cls) != len(args.count):
        raise ConfigError("give one --count per --class")
    modes = config.modes_of(settings)
    if len(modes) != 1:
        raise ConfigError("run takes exactly one --mode")
    prompt = Prompt(tuple(args.cls), tuple(args.count), settings["bench.suite"], args.index)
    params = None if modes[0] in ("no-op", "direct-latent") else _lmn(settings, cfg, world.d, args.lmn)
    out = _outdir(args.out)
    manifest = config.make_manifest("run", settings, world.spec(), outputs={"records": "records.jsonl"},
                                    prompt=prompt.to_dict())
    rows = []
    for seed in config.seeds_of(settings):
        rec = run_prompt(prompt, world, params, seed, modes[0], cfg)
        rows.append({"format_version": bench.FORMAT_VERSION, "manifest_id": manifest["manifest_id"], **rec.to_dict()})
        print(f"seed {seed}: target {rec.targets} initial {rec.initial_counts} final {rec.final_counts} "
              f"({rec.stop_reason}, {rec.iterations} updates)")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    config.write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


def _print_summary(results):
    print(f"{'mode':<14}{'acc mean':>9}{'std':>7}{'over':>8}{'under':>8}{'kept':>8}")
    for mode, res in results.items():
        b = res.breakdown()
        print(f"{mode:<14}{res.mean:9.2f}{res.std:7.2f}{b['over']['rate']:8.1f}"
              f"{b['under']['rate']:8.1f}{b['correct']['rate']:8.1f}")


def cmd_bench(args) -> int:
    settings = _settings(args)
    cfg = config.pipeline_config(settings)
    world = _world(settings)
    tag = settings["bench.suite"]
    suite = bench.build_suite(tag, settings["bench.n_prompts"], settings["bench.suite_seed"],
                              world.n_classes, world.slots)
    modes = config.modes_of(settings)
    needs_lmn = any(m in ("d2d", "f-only") for m in modes)
    params = _lmn(settings, cfg, world.d, args.lmn) if needs_lmn else None
    out = _outdir(args.out)
    outputs = {"records": "records.jsonl", "accuracy": "accuracy.csv", "summary": "summary.csv"}
    manifest = config.make_manifest("bench", settings, world.spec(), outputs=outputs, jobs=args.jobs,
                                    lmn=str(args.lmn) if args.lmn else None)
    results = bench.run_suite(suite, modes, config.seeds_of(settings), world, params, cfg, args.jobs)
    mid = manifest["manifest_id"]
    bench.write_records(out / outputs["records"], results, mid)
    bench.write_accuracy(out / outputs["accuracy"], results, mid)
    bench.write_summary(out / outputs["summary"], results, mid)
    config.write_manifest(out / "manifest.json", manifest)
    _print_summary(results)
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings = _settings(args)
    cfg = config.pipeline_config(settings)
    world = _world(settings)
    values = ([float(v) for v in args.values.split(",")] if args.values
              else list(bench.SWEEP_GRIDS[args.param]))
    if args.param == "tau" and any(not 0 < v < 1 for v in values):
        raise ConfigError("tau values must lie in (0, 1)")
    suite = bench.build_suite(settings["bench.suite"], settings["bench.n_prompts"], settings["bench.suite_seed"],
                              world.n_classes, world.slots)
    params = None
    if args.lmn and args.param != "w":
        params = _lmn(settings, cfg, world.d, args.lmn)
    out = _outdir(args.out)
    manifest = config.make_manifest("sweep", settings, world.spec(), outputs={"sweep": "sweep.csv"},
                                    jobs=args.jobs, param=args.param, values=values,
                                    lmn=str(args.lmn) if args.lmn else None)
    rows = bench.sweep(args.param, values, suite, world, cfg, config.seeds_of(settings),
                       config.modes_of(settings), params, args.jobs)
    bench.write_sweep(out / "sweep.csv", rows, manifest["manifest_id"])
    config.write_manifest(out / "manifest.json", manifest)
    for r in rows:
        print(f"{r['param']}={r['value']:<8g} {r['mode']:<14} {r['accuracy_mean']:6.2f} +- {r['accuracy_std']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gradcheck.run_all(args.points, args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:<14} max relative error {err:.3e}")
    print(f"overall        max relative error {worst:.3e} (tolerance {args.tol:g})")
    if worst > args.tol:
        raise GateFailure(f"gradient check exceeded tolerance: {worst:.3e} > {args.tol:g}")
    print("PASS")
    return EXIT_OK


def _report_inputs(paths):
    for p in paths:
        p = Path(p)
        if p.is_dir():
            yield config.read_manifest(p / "manifest.json"), p / "accuracy.csv"
        else:
            yield config.read_manifest(p.parent / "manifest.json"), p


def cmd_report(args) -> int:
    per_mode: dict[str, list[float]] = {}
    versions = set()
    for manifest, acc_path in _report_inputs(args.inputs):
        versions.add(manifest.get("format_version"))
        if len(versions) > 1:
            raise ConfigError(f"refusing to mix format versions {sorted(map(str, versions))}")
        try:
            with open(acc_path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    if int(row["format_version"]) != manifest["format_version"]:
                        raise ConfigError(f"{acc_path}: row format version differs from its manifest")
                    per_mode.setdefault(row["mode"], []).append(float(row["accuracy"]))
        except OSError as exc:
            raise ConfigError(f"cannot read {acc_path}: {exc}") from exc
    version = next(iter(versions), None)
    rows = []
    for mode, accs in per_mode.items():
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append((mode, float(np.mean(accs)), std, len(accs)))
    print(f"{'mode':<14}{'mean':>9}{'std':>8}{'seeds':>7}")
    for mode, mean, std, n in rows:
        print(f"{mode:<14}{mean:9.2f}{std:8.2f}{n:7d}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("mode", "accuracy_mean", "accuracy_std", "seeds", "format_version"))
            for mode, mean, std, n in rows:
                w.writerow((mode, repr(round(mean, 10)), repr(round(std, 10)), n, version))
    return EXIT_OK


def cmd_config(args) -> int:
    text = config.reference_ini()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2d", description="Detector-logit count critic with latent modification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="pre-inference alignment of a fresh LMN")
    _common(p)
    p.add_argument("--d", type=int, help="latent dimension (default: world slots x slot_dim)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("run", help="one prompt, one mode, one or more seeds")
    _common(p)
    p.add_argument("--class", dest="cls", type=int, action="append", required=True)
    p.add_argument("--count", type=int, action="append", required=True)
    p.add_argument("--index", type=int, default=0, help="prompt index (selects the latent stream)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a suite in one or more modes")
    _common(p, jobs=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="accuracy across values of tau, beta or w")
    _common(p, jobs=True)
    p.add_argument("--param", choices=("tau", "beta", "w"), required=True)
    p.add_argument("--values", help="comma-separated values (default: standard grid)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate accuracy tables across bench outputs")
    p.add_argument("inputs", nargs="+", help="bench output directories or accuracy.csv files")
    p.add_argument("--out", help="write the aggregate table as CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", help="print every setting with its default")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"d2d: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GateFailure as exc:
        print(f"d2d: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"d2d: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
