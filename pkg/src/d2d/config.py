"""Run settings: defaults, INI config files, and reproducibility manifests.

Settings are a flat mapping of ``section.key`` names.  The config file is an
INI file with the same sections; see :func:`reference_ini` for every key.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .critic import CriticConfig
from .pipeline import AlignConfig, CalibConfig, OptimConfig, PipelineConfig
from .regularizer import RegConfig

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


# (default, type, help)
DEFAULTS: dict[str, tuple] = {
    "world.seed": (0, int, "seed of the frozen generator/detector world"),
    "world.slots": (0, int, "detection slots; 0 picks 16, or 24 for the large suite"),
    "world.slot_dim": (8, int, "latent coordinates per slot"),
    "world.classes": (3, int, "object classes the world can score"),
    "world.eval_tau": (0.2, float, "confidence threshold of the evaluation counter"),
    "critic.tau": (0.2, float, "detection confidence threshold of the critic"),
    "critic.beta": (300.0, float, "sigmoid steepness of the soft count"),
    "mix.w": (0.2, float, "weight of the original latent in the mix"),
    "reg.a": (0.03, float, "scale of the shell penalty inside the 10th power"),
    "reg.c": ("auto", str, "shift inside the 10th power; auto derives it from d"),
    "align.n_latents": (100, int, "latents visited by pre-inference alignment"),
    "align.epochs": (200, int, "descent steps per alignment latent"),
    "align.eta": (1e-3, float, "alignment learning rate"),
    "align.lam": (0.01, float, "alignment loss weight"),
    "align.seed": (1, int, "seed of the alignment latents"),
    "align.init_seed": (0, int, "seed of the LMN initial weights"),
    "align.activation": ("leaky_relu", str, "hidden activation: leaky_relu, relu or tanh"),
    "calib.t_min": (70, int, "minimum calibration steps"),
    "calib.eta": (1e-3, float, "calibration learning rate"),
    "calib.lam": (0.01, float, "calibration loss weight"),
    "calib.tolerance": (0.99975, float, "tau_reg as a fraction of lam * min reg_prime"),
    "calib.max_resamples": (10, int, "fresh latents tried before giving up"),
    "optim.eta": (5e-4, float, "numeracy learning rate"),
    "optim.alpha": (5.0, float, "critic loss weight"),
    "optim.lam": (1e-4, float, "regulariser loss weight"),
    "optim.k": ("auto", str, "step budget; auto is 200, or 400 for the multi suite"),
    "optim.grad_cap": (10.0, float, "gradient norm above which the loss is rescaled"),
    "optim.lr_decay": (0.25, float, "learning-rate factor once every count gap is below 1"),
    "optim.lam_growth": (2.0, float, "regulariser weight growth while off the shell basin"),
    "optim.adaptive_lr": (True, bool, "enable the learning-rate schedule"),
    "optim.adaptive_lambda": (True, bool, "enable regulariser weight growth"),
    "bench.suite": ("small", str, "suite tag: small, multi or large"),
    "bench.n_prompts": (100, int, "prompts per suite"),
    "bench.suite_seed": (0, int, "seed used to draw the suite"),
    "bench.seeds": ("0,1,2,3", str, "comma-separated latent seeds"),
    "bench.modes": ("d2d", str, "comma-separated modes"),
}

NON_RESULT_KEYS = ("outputs", "jobs")


def _parse(key: str, raw):
    default, typ, _ = DEFAULTS[key]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        return typ(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def defaults() -> dict:
    return {k: v[0] for k, v in DEFAULTS.items()}


def load_ini(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            name = f"{section}.{key}"
            if name not in DEFAULTS:
                raise ConfigError(f"{path}: unknown config key {name!r}")
            out[name] = _parse(name, raw)
    return out


def resolve(flags: dict | None = None, config_path=None) -> dict:
    """Defaults, then command-line flags, then the config file on top."""
    settings = defaults()
    for key, value in (flags or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown setting {key!r}")
        if value is not None:
            settings[key] = _parse(key, value)
    if config_path:
        settings.update(load_ini(config_path))
    validate(settings)
    return settings


def seeds_of(settings) -> list[int]:
    try:
        return [int(s) for s in str(settings["bench.seeds"]).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bench.seeds: {exc}") from exc


def modes_of(settings) -> list[str]:
    return [m.strip() for m in str(settings["bench.modes"]).split(",") if m.strip()]


def budget_of(settings) -> int:
    k = settings["optim.k"]
    if str(k) == "auto":
        return 400 if settings["bench.suite"] == "multi" else 200
    return _parse_int("optim.k", k)


def _parse_int(key, raw) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer or 'auto', got {raw!r}") from exc


def slots_of(settings) -> int:
    if settings["world.slots"]:
        return settings["world.slots"]
    return 24 if settings["bench.suite"] == "large" else 16


def validate(settings) -> None:
    from .bench import TAGS
    from .pipeline import MODES

    if not 0 < settings["critic.tau"] < 1:
        raise ConfigError(f"critic.tau must lie in (0, 1), got {settings['critic.tau']}")
    if not 0 < settings["world.eval_tau"] < 1:
        raise ConfigError("world.eval_tau must lie in (0, 1)")
    if settings["critic.beta"] <= 0:
        raise ConfigError("critic.beta must be positive")
    if not 0 <= settings["mix.w"] <= 1:
        raise ConfigError("mix.w must lie in [0, 1]")
    if settings["bench.suite"] not in TAGS:
        raise ConfigError(f"bench.suite must be one of {TAGS}")
    for m in modes_of(settings):
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
    if settings["align.activation"] not in ("leaky_relu", "relu", "tanh"):
        raise ConfigError("align.activation must be leaky_relu, relu or tanh")
    if str(settings["reg.c"]) != "auto":
        try:
            float(settings["reg.c"])
        except ValueError as exc:
            raise ConfigError(f"reg.c must be a number or 'auto', got {settings['reg.c']!r}") from exc
    if budget_of(settings) < 1:
        raise ConfigError("optim.k must be >= 1")
    seeds_of(settings)


def pipeline_config(settings) -> PipelineConfig:
    c = settings["reg.c"]
    return PipelineConfig(
        critic=CriticConfig(tau=settings["critic.tau"], beta=settings["critic.beta"]),
        w=settings["mix.w"],
        reg=RegConfig(a=settings["reg.a"], c=None if str(c) == "auto" else float(c)),
        align=AlignConfig(settings["align.n_latents"], settings["align.epochs"], settings["align.eta"],
                          settings["align.lam"], settings["align.seed"]),
        calib=CalibConfig(settings["calib.t_min"], settings["calib.eta"], settings["calib.lam"],
                          settings["calib.tolerance"], settings["calib.max_resamples"]),
        optim=OptimConfig(settings["optim.eta"], settings["optim.alpha"], settings["optim.lam"],
                          budget_of(settings), settings["optim.grad_cap"], settings["optim.lr_decay"],
                          settings["optim.lam_growth"], settings["optim.adaptive_lr"],
                          settings["optim.adaptive_lambda"]),
    )


def make_manifest(command: str, settings: dict, world_spec: dict | None = None,
                  outputs: dict | None = None, jobs: int | None = None, **extra) -> dict:
    manifest = {"format_version": FORMAT_VERSION, "command": command,
                "settings": dict(sorted(settings.items())), "world": world_spec, **extra}
    manifest["manifest_id"] = manifest_id(manifest)
    manifest["outputs"] = outputs or {}
    manifest["jobs"] = jobs
    return manifest


def manifest_id(manifest: dict) -> str:
    """Hash of everything that determines results (not paths or parallelism)."""
    core = {k: v for k, v in manifest.items() if k not in NON_RESULT_KEYS + ("manifest_id",)}
    blob = json.dumps(core, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def settings_from_manifest(manifest: dict) -> dict:
    settings = defaults()
    for key, value in manifest["settings"].items():
        if key not in DEFAULTS:
            raise ConfigError(f"manifest has unknown setting {key!r}")
        settings[key] = _parse(key, value)
    validate(settings)
    return settings


def reference_ini() -> str:
    """Every setting with its default, as a commented INI file."""
    lines = ["# d2d configuration reference (all keys optional; values shown are defaults)"]
    section = None
    for name, (default, typ, text) in DEFAULTS.items():
        sec, key = name.split(".", 1)
        if sec != section:
            lines += ["", f"[{sec}]"]
            section = sec
        value = str(default).lower() if typ is bool else default
        lines += [f"# {text} ({typ.__name__})", f"{key} = {value}"]
    return "\n".join(lines) + "\n"
