"""Flat ``key = value`` run configuration.

One file describes a whole run: task family, model, and training settings.
Lines starting with ``#`` are comments.  Unknown keys are rejected, and keys
left out are filled with defaults that depend on the model and task kind;
``resolve`` returns the fully-defaulted mapping that ``config.resolved``
records.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

from . import gpvib, maml
from .features import FeatureNet
from .kernels import KernelSpec
from .tasks import FromFile, Sinusoid, SyntheticClasses, load_tasks
from .trainer import MODEL_KINDS, TrainConfig

SEED_ENV = "IBMETA_SEED"
TASK_KINDS = ("sinusoid", "classes", "file")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _pair(text):
    lo, hi = (float(v) for v in text.split(","))
    return (lo, hi)


def _opt_float(text):
    return None if text.lower() in ("none", "learned", "") else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


# key -> parser; None defaults are filled in by ``resolve``
KEYS = {
    "model": _choice(*MODEL_KINDS),
    "task": _choice(*TASK_KINDS),
    "task_file": str,
    "shots": int,
    "query": int,
    "amp_range": _pair,
    "phase_range": _pair,
    "x_range": _pair,
    "ways": int,
    "query_per_class": int,
    "dim": int,
    "spread": float,
    "center_scale": float,
    "hidden": _ints,
    "activation": _choice("relu", "tanh"),
    "augment": _bool,
    "beta": float,
    "mc_samples": int,
    "kernel": _choice("linear", "cosine"),
    "kernel_variance": _opt_float,
    "log_out_scale_init": float,
    "encoder": _choice(*gpvib.ENCODERS),
    "noise_init": float,
    "solver": _choice(*gpvib.SOLVERS),
    "inner_lr": float,
    "inner_steps_train": int,
    "inner_steps_test": int,
    "first_order": _bool,
    "s_init": float,
    "episodes": int,
    "meta_batch": int,
    "lr": float,
    "out_scale_lr": _opt_float,
    "seed": int,
    "eval_every": int,
    "eval_tasks": int,
}


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str) -> dict:
    """Raw ``{key: string}`` mapping; syntax errors name the line."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key (line {lineno})", key)
        if key in raw:
            raise ConfigError(f"duplicate key (line {lineno})", key)
        raw[key] = value
    return raw


def _typed(raw: dict) -> dict:
    out = {}
    for key, text in raw.items():
        try:
            out[key] = KEYS[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value {text!r} ({exc})", key) from None
    return out


def resolve(raw: dict, base_dir=".", seed: int | None = None) -> dict:
    """Typed, fully-defaulted configuration.

    ``seed`` (from the command line) beats ``IBMETA_SEED``, which beats the
    file.  ``task_file`` is resolved relative to ``base_dir`` and must exist.
    """
    cfg = _typed(raw)
    model = cfg.setdefault("model", "gpvib")
    task = cfg.setdefault("task", "sinusoid")
    if task == "file":
        if "task_file" not in cfg:
            raise ConfigError("task = file needs task_file", "task_file")
        path = (Path(base_dir) / cfg["task_file"]).resolve()
        if not path.is_file():
            raise ConfigError(f"no such file {path}", "task_file")
        cfg["task_file"] = str(path)
        try:
            sample = load_tasks(path)
        except ValueError as exc:
            raise ConfigError(str(exc), "task_file") from None
        classification = bool(sample) and sample[0].is_classification
        if classification:
            cfg.setdefault("ways", sample[0].n_classes)
    else:
        cfg.setdefault("task_file", None)
        classification = task == "classes"
    if classification and model != "gpvib":
        raise ConfigError("MAML baselines are regression-only", "model")

    sin, cls = Sinusoid(), SyntheticClasses()
    defaults = {
        "shots": cls.shots if classification else sin.shots,
        "query": sin.query,
        "amp_range": sin.amp_range,
        "phase_range": sin.phase_range,
        "x_range": sin.x_range,
        "ways": cls.ways,
        "query_per_class": cls.query_per_class,
        "dim": cls.dim,
        "spread": cls.spread,
        "center_scale": cls.center_scale,
        "hidden": (64, 64) if classification else (40, 40),
        "activation": "relu",
        "augment": model == "gpvib",
        "beta": (0.001 if classification else 1.0) if model == "gpvib" else 0.0,
        "mc_samples": 200 if model == "gpvib" else 1,
        "kernel": "linear",
        "kernel_variance": None,
        "log_out_scale_init": 0.0,
        "encoder": "simplified" if classification else "exact",
        "noise_init": 0.01,
        "solver": "direct",
        "inner_lr": 0.01,
        "inner_steps_train": 1,
        "inner_steps_test": 10,
        "first_order": False,
        "s_init": 1e-4,
        "episodes": TrainConfig.episodes,
        "meta_batch": 4 if classification else 5,
        "lr": TrainConfig.lr,
        "out_scale_lr": TrainConfig.out_scale_lr if classification else None,
        "seed": 0,
        "eval_every": TrainConfig.eval_every,
        "eval_tasks": TrainConfig.eval_tasks,
    }
    for key, value in defaults.items():
        cfg.setdefault(key, value)
    if cfg["kernel_variance"] is None and not classification and "kernel_variance" not in raw:
        # sinusoid convention: sigma_f^2 fixed to 1/M
        cfg["kernel_variance"] = 1.0 / (cfg["hidden"][-1] + int(cfg["augment"]))
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer", "seed") from None
    if seed is not None:
        cfg["seed"] = seed
    cfg["classification"] = classification
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    for key in ("noise_init", "s_init", "spread", "center_scale"):
        if not cfg[key] > 0:
            raise ConfigError("must be positive", key)
    try:
        build_task_spec(cfg)
        build_model(cfg)
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path, seed: int | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return resolve(parse_text(text), path.parent, seed)


def dumps(cfg: dict) -> str:
    """Resolved configuration as text that ``parse_text`` reads back."""
    return "".join(f"{key} = {_fmt(cfg[key])}\n" for key in KEYS if key != "task_file" or cfg.get(key) is not None)


def build_task_spec(cfg: dict):
    if cfg["task"] == "file":
        return FromFile(cfg["task_file"])
    if cfg["task"] == "classes":
        return SyntheticClasses(
            cfg["ways"], cfg["shots"], cfg["query_per_class"], cfg["dim"], cfg["spread"], cfg["center_scale"]
        )
    return Sinusoid(cfg["amp_range"], cfg["phase_range"], cfg["x_range"], cfg["shots"], cfg["query"])


def build_model(cfg: dict):
    net = FeatureNet(cfg["dim"] if cfg["task"] == "classes" else _input_dim(cfg), cfg["hidden"], cfg["activation"], cfg["augment"])
    if cfg["model"] == "gpvib":
        kernel = KernelSpec(cfg["kernel"], cfg["kernel_variance"], cfg["log_out_scale_init"])
        vib = gpvib.VibConfig(cfg["beta"], cfg["mc_samples"], kernel, cfg["encoder"], math.log(cfg["noise_init"]), cfg["solver"])
        return gpvib.GPVIB(net, vib, cfg["ways"] if cfg["classification"] else None)
    mcfg = maml.MamlConfig(
        cfg["inner_lr"],
        cfg["inner_steps_train"],
        cfg["inner_steps_test"],
        cfg["beta"],
        cfg["mc_samples"],
        cfg["first_order"],
        math.log(cfg["s_init"]),
    )
    return maml.MAML(net, mcfg, stochastic=cfg["model"] == "stochastic-maml")


def _input_dim(cfg: dict) -> int:
    if cfg["task"] != "file":
        return 1
    tasks = load_tasks(cfg["task_file"])
    return tasks[0].dim if tasks else 1


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        cfg["episodes"], cfg["meta_batch"], cfg["lr"], cfg["out_scale_lr"], cfg["seed"], cfg["eval_every"], cfg["eval_tasks"]
    )
