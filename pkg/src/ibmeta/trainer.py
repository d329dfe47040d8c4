"""Episodic meta-training, Adam, evaluation and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import gpvib, maml
from .autodiff import NonFiniteGradient, ParamSet, gradient
from .features import FeatureNet
from .kernels import LOG_OUT_SCALE, KernelSpec
from .linalg import NotPositiveDefinite
from .tasks import FromFile, Sinusoid, SyntheticClasses, Task, load_tasks, sample_task

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ibmeta-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("episode", "objective", "kl_term", "eval_metric", "wallclock_s")
MODEL_KINDS = ("gpvib", "maml", "stochastic-maml")


class TrainingAborted(RuntimeError):
    """Numerical failure during training; carries the last good parameters."""

    def __init__(self, message, params, rows):
        super().__init__(message)
        self.params = params
        self.rows = rows


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 20000
    meta_batch: int = 5
    lr: float = 1e-3
    out_scale_lr: float | None = 1e-4  # None: same as lr
    seed: int = 0
    eval_every: int = 500
    eval_tasks: int = 50
    record_wallclock: bool = False

    def __post_init__(self):
        if self.episodes < 0 or self.meta_batch < 1:
            raise ValueError("episodes must be >= 0 and meta_batch >= 1")
        if not self.lr > 0 or (self.out_scale_lr is not None and not self.out_scale_lr > 0):
            raise ValueError("learning rates must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One Adam minimization step with bias correction.

    ``lr`` is a float, a ``{name: lr}`` mapping, or a callable on the name.
    Returns the new parameters; ``state`` is updated in place.
    """
    state.step += 1
    t = state.step
    out = ParamSet()
    for name, p in params.items():
        g = grads[name].detach()
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"gradient for {name} is not finite")
        m = b1 * state.m.get(name, torch.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(g)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr(name) if callable(lr) else lr[name] if isinstance(lr, dict) else lr
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p.detach() - rate * m_hat / (torch.sqrt(v_hat) + eps)
    return out


def _lr_map(cfg: TrainConfig):
    def rate(name):
        if name == LOG_OUT_SCALE and cfg.out_scale_lr is not None:
            return cfg.out_scale_lr
        return cfg.lr

    return rate


def task_objective(kind, model, params, task: Task, rng):
    """(objective, kl) for one task; objective is maximized."""
    if kind == "gpvib":
        terms = gpvib.objective_terms(task, model, params, rng)
        return terms.objective, terms.kl
    if kind == "stochastic-maml":
        expected, kl = maml.stochastic_maml_terms_for(task, model, params, rng=rng)
        value = expected if model.cfg.beta == 0 else expected - model.cfg.beta * kl
        return value, kl.detach()
    return maml.maml_objective(task, model, params), torch.zeros(())


def score_task(kind, model, params, task: Task, inner_steps=None) -> float:
    """Query MSE (regression) or accuracy (classification) on one task."""
    if kind == "gpvib":
        enc = gpvib.fit(model, params, task.X_support, task.Y_support)
        pred = gpvib.predict(task.X_query, enc, model, params, rng=np.random.default_rng(0))
        if task.is_classification:
            return float((pred.labels == task.Y_query).mean())
        return float(((pred.mean - task.Y_query) ** 2).mean())
    steps = model.cfg.inner_steps_test if inner_steps is None else inner_steps
    return maml.query_mse(task, model, params, steps)


def metric_name(task_or_model) -> str:
    classification = getattr(task_or_model, "n_classes", None) is not None
    return "accuracy" if classification else "mse"


def task_seeds(seed: int, tag: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, tag]).integers(0, 2**31 - 1, size=n)


@dataclass
class TrainResult:
    params: ParamSet
    rows: list
    initial_metric: float
    final_metric: float


def meta_train(kind: str, gen, cfg: TrainConfig, model, params: ParamSet | None = None) -> TrainResult:
    """Average the per-task objective over a meta-batch and take an Adam ascent step."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    params = model.init_params(cfg.seed) if params is None else params.detached()
    task_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    eval_tasks = [sample_task(gen, int(s)) for s in task_seeds(cfg.seed, 2, cfg.eval_tasks)]
    state = AdamState()
    rate = _lr_map(cfg)
    rows = []
    start = time.perf_counter()

    def evaluate_now(p):
        return float(np.mean([score_task(kind, model, p, t) for t in eval_tasks])) if eval_tasks else math.nan

    def wallclock():
        return time.perf_counter() - start if cfg.record_wallclock else 0.0

    leaves = params.leaves()
    init_terms = [task_objective(kind, model, leaves, t, np.random.default_rng(0)) for t in eval_tasks]
    initial = evaluate_now(params)
    rows.append(
        {
            "episode": 0,
            "objective": float(np.mean([float(o.detach()) for o, _ in init_terms])) if init_terms else math.nan,
            "kl_term": float(np.mean([float(k.detach()) for _, k in init_terms])) if init_terms else math.nan,
            "eval_metric": initial,
            "wallclock_s": wallclock(),
        }
    )
    last_metric = initial
    for episode in range(1, cfg.episodes + 1):
        batch = [sample_task(gen, int(s)) for s in task_rng.integers(0, 2**31 - 1, size=cfg.meta_batch)]
        kls = []

        def batch_loss(p):
            total = 0.0
            kls.clear()
            for t in batch:
                obj, kl = task_objective(kind, model, p, t, noise_rng)
                total = total + obj
                kls.append(float(kl.detach()))
            return -total / len(batch)

        try:
            loss, grads = gradient(batch_loss, params)
            new_params = adam_step(params, grads, state, rate)
            if not all(torch.isfinite(v).all() for v in new_params.values()):
                raise NonFiniteGradient("parameters became non-finite")
        except (NonFiniteGradient, NotPositiveDefinite, FloatingPointError) as exc:
            log.error("aborting at episode %d: %s", episode, exc)
            raise TrainingAborted(f"episode {episode}: {exc}", params, rows) from exc
        params = new_params
        row = {
            "episode": episode,
            "objective": -float(loss),
            "kl_term": float(np.mean(kls)),
            "eval_metric": math.nan,
            "wallclock_s": wallclock(),
        }
        if cfg.eval_every and (episode % cfg.eval_every == 0 or episode == cfg.episodes):
            last_metric = row["eval_metric"] = evaluate_now(params)
            log.info("episode %d objective %.4f eval %.5f", episode, row["objective"], last_metric)
        rows.append(row)
    if cfg.episodes and not cfg.eval_every:
        last_metric = evaluate_now(params)
    return TrainResult(params, rows, initial, last_metric)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["episode"]] + [f"{r[c]:.9g}" for c in METRIC_COLUMNS[1:]])


@dataclass
class ShotResult:
    K: int
    metric: str
    mean: float
    ci95: float
    n_tasks: int
    values: list = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    metric: str
    mean: float
    ci95: float
    n_tasks: int
    per_shot: list

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "shots": [{"K": r.K, "metric": r.metric, "mean": r.mean, "ci95": r.ci95, "tasks": r.n_tasks} for r in self.per_shot],
        }


def ci95(values) -> float:
    """1.96 * std / sqrt(n); zero for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def with_shots(gen, K: int):
    if isinstance(gen, (Sinusoid, SyntheticClasses)):
        return dataclasses.replace(gen, shots=K)
    return gen


def evaluation_tasks(gen, K: int, n_tasks: int, seed: int = 1234) -> list:
    """Fresh tasks for K-shot evaluation; identical for every model given the seed."""
    if isinstance(gen, FromFile):
        return load_tasks(gen.path)[:n_tasks]
    spec = with_shots(gen, K)
    return [sample_task(spec, int(s)) for s in task_seeds(seed, 1000 + K, n_tasks)]


def evaluate(kind, model, params, gen, shots, n_tasks: int, inner_steps=None, seed: int = 1234) -> EvalReport:
    per_shot, pooled = [], []
    name = metric_name(model) if kind == "gpvib" else "mse"
    for K in shots:
        values = [score_task(kind, model, params, t, inner_steps) for t in evaluation_tasks(gen, K, n_tasks, seed)]
        pooled.extend(values)
        per_shot.append(ShotResult(K, name, float(np.mean(values)), ci95(values), len(values), values))
    return EvalReport(name, float(np.mean(pooled)), ci95(pooled), len(pooled), per_shot)


# -- checkpoints -------------------------------------------------------------


def model_to_record(kind: str, model) -> dict:
    if kind == "gpvib":
        cfg = dataclasses.asdict(model.cfg)
        return {"net": dataclasses.asdict(model.net), "vib": cfg, "n_classes": model.n_classes}
    return {"net": dataclasses.asdict(model.net), "maml": dataclasses.asdict(model.cfg), "stochastic": model.stochastic}


def model_from_record(kind: str, record: dict):
    net_rec = dict(record["net"])
    net_rec["hidden"] = tuple(net_rec["hidden"])
    net = FeatureNet(**net_rec)
    if kind == "gpvib":
        vib = dict(record["vib"])
        vib["kernel"] = KernelSpec(**vib["kernel"])
        return gpvib.GPVIB(net, gpvib.VibConfig(**vib), record["n_classes"])
    if kind in ("maml", "stochastic-maml"):
        return maml.MAML(net, maml.MamlConfig(**record["maml"]), record["stochastic"])
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class Checkpoint:
    kind: str
    model: object
    params: ParamSet
    config: dict = field(default_factory=dict)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "model": model_to_record(ckpt.kind, ckpt.model),
        "config": ckpt.config,
        "params": ckpt.params.to_record(),
    }
    Path(path).write_text(json.dumps(record, indent=1), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an ibmeta checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {record.get('version')}")
    try:
        kind = record["kind"]
        model = model_from_record(kind, record["model"])
        params = ParamSet.from_record(record["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return Checkpoint(kind, model, params, record.get("config", {}))
