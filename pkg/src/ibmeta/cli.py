"""Command-line entry point: ``ibmeta train|eval|predict|export-curves|sweep-beta``.

Exit codes: 0 success, 2 configuration / input / checkpoint errors, 3 a
numerical abort during training, 4 streaming requested for a kernel that
does not support it.  Numbers are printed with 9 significant digits.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config, gpvib, maml, trainer
from .linalg import NotPositiveDefinite
from .tasks import ParseError, Sinusoid, Task, load_tasks, sample_task, sinusoid

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_STREAM = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint"
METRICS_NAME = "metrics.csv"
RESOLVED_NAME = "config.resolved"

log = logging.getLogger("ibmeta")


class UsageError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def g9(x) -> str:
    return f"{float(x):.9g}"


def _round9(x) -> float:
    return float(g9(x))


def parse_shots(text: str) -> list:
    """``5,10,20`` or an inclusive range ``1..7``."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            shots = list(range(lo, hi + 1))
        else:
            shots = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad shot list {text!r}") from None
    if not shots or min(shots) < 0:
        raise UsageError(f"bad shot list {text!r}")
    return shots


def parse_grid(text: str) -> np.ndarray:
    try:
        a, b, n = text.split(":")
        grid = np.linspace(float(a), float(b), int(n))
    except ValueError:
        raise UsageError(f"bad grid {text!r}, expected a:b:n") from None
    if grid.size < 1:
        raise UsageError("grid needs at least one point")
    return grid


def _load_checkpoint(path) -> trainer.Checkpoint:
    try:
        return trainer.load_checkpoint(path)
    except trainer.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _task_spec(ckpt: trainer.Checkpoint):
    cfg = ckpt.config
    if not cfg:
        return Sinusoid()
    try:
        return config.build_task_spec(config.resolve(config.parse_text(cfg["text"])))
    except (KeyError, config.ConfigError) as exc:
        raise UsageError(f"checkpoint carries an unusable config: {exc}") from None


# -- train -------------------------------------------------------------------


def run_training(cfg: dict, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = config.dumps(cfg)
    (out_dir / RESOLVED_NAME).write_text(text, encoding="utf-8")
    kind, model = cfg["model"], config.build_model(cfg)
    try:
        result = trainer.meta_train(kind, config.build_task_spec(cfg), config.train_config(cfg), model)
        params, rows, code = result.params, result.rows, EXIT_OK
    except trainer.TrainingAborted as exc:
        print(f"error: numerical failure, {exc}; kept the last good parameters", file=sys.stderr)
        params, rows, code = exc.params, exc.rows, EXIT_NUMERIC
    trainer.save_checkpoint(out_dir / CHECKPOINT_NAME, trainer.Checkpoint(kind, model, params, {"text": text}))
    trainer.write_metrics(rows, out_dir / METRICS_NAME)
    return code


def cmd_train(args) -> int:
    try:
        cfg = config.load(args.config, seed=args.seed)
    except config.ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None
    return run_training(cfg, Path(args.out))


def cmd_sweep_beta(args) -> int:
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
        base = config.parse_text(Path(args.config).read_text(encoding="utf-8"))
    except (ValueError, OSError) as exc:
        raise UsageError(f"config error: {exc}") from None
    shots = parse_shots(args.shots)
    out = Path(args.out)
    code = EXIT_OK
    for beta in betas:
        raw = dict(base, beta=repr(beta))
        try:
            cfg = config.resolve(raw, Path(args.config).parent, args.seed)
        except config.ConfigError as exc:
            raise UsageError(f"config error: {exc}") from None
        run_dir = out / f"beta_{g9(beta)}"
        code = max(code, run_training(cfg, run_dir))
        ckpt = trainer.load_checkpoint(run_dir / CHECKPOINT_NAME)
        report = trainer.evaluate(ckpt.kind, ckpt.model, ckpt.params, config.build_task_spec(cfg), shots, args.tasks)
        print(json.dumps({"beta": _round9(beta), **_report_json(report)}))
    return code


# -- eval --------------------------------------------------------------------


def _report_json(report: trainer.EvalReport) -> dict:
    return {
        "shots": [
            {"K": r.K, "metric": r.metric, "mean": _round9(r.mean), "ci95": _round9(r.ci95)} for r in report.per_shot
        ]
    }


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    if args.inner_steps is not None and args.inner_steps < 0:
        raise UsageError("--inner-steps must be non-negative")
    if args.tasks < 1:
        raise UsageError("--tasks must be at least 1")
    report = trainer.evaluate(
        ckpt.kind, ckpt.model, ckpt.params, _task_spec(ckpt), parse_shots(args.shots), args.tasks, args.inner_steps, args.seed
    )
    print(json.dumps(_report_json(report)))
    return EXIT_OK


# -- predict -----------------------------------------------------------------


def _read_points(path, role_name: str):
    try:
        tasks = load_tasks(path)
    except ParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {role_name} file: {exc}") from None
    if not tasks:
        return None
    t = tasks[0]
    X = np.concatenate([t.X_support, t.X_query]) if t.X_query.size else t.X_support
    Y = np.concatenate([t.Y_support, t.Y_query])
    return Task(X, Y, np.zeros((0, X.shape[1])), np.zeros(0, dtype=Y.dtype), t.n_classes)


def cmd_predict(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model, params = ckpt.model, ckpt.params
    query = _read_points(args.query, "query")
    if query is None:
        raise UsageError("query file holds no points")
    support = _read_points(args.support, "support")
    X_star = query.X_support
    dim = model.net.input_dim
    if X_star.shape[1] != dim or (support is not None and support.X_support.size and support.X_support.shape[1] != dim):
        raise UsageError(f"inputs must have dimension {dim}")
    if support is None:
        X_t, Y_t = np.zeros((0, dim)), np.zeros(0, dtype=np.int64 if getattr(model, "n_classes", None) else np.float64)
    else:
        X_t, Y_t = support.X_support, support.Y_support

    if ckpt.kind != "gpvib":
        if args.stream:
            raise UsageError("--stream applies to GP-VIB checkpoints only")
        theta = {k: v.detach().requires_grad_(True) for k, v in maml.weights(params).items()}
        psi = maml.adapt(Task(X_t, Y_t, [], []), model, theta, steps=model.cfg.inner_steps_test, first_order=True) if len(Y_t) else theta
        with torch.no_grad():
            mean = maml.forward(X_star, model, psi).numpy()
        _write_rows(["mean", "var"], [[m, 0.0] for m in mean])
        return EXIT_OK

    if args.stream:
        try:
            state = gpvib.new_stream(model)
        except gpvib.StreamingUnsupported as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_STREAM
        for x, y in zip(X_t, Y_t):
            gpvib.stream_ingest(state, x, y, model, params)
        means, var = gpvib.stream_predict(state, X_star, model, params)
    else:
        enc = gpvib.fit(model, params, X_t, Y_t)
        with torch.no_grad():
            means, var = gpvib.marginal_q(X_star, enc, model, params)

    if model.n_classes is None:
        _write_rows(["mean", "var"], zip(means.numpy(), var.numpy()))
        return EXIT_OK
    noise = gpvib.draw_noise(np.random.default_rng(args.seed), model.cfg.mc_samples, len(X_star), model.n_classes)
    pred = gpvib.class_prediction(means, var, noise)
    header = [f"p_{n}" for n in range(model.n_classes)] + ["label"]
    _write_rows(header, ([*p, int(lbl)] for p, lbl in zip(pred.probs, pred.labels)))
    return EXIT_OK


def _write_rows(header, rows) -> None:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(str(v) if isinstance(v, (int, np.integer)) else g9(v) for v in row))
    sys.stdout.write("\n".join(out) + "\n")


# -- export-curves -----------------------------------------------------------


def curve_rows(model, params, spec: Sinusoid, shots, grid, n_tasks: int, seed: int):
    """Rows (task, K, x, mean, std, truth); each task's K-shot support is the
    first K points of one draw, so larger K only adds points."""
    rows = []
    big = dataclasses.replace(spec, shots=max(shots), query=0)
    for i, s in enumerate(trainer.task_seeds(seed, 2000, n_tasks)):
        task = sample_task(big, int(s))
        truth = sinusoid(grid, task.meta["amplitude"], task.meta["phase"])
        for K in shots:
            enc = gpvib.fit(model, params, task.X_support[:K], task.Y_support[:K])
            with torch.no_grad():
                mean, var = gpvib.marginal_q(grid[:, None], enc, model, params)
            std = np.sqrt(np.clip(var.numpy(), 0.0, None))
            rows.extend((i, K, x, m, sd, y) for x, m, sd, y in zip(grid, mean.numpy(), std, truth))
    return rows


def cmd_export_curves(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    spec = _task_spec(ckpt)
    if ckpt.kind != "gpvib" or ckpt.model.n_classes is not None or not isinstance(spec, Sinusoid):
        raise UsageError("export-curves needs a GP-VIB sinusoid regression checkpoint")
    rows = curve_rows(ckpt.model, ckpt.params, spec, parse_shots(args.shots), parse_grid(args.grid), args.tasks, args.seed)
    _write_rows(["task", "K", "x", "mean", "std", "truth"], rows)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibmeta", description="GP-VIB and MAML meta-learning on few-shot tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed and IBMETA_SEED")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="K-shot evaluation with 95%% confidence intervals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", default="5,10,20")
    p.add_argument("--tasks", type=int, default=1000)
    p.add_argument("--inner-steps", type=int, help="MAML test-time adaptation steps")
    p.add_argument("--seed", type=int, default=1234, help="seed of the evaluation task sample")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict query points from a support set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="task file; every row of its first task is support data")
    p.add_argument("--query", required=True, help="task file; every row of its first task is a query input")
    p.add_argument("--stream", action="store_true", help="ingest the support set point by point")
    p.add_argument("--seed", type=int, default=0, help="seed of the Monte Carlo class probabilities")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-curves", help="posterior mean/std on a grid for growing K")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", default="1,2,3,4,5,7")
    p.add_argument("--grid", default="-5:5:101")
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_export_curves)

    p = sub.add_parser("sweep-beta", help="train and evaluate once per beta value")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", required=True, help="comma-separated beta values")
    p.add_argument("--out", required=True)
    p.add_argument("--shots", default="5,10,20")
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep_beta)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NotPositiveDefinite, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
