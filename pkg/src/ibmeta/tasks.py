"""Task distributions and the line-oriented task file format.

A task file holds any number of tasks.  Each starts with a header line::

    #task kind=regression shots=5 amplitude=1.3 phase=0.2
    #task kind=classification:5 shots=1

followed by one row per point, ``s(x_1,...,x_d)=y`` for support points and
``q(...)=y`` for query points.  Extra ``key=value`` header fields are kept in
``Task.meta``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _as_rows(X, n: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and len(X) == n:
        return X
    return X.reshape(n, -1) if n else X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)


@dataclass
class Task:
    X_support: np.ndarray
    Y_support: np.ndarray
    X_query: np.ndarray
    Y_query: np.ndarray
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X_support = _as_rows(self.X_support, len(self.Y_support))
        self.X_query = _as_rows(self.X_query, len(self.Y_query))
        ydtype = np.float64 if self.n_classes is None else np.int64
        self.Y_support = np.asarray(self.Y_support, dtype=ydtype)
        self.Y_query = np.asarray(self.Y_query, dtype=ydtype)
        if self.n_classes is not None:
            for y in (self.Y_support, self.Y_query):
                if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                    raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    @property
    def dim(self) -> int:
        return self.X_support.shape[1] if self.X_support.size else self.X_query.shape[1]

    @property
    def shots(self) -> int:
        n = len(self.Y_support)
        return n // self.n_classes if self.is_classification else n

    def with_support(self, idx) -> "Task":
        """Same task restricted to the support points at ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        return Task(self.X_support[idx], self.Y_support[idx], self.X_query, self.Y_query, self.n_classes, dict(self.meta))

    def permute_labels(self, perm) -> "Task":
        """Relabel classes: old label ``n`` becomes ``perm[n]``."""
        perm = np.asarray(perm)
        return Task(self.X_support, perm[self.Y_support], self.X_query, perm[self.Y_query], self.n_classes, dict(self.meta))


def sinusoid(x, amplitude, phase):
    return amplitude * np.sin(np.asarray(x) + phase)


@dataclass(frozen=True)
class Sinusoid:
    amp_range: tuple = (0.1, 5.0)
    phase_range: tuple = (0.0, math.pi)
    x_range: tuple = (-5.0, 5.0)
    shots: int = 10
    query: int = 50

    def __post_init__(self):
        if self.shots < 0 or self.query < 0:
            raise ValueError("shots and query must be non-negative")
        for name in ("amp_range", "phase_range", "x_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty")


@dataclass(frozen=True)
class SyntheticClasses:
    """Gaussian class clusters: centers ~ N(0, center_scale^2 I), points ~ N(center, spread^2 I)."""

    ways: int = 5
    shots: int = 5
    query_per_class: int = 15
    dim: int = 16
    spread: float = 1.0
    center_scale: float = 2.0

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("classification needs at least 2 ways")
        if self.shots < 1:
            raise ValueError("shots must be at least 1")


@dataclass(frozen=True)
class FromFile:
    path: str


def sample_task(spec, seed: int) -> Task:
    rng = np.random.default_rng(seed)
    if isinstance(spec, Sinusoid):
        amplitude = rng.uniform(*spec.amp_range)
        phase = rng.uniform(*spec.phase_range)
        x = rng.uniform(*spec.x_range, size=spec.shots + spec.query)
        y = sinusoid(x, amplitude, phase)
        k = spec.shots
        return Task(x[:k, None], y[:k], x[k:, None], y[k:], meta={"amplitude": amplitude, "phase": phase})
    if isinstance(spec, SyntheticClasses):
        centers = spec.center_scale * rng.standard_normal((spec.ways, spec.dim))
        n_t, n_v = spec.ways * spec.shots, spec.ways * spec.query_per_class
        y_t = rng.permutation(np.repeat(np.arange(spec.ways), spec.shots))
        y_v = rng.permutation(np.repeat(np.arange(spec.ways), spec.query_per_class))
        X_t = centers[y_t] + spec.spread * rng.standard_normal((n_t, spec.dim))
        X_v = centers[y_v] + spec.spread * rng.standard_normal((n_v, spec.dim))
        return Task(X_t, y_t, X_v, y_v, n_classes=spec.ways)
    if isinstance(spec, FromFile):
        tasks = load_tasks(spec.path)
        if not tasks:
            raise ValueError(f"{spec.path} holds no tasks")
        return tasks[seed % len(tasks)]
    raise TypeError(f"unsupported task spec {type(spec).__name__}")


def bayes_oracle_predict(task: Task, spec: SyntheticClasses) -> np.ndarray:
    """Bayes-optimal labels for the query set given the support set.

    Each class center has a conjugate Gaussian posterior given its support
    points, so the predictive for a new point of class n is
    N(mu_n, (spread^2 + v_n) I).  Class priors are uniform.
    """
    tau2, sigma2 = spec.center_scale**2, spec.spread**2
    scores = np.empty((len(task.Y_query), spec.ways))
    for n in range(spec.ways):
        pts = task.X_support[task.Y_support == n]
        precision = 1.0 / tau2 + len(pts) / sigma2
        mu = pts.sum(0) / sigma2 / precision
        var = sigma2 + 1.0 / precision
        d2 = ((task.X_query - mu) ** 2).sum(1)
        scores[:, n] = -0.5 * d2 / var - 0.5 * spec.dim * np.log(var)
    return scores.argmax(1)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, field: str | None = None):
        where = f"line {line}" + (f", field {field}" if field else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.field = field


_ROW = re.compile(r"^([sq])\((.*)\)=(.*)$")


def _fmt(v: float) -> str:
    return repr(float(v))


def save_tasks(tasks, path) -> None:
    lines = []
    for t in tasks:
        kind = "regression" if not t.is_classification else f"classification:{t.n_classes}"
        extra = "".join(f" {k}={_fmt(v)}" for k, v in t.meta.items())
        lines.append(f"#task kind={kind} shots={t.shots}{extra}")
        for role, X, Y in (("s", t.X_support, t.Y_support), ("q", t.X_query, t.Y_query)):
            for x, y in zip(X, Y):
                yv = str(int(y)) if t.is_classification else _fmt(y)
                lines.append(f"{role}({','.join(_fmt(v) for v in x)})={yv}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _parse_header(text: str, lineno: int):
    fields = dict(kv.split("=", 1) for kv in text.split()[1:] if "=" in kv)
    kind = fields.pop("kind", None)
    if kind is None:
        raise ParseError("task header lacks kind=", lineno, "kind")
    fields.pop("shots", None)
    if kind == "regression":
        n_classes = None
    elif kind.startswith("classification:"):
        try:
            n_classes = int(kind.split(":", 1)[1])
        except ValueError:
            raise ParseError(f"bad class count in {kind!r}", lineno, "kind") from None
    else:
        raise ParseError(f"unknown task kind {kind!r}", lineno, "kind")
    meta = {}
    for k, v in fields.items():
        try:
            meta[k] = float(v)
        except ValueError:
            raise ParseError(f"header value {v!r} is not a number", lineno, k) from None
    return n_classes, meta


def load_tasks(path) -> list:
    tasks, current = [], None

    def finish():
        if current is not None:
            n_classes, meta, rows = current
            dim = len(rows[0][1]) if rows else 0
            parts = {}
            for role in "sq":
                xs = [x for r, x, _ in rows if r == role]
                ys = [y for r, _, y in rows if r == role]
                parts[role] = (np.asarray(xs, dtype=np.float64).reshape(len(xs), dim), ys)
            try:
                tasks.append(Task(*parts["s"], *parts["q"], n_classes=n_classes, meta=meta))
            except ValueError as exc:
                raise ParseError(str(exc), current_start) from None

    current_start = 0
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#task"):
            finish()
            current = (*_parse_header(line, lineno), [])
            current_start = lineno
            continue
        if line.startswith("#"):
            continue
        if current is None:
            raise ParseError("data row before any #task header", lineno)
        m = _ROW.match(line)
        if not m:
            raise ParseError(f"malformed row {line!r}", lineno)
        role, xs, ys = m.groups()
        try:
            x = [float(v) for v in xs.split(",")] if xs.strip() else []
        except ValueError:
            raise ParseError(f"bad input vector {xs!r}", lineno, "x") from None
        n_classes, _, rows = current
        if rows and len(x) != len(rows[0][1]):
            raise ParseError("input dimension differs from earlier rows", lineno, "x")
        try:
            if n_classes is None:
                y = float(ys)
            else:
                y = int(ys)
                if not 0 <= y < n_classes:
                    raise ValueError
        except ValueError:
            raise ParseError(f"bad label {ys!r} in row {lineno}", lineno, "y") from None
        rows.append((role, x, y))
    finish()
    return tasks
