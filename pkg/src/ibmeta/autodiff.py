"""Parameter containers and reverse-mode gradients.

The tape is torch's autograd graph: every objective is written with torch
ops (including ``torch.linalg.cholesky`` and triangular solves, whose
backward rules torch provides), and ``gradient`` runs one backward pass over
it.  ``check_gradient`` is the independent finite-difference check.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

from .linalg import DTYPE


class NonFiniteGradient(FloatingPointError):
    pass


class ParamSet(dict):
    """Ordered mapping of parameter name to float64 tensor.

    Names are dotted (``net.w0``, ``heads.m_tilde``, ``kernel.log_out_scale``);
    the prefix before the first dot is the parameter group.
    """

    def __init__(self, *args, **kwargs):
        super().__init__()
        for k, v in dict(*args, **kwargs).items():
            self[k] = v

    def __setitem__(self, name, value):
        value = value if isinstance(value, torch.Tensor) else torch.as_tensor(np.asarray(value, np.float64))
        super().__setitem__(name, value.to(DTYPE))

    @property
    def size(self) -> int:
        return sum(v.numel() for v in self.values())

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.detach().reshape(-1).numpy() for v in self.values()])

    def unflatten(self, flat) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} values, got {flat.shape}")
        out, i = ParamSet(), 0
        for name, v in self.items():
            n = v.numel()
            out[name] = torch.from_numpy(flat[i : i + n].copy()).reshape(v.shape)
            i += n
        return out

    def detached(self) -> "ParamSet":
        return ParamSet({k: v.detach().clone() for k, v in self.items()})

    def leaves(self) -> "ParamSet":
        """Fresh copies that require grad, ready to record a new tape."""
        return ParamSet({k: v.detach().clone().requires_grad_(True) for k, v in self.items()})

    def to_record(self) -> dict:
        return {k: {"shape": list(v.shape), "values": v.detach().reshape(-1).tolist()} for k, v in self.items()}

    @classmethod
    def from_record(cls, record: Mapping) -> "ParamSet":
        out = cls()
        for k, entry in record.items():
            values = np.asarray(entry["values"], dtype=np.float64)
            out[k] = torch.from_numpy(values).reshape(entry["shape"])
        return out


def gradient(objective: Callable[[ParamSet], torch.Tensor], params: ParamSet, create_graph: bool = False):
    """Evaluate ``objective(params)`` and its gradient w.r.t. every parameter.

    Returns ``(value, grads)`` where ``grads`` is a ParamSet with zeros for
    parameters the objective does not touch.
    """
    leaves = params.leaves()
    value = objective(leaves)
    if value.ndim != 0:
        raise ValueError("objective must be a scalar")
    if not torch.isfinite(value):
        raise NonFiniteGradient(f"objective is {float(value)}")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True, create_graph=create_graph)
    out = ParamSet()
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        out[name] = g if create_graph else g.detach()
    return value.detach(), out


def check_gradient(f: Callable[[ParamSet], torch.Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    _, grads = gradient(f, params)
    analytic = grads.flatten()
    x0 = params.flatten()
    worst = 0.0
    # no torch.no_grad here: objectives with an inner gradient loop need the tape
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        num = (float(f(params.unflatten(xp)).detach()) - float(f(params.unflatten(xm)).detach())) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(num), 1e-8)
        worst = max(worst, abs(analytic[i] - num) / denom)
    return worst
