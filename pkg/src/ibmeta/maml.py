"""MAML and stochastic MAML as VIB special cases.

MAML uses a Dirac encoder at psi = theta + Delta(theta, D^t); the stochastic
variant widens it to N(theta + Delta, diag(s)) and pays beta * KL against the
prior N(theta, diag(s)), i.e. 0.5 * sum(Delta^2 / s).

The generic functions take log-likelihood callables so they can be checked
on toy problems; ``MAML`` wires them to a small regression network whose
log-likelihood is the negative mean squared error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import NonFiniteGradient, ParamSet
from .features import FeatureNet, phi
from .linalg import as_tensor
from .tasks import Task

NOISE_PREFIX = "noise."


@dataclass(frozen=True)
class MamlConfig:
    inner_lr: float = 0.01
    inner_steps_train: int = 1
    inner_steps_test: int = 10
    beta: float = 0.0
    mc_samples: int = 1
    first_order: bool = False
    log_s_init: float = math.log(1e-4)

    def __post_init__(self):
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be positive")
        if self.inner_steps_train < 0 or self.inner_steps_test < 0:
            raise ValueError("inner step counts must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")


def inner_adapt(theta: dict, support_loglik, rho: float, steps: int, first_order: bool = False) -> dict:
    """``steps`` full-batch gradient-ascent updates of ``support_loglik``.

    Second-order by default: the returned tensors stay differentiable w.r.t.
    ``theta`` through every step.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    # constants get promoted to leaves so the support gradient exists
    psi = {k: v if v.requires_grad else as_tensor(v).detach().requires_grad_(True) for k, v in theta.items()}
    names = list(psi)
    for _ in range(steps):
        ll = support_loglik(psi)
        grads = torch.autograd.grad(ll, [psi[k] for k in names], create_graph=not first_order, allow_unused=True)
        for k, g in zip(names, grads):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"inner-loop gradient for {k} is not finite")
            psi[k] = psi[k] + rho * (g.detach() if first_order else g)
    return psi


def kl_penalty(delta, s) -> torch.Tensor:
    """KL[N(theta + delta, diag s) || N(theta, diag s)] = 0.5 * sum(delta^2 / s).

    Coordinates with delta = 0 contribute nothing, even when s = 0.
    """
    delta, s = as_tensor(delta), as_tensor(s)
    terms = delta**2 / s
    return 0.5 * torch.where(delta == 0, torch.zeros_like(terms), terms).sum()


def maml_value(theta: dict, support_loglik, query_loglik, rho, steps, first_order=False) -> torch.Tensor:
    return query_loglik(inner_adapt(theta, support_loglik, rho, steps, first_order))


def stochastic_maml_terms(theta: dict, s: dict, support_loglik, query_loglik, rho, steps, eps, first_order=False):
    """(MC estimate of E_eps[log p(D^v | psi + sqrt(s) eps)], KL to the prior).

    ``eps`` is a list of dicts of standard-normal draws (one per MC sample),
    treated as constants on the tape.
    """
    psi = inner_adapt(theta, support_loglik, rho, steps, first_order)
    values = []
    for draw in eps:
        sample = {k: psi[k] + torch.sqrt(s[k]) * draw[k] if k in s else psi[k] for k in psi}
        values.append(query_loglik(sample))
    kl = sum((kl_penalty(psi[k] - theta[k], s[k]) for k in s), torch.zeros(()))
    return torch.stack(values).mean(), kl


def stochastic_maml_value(theta, s, support_loglik, query_loglik, rho, steps, beta, eps, first_order=False):
    expected, kl = stochastic_maml_terms(theta, s, support_loglik, query_loglik, rho, steps, eps, first_order)
    return expected if beta == 0 else expected - beta * kl


@dataclass(frozen=True)
class MAML:
    """Regression network for MAML: feature layers plus a linear output."""

    net: FeatureNet = field(default_factory=lambda: FeatureNet(1, (40, 40), "relu", augment=False))
    cfg: MamlConfig = field(default_factory=MamlConfig)
    stochastic: bool = False

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        params = self.net.init_params(rng)
        width = self.net.out_dim
        limit = np.sqrt(6.0 / (width + 1))
        params["net.w_out"] = rng.uniform(-limit, limit, size=width)
        params["net.b_out"] = 0.0
        if self.stochastic:
            for k in list(params):
                params[NOISE_PREFIX + k] = np.full(params[k].shape, self.cfg.log_s_init)
        return params


def weights(params: dict) -> dict:
    return {k: v for k, v in params.items() if not k.startswith(NOISE_PREFIX)}


def variances(params: dict) -> dict:
    return {k[len(NOISE_PREFIX) :]: torch.exp(v) for k, v in params.items() if k.startswith(NOISE_PREFIX)}


def forward(X, model: MAML, params: dict) -> torch.Tensor:
    h = phi(as_tensor(X).reshape(-1, model.net.input_dim), model.net, params)
    return h @ params["net.w_out"] + params["net.b_out"]


def loglik(X, Y, model: MAML, params: dict) -> torch.Tensor:
    """Negative mean squared error, the log-likelihood used in both loops."""
    return -((forward(X, model, params) - as_tensor(Y)) ** 2).mean()


def _loglik_fns(task: Task, model: MAML):
    def support(p):
        return loglik(task.X_support, task.Y_support, model, p)

    def query(p):
        return loglik(task.X_query, task.Y_query, model, p)

    return support, query


def adapt(task: Task, model: MAML, params: dict, steps: int | None = None, first_order: bool | None = None) -> dict:
    steps = model.cfg.inner_steps_train if steps is None else steps
    first_order = model.cfg.first_order if first_order is None else first_order
    support, _ = _loglik_fns(task, model)
    return inner_adapt(weights(params), support, model.cfg.inner_lr, steps, first_order)


def maml_objective(task: Task, model: MAML, params: dict, steps: int | None = None) -> torch.Tensor:
    """Query log-likelihood after inner-loop adaptation on the support set."""
    steps = model.cfg.inner_steps_train if steps is None else steps
    support, query = _loglik_fns(task, model)
    return maml_value(weights(params), support, query, model.cfg.inner_lr, steps, model.cfg.first_order)


def draw_eps(rng: np.random.Generator, params: dict, samples: int) -> list:
    w = weights(params)
    return [{k: torch.from_numpy(rng.standard_normal(tuple(v.shape))) for k, v in w.items()} for _ in range(samples)]


def stochastic_maml_terms_for(task: Task, model: MAML, params: dict, rng=None, eps=None, s=None, steps=None):
    steps = model.cfg.inner_steps_train if steps is None else steps
    s = variances(params) if s is None else {k: as_tensor(v) for k, v in s.items()}
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = draw_eps(rng, params, model.cfg.mc_samples)
    support, query = _loglik_fns(task, model)
    return stochastic_maml_terms(weights(params), s, support, query, model.cfg.inner_lr, steps, eps, model.cfg.first_order)


def stochastic_maml_objective(task: Task, model: MAML, params: dict, rng=None, eps=None, s=None, steps=None):
    """Stochastic MAML objective; ``s`` overrides the learned variances."""
    expected, kl = stochastic_maml_terms_for(task, model, params, rng, eps, s, steps)
    return expected if model.cfg.beta == 0 else expected - model.cfg.beta * kl


def objective(task: Task, model: MAML, params: dict, rng=None) -> torch.Tensor:
    if model.stochastic:
        return stochastic_maml_objective(task, model, params, rng=rng)
    return maml_objective(task, model, params)


def query_mse(task: Task, model: MAML, params: dict, steps: int) -> float:
    """Adapt with ``steps`` inner updates (first order, no tape kept) and score the query set."""
    theta = {k: v.detach().requires_grad_(True) for k, v in weights(params).items()}
    psi = adapt(task, model, theta, steps=steps, first_order=True)
    with torch.no_grad():
        return float(((forward(task.X_query, model, psi) - as_tensor(task.Y_query)) ** 2).mean())
