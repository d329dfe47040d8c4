"""GP encoders, the per-task VIB objective, prediction and streaming.

The encoder for a support set is q(f^t) = N(K (K+S)^-1 m, K - K (K+S)^-1 K)
with diagonal S.  Everything downstream only needs the univariate marginals

    q(f_j) = N(k_j (K+S)^-1 m, k_jj - k_j (K+S)^-1 k_j^T)

at support, query or test inputs, plus log N(m | 0, K+S).  Two solvers compute
them: ``direct`` factors the n x n matrix K+S, ``woodbury`` factors an M x M
matrix built from the kernel features.  Classification uses one latent
function per class; the classes share S and the Cholesky factor and differ
only in their signed mean vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import linalg
from .autodiff import ParamSet
from .features import EncoderHeads, FeatureNet, class_mean_vectors, m_tilde_values, phi, s_values
from .kernels import KernelSpec, gram_from_features, kernel_features
from .linalg import DTYPE, LOG_2PI, GaussianNd, as_tensor
from .tasks import Task

LOG_NOISE = "lik.log_noise"
MIN_NOISE = 1e-6
ENCODERS = ("exact", "amortized", "simplified")
SOLVERS = ("direct", "woodbury")


class StreamingUnsupported(ValueError):
    pass


@dataclass(frozen=True)
class VibConfig:
    beta: float = 1.0
    mc_samples: int = 200
    kernel: KernelSpec = field(default_factory=KernelSpec)
    encoder: str = "exact"
    log_noise_init: float = math.log(0.01)
    solver: str = "direct"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class GPVIB:
    """A GP-VIB model: feature net + kernel + encoder choice.

    ``n_classes`` is None for regression.
    """

    net: FeatureNet
    cfg: VibConfig = field(default_factory=VibConfig)
    n_classes: int | None = None

    def __post_init__(self):
        if self.n_classes is not None and self.cfg.encoder == "exact":
            raise ValueError("the exact-posterior encoder needs a Gaussian likelihood (regression)")

    @property
    def heads(self) -> EncoderHeads | None:
        return None if self.cfg.encoder == "exact" else EncoderHeads(self.cfg.encoder)

    def init_params(self, seed: int) -> ParamSet:
        params = self.net.init_params(np.random.default_rng(seed))
        params.update(self.cfg.kernel.init_params())
        if self.heads is not None:
            params.update(self.heads.init_params(self.net.out_dim))
        if self.n_classes is None:
            params[LOG_NOISE] = self.cfg.log_noise_init
        return params


def noise_variance(params: ParamSet) -> torch.Tensor:
    return torch.exp(torch.clamp(params[LOG_NOISE], min=math.log(MIN_NOISE)))


def _expected_gauss_loglik(y, mean, var, noise):
    """E_{N(f|mean,var)}[log N(y | f, noise)], elementwise."""
    return -0.5 * LOG_2PI - 0.5 * torch.log(noise) - 0.5 * ((y - mean) ** 2 + var) / noise


def _sorted_sum(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # order-independent reduction: exact invariance under class relabeling
    return torch.sort(x, dim=dim).values.sum(dim)


def _logsumexp_sorted(f: torch.Tensor) -> torch.Tensor:
    fs = torch.sort(f, dim=-1).values
    top = fs[..., -1:]
    return top.squeeze(-1) + torch.log(torch.exp(fs - top).sum(-1))


def _columns(B: torch.Tensor):
    return [B[:, i] for i in range(B.shape[1])]


class FittedEncoder:
    """q(f^t | D^t) for one support set, ready to produce marginals anywhere.

    ``P`` holds the kernel features of the support inputs (Gram = c P P^T),
    ``m`` is (n, N) with one column per latent function and ``s`` the
    diagonal of S.
    """

    def __init__(self, P, out_scale, m, s, solver="direct"):
        self.P, self.c, self.m, self.s, self.solver = P, out_scale, m, s, solver
        self.n = P.shape[0]
        self.n_latent = m.shape[1]
        if self.n == 0:
            return
        if solver == "direct":
            self.K = gram_from_features(P, out_scale)
            self.L = linalg.cholesky(self.K + torch.diag(s))
            self.alpha = [linalg.cho_solve(self.L, col) for col in _columns(m)]
        else:
            scaled = P / s.unsqueeze(-1)
            A = P.mT @ scaled
            A = 0.5 * (A + A.mT) + torch.eye(P.shape[1], dtype=DTYPE) / out_scale
            self.LA = linalg.cholesky(A)
            self.b = [scaled.mT @ col for col in _columns(m)]

    def marginals(self, Px):
        """Means (k, N) and shared variances (k,) of q(f) at feature rows ``Px``."""
        prior_var = self.c * (Px**2).sum(-1)
        if self.n == 0:
            return torch.zeros(Px.shape[0], self.n_latent, dtype=DTYPE), prior_var
        if self.solver == "direct":
            kx = gram_from_features(Px, self.c, self.P)
            means = torch.stack([kx @ a for a in self.alpha], dim=-1)
            v = linalg.solve_triangular(self.L, kx.mT)
            return means, prior_var - (v**2).sum(0)
        means = torch.stack([linalg.posterior_from_stats(self.LA, b, Px)[0] for b in self.b], dim=-1)
        v = linalg.solve_triangular(self.LA, Px.mT)
        return means, (v**2).sum(0)

    def log_evidence_terms(self) -> torch.Tensor:
        """log N(m_n | 0, K + S) for every latent column n."""
        if self.n == 0:
            return torch.zeros(self.n_latent, dtype=DTYPE)
        const = -0.5 * self.n * LOG_2PI
        if self.solver == "direct":
            logdet = linalg.log_det_from_chol(self.L)
            quads = [col @ a for col, a in zip(_columns(self.m), self.alpha)]
        else:
            M = self.P.shape[1]
            logdet = torch.log(self.s).sum() + linalg.log_det_from_chol(self.LA) + M * torch.log(as_tensor(self.c))
            quads = [
                (col**2 / self.s).sum() - (linalg.solve_triangular(self.LA, b) ** 2).sum()
                for col, b in zip(_columns(self.m), self.b)
            ]
        return torch.stack([const - 0.5 * logdet - 0.5 * q for q in quads])

    def joint(self, column: int = 0) -> GaussianNd:
        """The full joint Gaussian over f^t for one latent function."""
        K = gram_from_features(self.P, self.c)
        L = linalg.cholesky(K + torch.diag(self.s))
        V = linalg.solve_triangular(L, K)
        cov = K - V.mT @ V
        mean = K @ linalg.cho_solve(L, self.m[:, column])
        return GaussianNd(mean, 0.5 * (cov + cov.mT))


def support_features(model: GPVIB, params: ParamSet, X):
    Phi = phi(as_tensor(X).reshape(len(X), model.net.input_dim), model.net, params)
    P, c = kernel_features(Phi, model.cfg.kernel, params)
    return Phi, P, c


def encoder_inputs(model: GPVIB, params: ParamSet, X, Y):
    """Features and the (m, s) pair that define q(f^t) for support data (X, Y)."""
    Phi, P, c = support_features(model, params, X)
    n = Phi.shape[0]
    if model.n_classes is None:
        m = as_tensor(Y).reshape(n, 1)
        if model.cfg.encoder == "exact":
            s = noise_variance(params).expand(n)
        else:
            s = s_values(Phi, model.heads, params)
    else:
        m = class_mean_vectors(Y, m_tilde_values(Phi, model.heads, params), model.n_classes)
        s = s_values(Phi, model.heads, params)
    return P, c, m, s


def fit(model: GPVIB, params: ParamSet, X_support, Y_support) -> FittedEncoder:
    P, c, m, s = encoder_inputs(model, params, X_support, Y_support)
    if model.n_classes is not None and len(Y_support) == 0:
        m = torch.zeros(0, model.n_classes, dtype=DTYPE)
    return FittedEncoder(P, c, m, s, model.cfg.solver)


def joint_encoder(K, S_diag, m) -> GaussianNd:
    """N(K (K+S)^-1 m, K - K (K+S)^-1 K) from an explicit Gram matrix."""
    K, S_diag, m = as_tensor(K), as_tensor(S_diag), as_tensor(m)
    L = linalg.cholesky(K + torch.diag(S_diag))
    V = linalg.solve_triangular(L, K)
    cov = K - V.mT @ V
    return GaussianNd(K @ linalg.cho_solve(L, m), 0.5 * (cov + cov.mT))


def exact_posterior(task: Task, model: GPVIB, params: ParamSet) -> GaussianNd:
    """Exact GP posterior over f^t under the Gaussian likelihood."""
    if task.is_classification:
        raise ValueError("exact posterior needs a regression task")
    _, P, c = support_features(model, params, task.X_support)
    n = P.shape[0]
    return joint_encoder(gram_from_features(P, c), noise_variance(params).expand(n), as_tensor(task.Y_support))


def amortized_encoder(task: Task, model: GPVIB, params: ParamSet):
    """q(f^t | D^t) built from the model's (m, s); one Gaussian per class."""
    enc = fit(model, params, task.X_support, task.Y_support)
    out = [enc.joint(i) for i in range(enc.n_latent)]
    return out[0] if model.n_classes is None else out


def marginal_q(X, enc: FittedEncoder, model: GPVIB, params: ParamSet):
    _, P, _ = support_features(model, params, X)
    means, var = enc.marginals(P)
    return (means[:, 0] if model.n_classes is None else means), var


@dataclass
class ObjectiveTerms:
    expected_loglik: torch.Tensor
    kl: torch.Tensor
    objective: torch.Tensor


def _kl_term(enc: FittedEncoder, P_t) -> torch.Tensor:
    """KL[q(f^t) || p(f^t)] summed over latent functions, in closed form.

    Equals sum_j E_q[log N(m_j | f_j, s_j)] - log N(m | 0, K + S).
    """
    if enc.n == 0:
        return torch.zeros((), dtype=DTYPE)
    mu_t, var_t = enc.marginals(P_t)
    s = enc.s.unsqueeze(-1)
    support = _expected_gauss_loglik(enc.m, mu_t, var_t.unsqueeze(-1), s).sum(0)
    return _sorted_sum(support - enc.log_evidence_terms())


def regression_terms(task: Task, model: GPVIB, params: ParamSet) -> ObjectiveTerms:
    enc = fit(model, params, task.X_support, task.Y_support)
    _, P_v, _ = support_features(model, params, task.X_query)
    mu, var = enc.marginals(P_v)
    ell = _expected_gauss_loglik(as_tensor(task.Y_query), mu[:, 0], var, noise_variance(params)).sum()
    if model.cfg.beta == 0:
        return ObjectiveTerms(ell, torch.zeros((), dtype=DTYPE), ell)
    kl = _kl_term(enc, enc.P)
    return ObjectiveTerms(ell, kl, ell - model.cfg.beta * kl)


def vib_objective_regression(task: Task, model: GPVIB, params: ParamSet) -> torch.Tensor:
    """Per-task VIB objective (to maximize) for a Gaussian likelihood."""
    return regression_terms(task, model, params).objective


def draw_noise(rng: np.random.Generator, samples: int, n_points: int, n_classes: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((samples, n_points, n_classes)))


def _class_noise(model, n_points, rng, noise):
    if noise is not None:
        return as_tensor(noise)
    rng = rng if rng is not None else np.random.default_rng()
    return draw_noise(rng, model.cfg.mc_samples, n_points, model.n_classes)


def classification_terms(task: Task, model: GPVIB, params: ParamSet, rng=None, noise=None) -> ObjectiveTerms:
    if model.n_classes is None or not task.is_classification:
        raise ValueError("classification objective needs a classification model and task")
    enc = fit(model, params, task.X_support, task.Y_support)
    _, P_v, _ = support_features(model, params, task.X_query)
    mu, var = enc.marginals(P_v)
    eps = _class_noise(model, P_v.shape[0], rng, noise)
    f = mu + var.clamp_min(0.0).sqrt().unsqueeze(-1) * eps  # (S, n_v, N)
    y = torch.as_tensor(task.Y_query, dtype=torch.int64)
    picked = f.gather(-1, y.view(1, -1, 1).expand(f.shape[0], -1, 1)).squeeze(-1)
    ell = (picked - _logsumexp_sorted(f)).mean(0).sum()
    if model.cfg.beta == 0:
        return ObjectiveTerms(ell, torch.zeros((), dtype=DTYPE), ell)
    kl = _kl_term(enc, enc.P)
    return ObjectiveTerms(ell, kl, ell - model.cfg.beta * kl)


def vib_objective_classification(task, model, params, rng=None, noise=None) -> torch.Tensor:
    """MC estimate of the per-task VIB objective under the softmax likelihood.

    ``noise`` (samples, n_query, N) fixes the reparameterization draws;
    otherwise ``model.cfg.mc_samples`` draws are taken from ``rng``.
    """
    return classification_terms(task, model, params, rng, noise).objective


def objective_terms(task, model, params, rng=None) -> ObjectiveTerms:
    if model.n_classes is None:
        return regression_terms(task, model, params)
    return classification_terms(task, model, params, rng)


@dataclass
class RegressionPrediction:
    mean: np.ndarray
    var: np.ndarray  # of f*
    y_var: np.ndarray  # var + noise


@dataclass
class ClassPrediction:
    probs: np.ndarray  # (k, N)
    labels: np.ndarray
    means: np.ndarray
    var: np.ndarray


def predict(X_star, enc: FittedEncoder, model: GPVIB, params: ParamSet, rng=None, noise=None):
    """Predictive moments (regression) or MC class probabilities + decisions."""
    with torch.no_grad():
        means, var = marginal_q(X_star, enc, model, params)
        if model.n_classes is None:
            noise_var = float(noise_variance(params))
            return RegressionPrediction(means.numpy(), var.numpy(), var.numpy() + noise_var)
        return class_prediction(means, var, _class_noise(model, means.shape[0], rng, noise))


def class_prediction(means, var, noise) -> ClassPrediction:
    """MC softmax probabilities and argmax-of-means labels from q(f*) moments."""
    means, var = as_tensor(means), as_tensor(var)
    f = means + var.clamp_min(0.0).sqrt().unsqueeze(-1) * as_tensor(noise)
    lse = _logsumexp_sorted(f)
    # one contiguous column per class so relabeling cannot change rounding
    probs = torch.stack([torch.exp(f[..., n].contiguous() - lse).mean(0) for n in range(f.shape[-1])], dim=-1)
    means = means.numpy()
    # np.argmax returns the first maximum: ties go to the lowest class index
    return ClassPrediction(probs.numpy(), means.argmax(-1), means, var.numpy())


class StreamState:
    """Constant-memory sufficient statistics of a growing support set.

    ``A = sum_j phi_j phi_j^T / s_j`` and ``b[:, n] = sum_j phi_j m_nj / s_j``.
    """

    def __init__(self, feature_dim: int, n_latent: int = 1):
        self.A = torch.zeros(feature_dim, feature_dim, dtype=DTYPE)
        self.b = torch.zeros(feature_dim, n_latent, dtype=DTYPE)
        self.count = 0

    def ingest(self, p, m, s) -> "StreamState":
        p, m = as_tensor(p), as_tensor(m).reshape(-1)
        s = float(s)
        self.A = self.A + torch.outer(p, p) / s
        self.b = self.b + torch.outer(p, m) / s
        self.count += 1
        return self

    def predict(self, p_star, out_scale):
        """Means (k, N) and variances (k,) of q(f*) for feature rows ``p_star``."""
        A = 0.5 * (self.A + self.A.mT) + torch.eye(self.A.shape[0], dtype=DTYPE) / out_scale
        LA = linalg.cholesky(A)
        return linalg.posterior_from_stats(LA, self.b, as_tensor(p_star))


def _require_linear(model: GPVIB):
    if model.cfg.kernel.variant != "linear":
        raise StreamingUnsupported("streaming prediction requires the linear kernel")


def new_stream(model: GPVIB) -> StreamState:
    _require_linear(model)
    return StreamState(model.net.out_dim, model.n_classes or 1)


def stream_ingest(state: StreamState, x, y, model: GPVIB, params: ParamSet) -> StreamState:
    _require_linear(model)
    with torch.no_grad():
        P, _, m, s = encoder_inputs(model, params, np.atleast_2d(x), np.atleast_1d(y))
        return state.ingest(P[0], m[0], s[0])


def stream_predict(state: StreamState, X_star, model: GPVIB, params: ParamSet):
    _require_linear(model)
    with torch.no_grad():
        _, P, c = support_features(model, params, X_star)
        means, var = state.predict(P, c)
    return (means[:, 0] if model.n_classes is None else means), var


def log_marginal_likelihood(task: Task, model: GPVIB, params: ParamSet) -> torch.Tensor:
    """log N(Y^v | 0, K^v + noise I), the closed-form query evidence."""
    n = len(task.Y_query)
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    _, P, c = support_features(model, params, task.X_query)
    K = gram_from_features(P, c)
    g = GaussianNd(torch.zeros(n, dtype=DTYPE), K + noise_variance(params) * torch.eye(n, dtype=DTYPE))
    return linalg.mvn_logpdf(as_tensor(task.Y_query), g)


def elbo_bound_check(task: Task, model: GPVIB, params: ParamSet):
    """(VIB value at beta=1, log marginal likelihood of the query set)."""
    unit = replace(model, cfg=replace(model.cfg, beta=1.0))
    with torch.no_grad():
        return float(vib_objective_regression(task, unit, params)), float(log_marginal_likelihood(task, model, params))
