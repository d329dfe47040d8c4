"""Dense linear algebra and Gaussian densities used by the GP code.

Everything works on float64 torch tensors so the same routines sit inside
autograd graphs during training and serve as plain numerics elsewhere.
Inputs given as numpy arrays or nested lists are converted on entry.
"""
from __future__ import annotations

import math

import numpy as np
import torch

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

# Extra diagonal added, relative to the mean diagonal, when a factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky factorization fails even after jittering."""


class NonFiniteMatrix(FloatingPointError):
    """Raised when a matrix handed to a factorization holds NaN or inf."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_square_symmetric(A: torch.Tensor) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {tuple(A.shape)}")
    if not torch.isfinite(A).all():
        raise NonFiniteMatrix("matrix has non-finite entries")
    if not A.numel():
        return
    scale = max(1.0, float(A.detach().abs().max()))
    if float((A - A.mT).detach().abs().max()) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(A, jitter: float = 0.0) -> torch.Tensor:
    """Lower Cholesky factor of ``A + jitter * I``.

    If that fails, progressively larger diagonal loads from ``JITTER_LADDER``
    (scaled by the mean diagonal of ``A``) are tried before giving up.
    """
    A = as_tensor(A)
    _check_square_symmetric(A)
    n = A.shape[0]
    eye = torch.eye(n, dtype=DTYPE)
    mean_diag = float(A.detach().diagonal().mean()) if n else 1.0
    if not mean_diag > 0.0:
        mean_diag = 1.0
    for rung in JITTER_LADDER:
        L, info = torch.linalg.cholesky_ex(A + (jitter + rung * mean_diag) * eye)
        if int(info) == 0 and torch.isfinite(L).all():
            return L
    raise NotPositiveDefinite(f"{n}x{n} matrix is not positive definite")


def solve_triangular(L, B, transpose: bool = False) -> torch.Tensor:
    """Solve ``L X = B`` (or ``L^T X = B`` when ``transpose``) for lower ``L``."""
    L, B = as_tensor(L), as_tensor(B)
    vector = B.ndim == 1
    if vector:
        B = B.unsqueeze(-1)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0]:
        raise ValueError(f"incompatible shapes {tuple(L.shape)} and {tuple(B.shape)}")
    if transpose:
        X = torch.linalg.solve_triangular(L.mT, B, upper=True)
    else:
        X = torch.linalg.solve_triangular(L, B, upper=False)
    return X.squeeze(-1) if vector else X


def cho_solve(L, B) -> torch.Tensor:
    """Solve ``(L L^T) X = B``."""
    return solve_triangular(L, solve_triangular(L, B), transpose=True)


def log_det_from_chol(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(L.diagonal()).sum()


class GaussianNd:
    """Multivariate normal with a lazily cached lower Cholesky factor."""

    def __init__(self, mean, cov, chol=None):
        self.mean = as_tensor(mean)
        self.cov = as_tensor(cov)
        if self.mean.ndim != 1 or self.cov.shape != (self.dim, self.dim):
            raise ValueError("mean must be a vector and cov a matching square matrix")
        self._chol = None if chol is None else as_tensor(chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def chol(self) -> torch.Tensor:
        if self._chol is None:
            self._chol = cholesky(self.cov)
        return self._chol

    def __repr__(self):
        return f"GaussianNd(dim={self.dim})"


def mvn_logpdf(x, g: GaussianNd) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape != g.mean.shape:
        raise ValueError(f"point has shape {tuple(x.shape)}, density has dim {g.dim}")
    z = solve_triangular(g.chol, x - g.mean)
    return -0.5 * (z @ z) - 0.5 * log_det_from_chol(g.chol) - 0.5 * g.dim * LOG_2PI


def kl_gaussian(q: GaussianNd, p: GaussianNd) -> torch.Tensor:
    """KL[q || p] between two full-covariance Gaussians."""
    if q.dim != p.dim:
        raise ValueError("dimension mismatch")
    Lq, Lp = q.chol, p.chol
    trace = (solve_triangular(Lp, Lq) ** 2).sum()
    z = solve_triangular(Lp, p.mean - q.mean)
    return 0.5 * (trace + z @ z - q.dim + log_det_from_chol(Lp) - log_det_from_chol(Lq))


def _woodbury_core(Phi, S_diag, out_scale):
    # A = Phi^T S^-1 Phi + I / out_scale  (M x M)
    Phi, S_diag = as_tensor(Phi), as_tensor(S_diag)
    if Phi.ndim != 2 or S_diag.shape != (Phi.shape[0],):
        raise ValueError("Phi must be n x M and S_diag length n")
    scaled = Phi / S_diag.unsqueeze(-1)
    A = Phi.mT @ scaled
    A = 0.5 * (A + A.mT) + torch.eye(Phi.shape[1], dtype=DTYPE) / out_scale
    return Phi, S_diag, scaled, cholesky(A)


def woodbury_logpdf(Phi, S_diag, m, out_scale) -> torch.Tensor:
    """``log N(m | 0, out_scale * Phi Phi^T + diag(S))`` via an M x M factorization.

    ``m`` may be a vector or an n x N matrix of independent columns, in which
    case the column log-densities are summed.
    """
    Phi, S_diag, scaled, LA = _woodbury_core(Phi, S_diag, out_scale)
    m = as_tensor(m)
    cols = m.unsqueeze(-1) if m.ndim == 1 else m
    n, M = Phi.shape
    w = solve_triangular(LA, scaled.mT @ cols)
    quad = (cols**2 / S_diag.unsqueeze(-1)).sum(0) - (w**2).sum(0)
    # det(K + S) = det(S) det(A) out_scale^M
    logdet = torch.log(S_diag).sum() + log_det_from_chol(LA) + M * torch.log(as_tensor(out_scale))
    return (-0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI).sum()


def woodbury_posterior(Phi, S_diag, m, out_scale, phi_star):
    """Moments of q(f*) for features ``phi_star`` under the low-rank Gram.

    ``phi_star`` may be one feature vector or a stack of them (rows); ``m``
    may hold several right-hand sides as columns.  Returns ``(mean, var)``.
    """
    Phi, S_diag, scaled, LA = _woodbury_core(Phi, S_diag, out_scale)
    b = scaled.mT @ as_tensor(m)
    return posterior_from_stats(LA, b, phi_star)


def posterior_from_stats(LA, b, phi_star):
    """Mean ``phi*^T A^-1 b`` and variance ``phi*^T A^-1 phi*`` given chol(A)."""
    phi_star = as_tensor(phi_star)
    single = phi_star.ndim == 1
    P = phi_star.unsqueeze(0) if single else phi_star
    mean = P @ cho_solve(LA, as_tensor(b))
    var = (solve_triangular(LA, P.mT) ** 2).sum(0)
    if single:
        return mean[0], var[0]
    return mean, var
