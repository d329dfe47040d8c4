"""Deep linear and cosine kernels on top of the feature network.

Both kernels are inner products of (possibly normalized) features, so every
Gram matrix here is ``out_scale * P P^T`` for a feature matrix ``P``.  The
low-rank form is what the Woodbury and streaming paths exploit.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import ParamSet
from .features import FeatureNet, phi
from .linalg import as_tensor

LOG_OUT_SCALE = "kernel.log_out_scale"
NORM_FLOOR = 1e-12


class ZeroFeatureVector(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    variant: str = "linear"  # or "cosine"
    fixed_variance: float | None = None
    log_out_scale_init: float = 0.0

    def __post_init__(self):
        if self.variant not in ("linear", "cosine"):
            raise ValueError(f"unknown kernel {self.variant!r}")
        if self.fixed_variance is not None and not self.fixed_variance > 0:
            raise ValueError("fixed_variance must be positive")

    @property
    def learns_out_scale(self) -> bool:
        return self.fixed_variance is None

    def init_params(self) -> ParamSet:
        if not self.learns_out_scale:
            return ParamSet()
        return ParamSet({LOG_OUT_SCALE: self.log_out_scale_init})


def kernel_features(Phi, spec: KernelSpec, params: ParamSet):
    """Return ``(P, out_scale)`` with the Gram matrix equal to ``out_scale * P P^T``."""
    Phi = as_tensor(Phi)
    M = Phi.shape[-1]
    if spec.variant == "linear":
        scale = spec.fixed_variance if spec.fixed_variance is not None else torch.exp(params[LOG_OUT_SCALE]) / M
        return Phi, scale
    norms = torch.linalg.vector_norm(Phi, dim=-1, keepdim=True)
    if (norms.detach() == 0).any():
        raise ZeroFeatureVector("cosine kernel is undefined for an all-zero feature vector")
    scale = spec.fixed_variance if spec.fixed_variance is not None else torch.exp(params[LOG_OUT_SCALE])
    return Phi / norms.clamp_min(NORM_FLOOR), scale


def gram_from_features(P, out_scale, P2=None) -> torch.Tensor:
    if P2 is None:
        K = out_scale * (P @ P.mT)
        return 0.5 * (K + K.mT)
    return out_scale * (P @ P2.mT)


def kernel(x, x2, spec: KernelSpec, net: FeatureNet, params: ParamSet) -> torch.Tensor:
    P, c = kernel_features(phi(torch.stack([as_tensor(x), as_tensor(x2)]), net, params), spec, params)
    return c * (P[0] @ P[1])


def gram(X, spec: KernelSpec, net: FeatureNet, params: ParamSet) -> torch.Tensor:
    P, c = kernel_features(phi(X, net, params), spec, params)
    return gram_from_features(P, c)


def cross_gram(Xa, Xb, spec: KernelSpec, net: FeatureNet, params: ParamSet) -> torch.Tensor:
    Pa, c = kernel_features(phi(Xa, net, params), spec, params)
    Pb, _ = kernel_features(phi(Xb, net, params), spec, params)
    return gram_from_features(Pa, c, Pb)
