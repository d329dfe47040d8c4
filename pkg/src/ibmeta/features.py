"""Feature network phi(x; theta) and the encoder heads (m~, s).

Heads produce the per-point Gaussian approximation N(m_j | f_j, s_j) to each
support likelihood term.  The amortized variant reads both values off linear
heads on top of phi; the simplified variant shares two learned scalars across
every point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import ParamSet
from .linalg import DTYPE, as_tensor

M_TILDE_BOUNDS = (-20.0, 20.0)
S_BOUNDS = (0.001, 20.0)

_ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}


@dataclass(frozen=True)
class FeatureNet:
    input_dim: int
    hidden: tuple = (40, 40)
    activation: str = "relu"
    augment: bool = True

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.hidden:
            raise ValueError("feature net needs at least one hidden layer")

    @property
    def out_dim(self) -> int:
        """M, the kernel feature dimension (including the appended 1)."""
        return self.hidden[-1] + int(self.augment)

    def init_params(self, rng: np.random.Generator, prefix: str = "net") -> ParamSet:
        """Glorot-uniform weights, zero biases."""
        params = ParamSet()
        sizes = (self.input_dim, *self.hidden)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{prefix}.w{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{prefix}.b{i}"] = np.zeros(fan_out)
        return params


def phi(X, net: FeatureNet, params: ParamSet, prefix: str = "net") -> torch.Tensor:
    """Feature matrix (n, M) for inputs X (n, d); a single input gives (M,)."""
    X = as_tensor(X)
    single = X.ndim == 1
    h = X.unsqueeze(0) if single else X
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"inputs have dim {h.shape[-1]}, net expects {net.input_dim}")
    act = _ACTIVATIONS[net.activation]
    for i in range(len(net.hidden)):
        h = act(h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"])
    if net.augment:
        h = torch.cat([h, torch.ones(h.shape[0], 1, dtype=DTYPE)], dim=1)
    return h[0] if single else h


@dataclass(frozen=True)
class EncoderHeads:
    variant: str = "simplified"  # or "amortized"
    m_tilde_init: float = 1.0
    a_init: float = 0.0

    def __post_init__(self):
        if self.variant not in ("simplified", "amortized"):
            raise ValueError(f"unknown encoder head variant {self.variant!r}")

    def init_params(self, feature_dim: int) -> ParamSet:
        if self.variant == "simplified":
            return ParamSet({"heads.m_tilde": self.m_tilde_init, "heads.a": self.a_init})
        return ParamSet(
            {
                "heads.w_m": np.zeros(feature_dim),
                "heads.b_m": self.m_tilde_init,
                "heads.w_s": np.zeros(feature_dim),
                "heads.b_s": self.a_init,
            }
        )


def clip(x: torch.Tensor, bounds) -> torch.Tensor:
    # hard clamp: zero gradient outside the bounds
    return torch.clamp(x, bounds[0], bounds[1])


def raw_m_tilde(Phi: torch.Tensor, heads: EncoderHeads, params: ParamSet) -> torch.Tensor:
    if heads.variant == "simplified":
        return params["heads.m_tilde"].expand(Phi.shape[:-1])
    return Phi @ params["heads.w_m"] + params["heads.b_m"]


def pre_activation_s(Phi: torch.Tensor, heads: EncoderHeads, params: ParamSet) -> torch.Tensor:
    if heads.variant == "simplified":
        return params["heads.a"].expand(Phi.shape[:-1])
    return Phi @ params["heads.w_s"] + params["heads.b_s"]


def m_tilde_values(Phi, heads, params) -> torch.Tensor:
    return clip(raw_m_tilde(Phi, heads, params), M_TILDE_BOUNDS)


def s_values(Phi, heads, params) -> torch.Tensor:
    return clip(F.softplus(pre_activation_s(Phi, heads, params)), S_BOUNDS)


def head_m(x, y_sign: int, heads: EncoderHeads, net: FeatureNet, params: ParamSet) -> torch.Tensor:
    """Signed amortized mean ``y * clip(m~(x))`` for one input."""
    if y_sign not in (-1, 1):
        raise ValueError("y_sign must be -1 or +1")
    return y_sign * m_tilde_values(phi(x, net, params), heads, params)


def head_s(x, heads: EncoderHeads, net: FeatureNet, params: ParamSet) -> torch.Tensor:
    return s_values(phi(x, net, params), heads, params)


def class_mean_vectors(labels, m_tilde, n_classes: int) -> torch.Tensor:
    """Per-class signed means as the columns of an (n, N) matrix.

    Column n holds +m~_j where point j has label n and -m~_j elsewhere.  With a
    single class the column is m~ itself.
    """
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    m_tilde = as_tensor(m_tilde)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    if n_classes == 1:
        return m_tilde.unsqueeze(-1)
    signs = torch.where(labels.unsqueeze(-1) == torch.arange(n_classes), 1.0, -1.0).to(DTYPE)
    return signs * m_tilde.unsqueeze(-1)
