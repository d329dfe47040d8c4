"""Meta-learning with a Gaussian-process information bottleneck (GP-VIB).

Modules: ``linalg`` (Cholesky-based Gaussian algebra), ``autodiff``
(parameter sets and gradients), ``features`` / ``kernels`` (deep kernels and
encoder heads), ``gpvib`` (the GP encoder, objectives, prediction and
streaming), ``maml`` (MAML baselines), ``tasks``, ``trainer``, ``config`` and
``cli``.
"""

__version__ = "0.1.0"
