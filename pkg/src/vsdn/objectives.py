"""Evidence lower bounds on path space.

Bounds follow the maximisation sign convention (higher is better); the
trainer minimises their negation.  Inputs may carry leading batch axes:
``kl_accum``/``logw_accum`` are (..., K) and ``recon_logliks`` (..., K, n).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractViolation


@dataclass
class LossReport:
    vae_bound: float
    iwae_bound: float
    mixed: float
    kl_total: float
    recon_total: float
    per_frame_nll: float
    frame_mse: float
    n_frames: int

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [getattr(self, c) for c in self.columns()]


def _k_axis_size(x):
    shape = x.shape if hasattr(x, "shape") else np.shape(x)
    if len(shape) == 0 or shape[-1] == 0:
        raise ContractViolation("need at least one sampled path (K >= 1)")
    return shape[-1]


def _plain_if_arrays(out, *args):
    if isinstance(out, ad.DiffNode) and not any(isinstance(a, ad.DiffNode) for a in args):
        v = out.value
        return float(v) if v.ndim == 0 else v
    return out


def vae_bound(paths, recon_logliks, beta: float = 1.0):
    """Mean over samples of (sum of frame log-likelihoods - beta * KL)."""
    kl = paths.kl_accum
    _k_axis_size(kl)
    per_sample = ad.sum(recon_logliks, axis=-1) - beta * ad.const(kl)
    return _plain_if_arrays(ad.mean(per_sample, axis=-1), kl, recon_logliks)


def iwae_bound(paths, recon_logliks):
    """log (1/K) sum_k w_k prod_i p(y_i | x^k), evaluated with logsumexp."""
    logw = paths.logw_accum
    K = _k_axis_size(logw)
    out = ad.logsumexp(ad.const(logw) + ad.sum(recon_logliks, axis=-1), axis=-1) - np.log(K)
    return _plain_if_arrays(out, logw, recon_logliks)


def mixed_objective(vae, iwae, alpha: float):
    """Convex combination (1 - alpha) * vae + alpha * iwae."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    return (1 - alpha) * vae + alpha * iwae
