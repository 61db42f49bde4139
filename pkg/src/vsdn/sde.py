"""Euler-Maruyama machinery for diagonal-diffusion SDEs.

All step functions accept plain arrays or ``DiffNode``s and broadcast over
leading (batch, sample) dimensions; the trailing axis is the latent dimension.
Intervals of length zero are allowed only as batch padding, where every
function degenerates to the identity / zero increment.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, IngestionError, PathFault

LOG_2PI = float(np.log(2 * np.pi))

# observation times closer than this are treated as the same instant
TIME_TOL = 1e-9


@dataclass
class TimeGrid:
    nodes: np.ndarray
    dt_values: np.ndarray
    obs_index: Dict[int, int]
    max_dt: float

    def __len__(self):
        return len(self.nodes)

    @property
    def obs_nodes(self) -> np.ndarray:
        return np.array([self.obs_index[n] for n in sorted(self.obs_index)], dtype=int)


@dataclass
class LatentPath:
    """K sampled latent trajectories on one grid (leading batch dims allowed).

    ``kl_accum`` and ``logw_accum`` may be ``DiffNode``s when the path was
    sampled under a tape.
    """
    states: np.ndarray
    noise: np.ndarray
    kl_accum: object
    logw_accum: object
    state_nodes: Optional[list] = field(default=None, repr=False)


def build_time_grid(obs_times, max_dt: float, horizon: Optional[float] = None) -> TimeGrid:
    """Solver grid containing 0, every observation time and ``horizon``.

    Each gap between consecutive anchors is split into the fewest equal
    pieces that keep every interval at or below ``max_dt``.
    """
    obs_times = np.asarray(obs_times, dtype=np.float64).reshape(-1)
    if max_dt <= 0 or not np.isfinite(max_dt):
        raise ContractViolation("max_dt must be positive and finite")
    if obs_times.size and not np.all(np.isfinite(obs_times)):
        raise IngestionError("non-finite observation time")
    if obs_times.size and np.any(obs_times < -TIME_TOL):
        raise IngestionError("observation times must be nonnegative")
    diffs = np.diff(obs_times)
    if np.any(diffs < 0):
        raise IngestionError("observation times are not ascending")
    if np.any(diffs <= TIME_TOL):
        raise IngestionError("duplicate observation times")
    if horizon is None:
        horizon = float(obs_times[-1]) if obs_times.size else 0.0
    if obs_times.size and obs_times[-1] > horizon + TIME_TOL:
        raise ContractViolation("observation time beyond horizon")

    anchors = [0.0]
    for t in obs_times:
        if t - anchors[-1] > TIME_TOL:
            anchors.append(float(t))
    if horizon - anchors[-1] > TIME_TOL:
        anchors.append(float(horizon))

    nodes = [anchors[0]]
    for a, b in zip(anchors[:-1], anchors[1:]):
        n = max(1, int(np.ceil((b - a) / max_dt - 1e-9)))
        nodes.extend(a + (b - a) * np.arange(1, n) / n)
        nodes.append(b)
    nodes = np.asarray(nodes)

    obs_index = {}
    for i, t in enumerate(obs_times):
        j = int(np.argmin(np.abs(nodes - t)))
        obs_index[i] = j
    return TimeGrid(nodes=nodes, dt_values=np.diff(nodes), obs_index=obs_index, max_dt=float(max_dt))


def _plain(fn):
    """Return ndarrays when no argument is a DiffNode."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if isinstance(out, ad.DiffNode) and not any(isinstance(a, ad.DiffNode) for a in args):
            return out.value
        return out
    return wrapper


def _check_finite(value, what, node_index):
    v = value.value if isinstance(value, ad.DiffNode) else np.asarray(value)
    if not np.all(np.isfinite(v)):
        raise PathFault(f"non-finite {what} at grid index {node_index}", node_index=node_index)


@_plain
def euler_step(x, drift, diff, dt, eps, node_index=None):
    """``x + drift*dt + diff*sqrt(dt)*eps`` with diagonal diffusion."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise ContractViolation("negative step size")
    for v, what in ((x, "state"), (drift, "drift"), (diff, "diffusion"), (eps, "noise")):
        _check_finite(v, what, node_index)
    return x + drift * dt + diff * (np.sqrt(dt) * np.asarray(eps))


@_plain
def transition_log_density(x_next, x, drift, diff, dt):
    """Diagonal Gaussian log N(x_next; x + drift*dt, dt*diff^2), summed over the last axis."""
    dt = float(dt) if np.ndim(dt) == 0 else np.asarray(dt)
    d = diff.value if isinstance(diff, ad.DiffNode) else np.asarray(diff)
    if np.any(np.asarray(dt) <= 0) or np.any(d <= 0):
        raise ContractViolation("transition density needs positive dt and diffusion")
    var = ad.square(diff) * dt
    resid = x_next - (x + drift * dt)
    per_dim = -0.5 * (LOG_2PI + ad.log(var)) - 0.5 * ad.square(resid) / var
    return ad.sum(per_dim, axis=-1)


def _scaled_gap(h_q, h_g, r_g):
    r = r_g.value if isinstance(r_g, ad.DiffNode) else np.asarray(r_g)
    if np.any(r <= 0):
        raise ContractViolation("diffusion must be strictly positive (differing diffusions give infinite KL)")
    return (h_q - h_g) / r_g


@_plain
def kl_increment(h_q, h_g, r_g, dt):
    """Per-interval KL between posterior and prior transitions sharing diffusion ``r_g``."""
    u = _scaled_gap(h_q, h_g, r_g)
    return 0.5 * ad.sum(ad.square(u) * np.asarray(dt), axis=-1)


@_plain
def logw_increment(h_q, h_g, r_g, dt, eps):
    """Increment of log(prior path density / posterior path density) over one interval.

    ``eps`` must be the same draw that advanced the posterior path.
    """
    u = _scaled_gap(h_q, h_g, r_g)
    dt = np.asarray(dt)
    return ad.sum(-0.5 * ad.square(u) * dt - u * (np.sqrt(dt) * np.asarray(eps)), axis=-1)


def _value(x):
    return x.value if isinstance(x, ad.DiffNode) else np.asarray(x)


def simulate_sde(x0, drift_fn, diff_fn, grid: TimeGrid, eps):
    """Simulate ``dX = drift_fn(X, t) dt + diff_fn(X, t) dW`` on ``grid``.

    ``eps`` has shape (..., intervals, d).  Returns states (..., nodes, d).
    Used for plain numerical experiments; the model has its own batched loop.
    """
    eps = np.asarray(eps, dtype=np.float64)
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), eps.shape[:-2] + eps.shape[-1:]).copy()
    out = [x]
    for k, dt in enumerate(grid.dt_values):
        t = grid.nodes[k]
        x = _value(euler_step(x, drift_fn(x, t), diff_fn(x, t), dt, eps[..., k, :], node_index=k))
        out.append(x)
    return np.stack(out, axis=-2)
