"""Feed-forward networks, the gated recurrent cell and the two ODE-RNN encoders.

Parameters live in a flat mapping ``name -> array or DiffNode``; each
network reads its own ``prefix.*`` entries.  Encoders operate on a whole
``GridBatch`` at once and return features stacked as (B, M, d_h).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .batch import GridBatch, make_batch
from .datasets import TimeSeries
from .errors import ContractViolation
from .sde import TimeGrid


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple
    activation: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ContractViolation("an MLP needs at least input and output widths, all positive")
        if self.activation not in ("relu", "tanh"):
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.output not in ("identity", "exp", "none"):
            raise ContractViolation(f"unknown output head {self.output!r}")


_ACT = {"relu": ad.relu, "tanh": ad.tanh}
# exp heads clamp their input so the output can neither underflow to 0 nor overflow
EXP_CLAMP = 30.0


def init_mlp(store, prefix: str, spec: MLPSpec, rng: np.random.Generator, out_bias: float = 0.0):
    n = len(spec.widths) - 1
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        lim = 1.0 / np.sqrt(a)
        store.add(f"{prefix}.W{i}", rng.uniform(-lim, lim, size=(a, b)))
        store.add(f"{prefix}.b{i}", np.full(b, out_bias if i == n - 1 else 0.0))


def mlp_first_layer(spec: MLPSpec, params: Mapping, x, prefix: str):
    if x.shape[-1] != spec.widths[0]:
        raise ContractViolation(f"{prefix}: input width {x.shape[-1]} != {spec.widths[0]}")
    return ad.matmul(x, params[f"{prefix}.W0"]) + params[f"{prefix}.b0"]


def mlp_rest(spec: MLPSpec, params: Mapping, z, prefix: str):
    """Continue an MLP from its first-layer pre-activation ``z``."""
    act = _ACT[spec.activation]
    for i in range(1, len(spec.widths) - 1):
        z = ad.matmul(act(z), params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
    if spec.output == "exp":
        z = ad.exp(ad.clip(z, -EXP_CLAMP, EXP_CLAMP))
    return z


def mlp_forward(spec: MLPSpec, params: Mapping, x, prefix: str):
    return mlp_rest(spec, params, mlp_first_layer(spec, params, ad.const(x), prefix), prefix)


GRU_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


def init_gru(store, prefix: str, in_width: int, hidden: int, rng: np.random.Generator):
    lim = 1.0 / np.sqrt(hidden)
    for gate in "zrh":
        store.add(f"{prefix}.W{gate}", rng.uniform(-lim, lim, size=(in_width, hidden)))
        store.add(f"{prefix}.U{gate}", rng.uniform(-lim, lim, size=(hidden, hidden)))
        store.add(f"{prefix}.b{gate}", np.zeros(hidden))


def gru_update(h, inp, params: Mapping, prefix: str):
    """Gated update: z, r gates, candidate g; returns (1 - z) * g + z * h."""
    p = lambda n: params[f"{prefix}.{n}"]
    inp = ad.const(inp)
    if inp.shape[-1] != p("Wz").shape[0] or h.shape[-1] != p("Uz").shape[0]:
        raise ContractViolation(f"{prefix}: gated cell width mismatch")
    z = ad.sigmoid(ad.matmul(inp, p("Wz")) + ad.matmul(h, p("Uz")) + p("bz"))
    r = ad.sigmoid(ad.matmul(inp, p("Wr")) + ad.matmul(h, p("Ur")) + p("br"))
    g = ad.tanh(ad.matmul(inp, p("Wh")) + r * ad.matmul(h, p("Uh")) + p("bh"))
    return (1.0 - z) * g + z * h


@dataclass
class EncoderOutput:
    pre_features: object                 # (B, M, d_h)
    post_features: Optional[object] = None
    back_features: Optional[object] = None


def flow_spec(d_h: int, hidden: Sequence[int], activation: str) -> MLPSpec:
    return MLPSpec((d_h, *hidden, d_h), activation)


def encode_forward_batch(batch: GridBatch, params: Mapping, flow: MLPSpec, prefix: str = "enc_f",
                         want_post: bool = True) -> EncoderOutput:
    """Forward ODE-RNN: Euler flow between nodes, gated jump at observed nodes.

    ``pre`` at node m is read before the jump, ``post`` after it.
    """
    B, M = batch.size, batch.n_nodes
    h0 = params[f"{prefix}.h0"]
    h = ad.broadcast_to(h0, (B, h0.shape[-1]))
    inp = batch.cell_input
    pres, posts = [], []
    for m in range(M):
        pres.append(h)
        here = batch.obs[:, m]
        if here.any():
            h = ad.where(here[:, None], gru_update(h, inp[:, m], params, f"{prefix}.gru"), h)
        posts.append(h)
        if m < M - 1:
            dt = batch.dt[:, m]
            if dt.any():
                h = h + mlp_forward(flow, params, h, f"{prefix}.flow") * dt[:, None]
    out = EncoderOutput(ad.stack(pres, axis=1))
    if want_post:
        out.post_features = ad.stack(posts, axis=1)
    return out


def encode_backward_batch(batch: GridBatch, params: Mapping, flow: MLPSpec, prefix: str = "enc_b"):
    """Backward ODE-RNN; the feature at node m already includes an observation at m."""
    B, M = batch.size, batch.n_nodes
    h0 = params[f"{prefix}.h0"]
    h = ad.broadcast_to(h0, (B, h0.shape[-1]))
    inp = batch.cell_input
    back = [None] * M
    for m in range(M - 1, -1, -1):
        here = batch.obs[:, m]
        if here.any():
            h = ad.where(here[:, None], gru_update(h, inp[:, m], params, f"{prefix}.gru"), h)
        back[m] = h
        if m > 0:
            dt = batch.dt[:, m - 1]
            if dt.any():
                h = h + mlp_forward(flow, params, h, f"{prefix}.flow") * dt[:, None]
    return ad.stack(back, axis=1)


def _single(series: TimeSeries, grid: Optional[TimeGrid], max_dt: float):
    batch = make_batch([series], max_dt if grid is None else grid.max_dt,
                       horizon=None if grid is None else float(grid.nodes[-1]))
    if grid is not None:
        same = len(batch.grids[0]) == len(grid) and np.allclose(batch.grids[0].nodes, grid.nodes)
        obs = [grid.obs_index.get(i) for i in range(series.n)]
        if not same or None in obs or not np.allclose(grid.nodes[obs], series.times):
            raise ContractViolation("grid does not match the series' observation times")
    return batch


def encode_forward(series: TimeSeries, grid: TimeGrid, params: Mapping, flow: MLPSpec,
                   prefix: str = "enc_f") -> EncoderOutput:
    """Single-series view of ``encode_forward_batch``; features are (M, d_h) arrays."""
    out = encode_forward_batch(_single(series, grid, grid.max_dt), params, flow, prefix)
    post = out.post_features.value[0]
    obs = np.zeros(len(grid), dtype=bool)
    obs[list(grid.obs_index.values())] = True
    return EncoderOutput(out.pre_features.value[0], np.where(obs[:, None], post, np.nan))


def encode_backward(series: TimeSeries, grid: TimeGrid, params: Mapping, flow: MLPSpec,
                    prefix: str = "enc_b") -> np.ndarray:
    return encode_backward_batch(_single(series, grid, grid.max_dt), params, flow, prefix).value[0]
