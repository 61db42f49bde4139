"""VSDN: a latent neural SDE driven by ODE-RNN features, in two inference variants.

Generative side: the forward encoder summarises strictly-past observations
into ``pre``; the prior drift reads ``[x, pre]``, the diffusion reads ``pre``
only, and the decoder emits a diagonal Gaussian from ``[x, pre]``.

Inference side shares the drift network.  Smoothing adds the backward
feature to ``pre`` at every node; filtering adds the post-update feature on
the interval leaving an observed node and equals the prior elsewhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .batch import GridBatch, draw_noise, make_batch
from .config import VSDNConfig, model_config_from_dict
from .datasets import TimeSeries
from .encoders import (EncoderOutput, MLPSpec, _single, encode_backward_batch, encode_forward_batch, flow_spec,
                       init_gru, init_mlp, mlp_forward, mlp_rest)
from .errors import ContractViolation, IngestionError
from .objectives import LossReport, iwae_bound, mixed_objective, vae_bound
from .sde import LOG_2PI, LatentPath, TimeGrid, euler_step, kl_increment, logw_increment

CHECKPOINT_FORMAT = "vsdn-checkpoint-v1"


@dataclass
class GaussianObsParams:
    mean: object
    log_std: object


class VSDN:
    def __init__(self, config: VSDNConfig, seed: int = 0, store: Optional[ParamStore] = None):
        self.config = config
        c = config
        hid = c.mlp_hidden
        self.drift_spec = MLPSpec((c.d1 + c.d_h, *hid, c.d1), c.activation)
        self.diff_spec = MLPSpec((c.d_h, *hid, c.d1), c.activation, "exp")
        self.dec_spec = MLPSpec((c.d1 + c.d_h, *hid, 2 * c.d2), c.activation)
        self.flow = flow_spec(c.d_h, hid, c.activation)
        self.init_spec = MLPSpec((2 * c.d2, c.init_hidden, c.d1), "relu")
        self.store = store if store is not None else self._init_params(seed)

    @property
    def smoothing(self) -> bool:
        return self.config.inference_mode == "smoothing"

    def _init_params(self, seed) -> ParamStore:
        c = self.config
        rng = np.random.default_rng([int(seed), 20210815])
        s = ParamStore()
        s.add("x0", np.zeros(c.d1))
        prefixes = ["enc_f"] + (["enc_b"] if self.smoothing else [])
        for p in prefixes:
            s.add(f"{p}.h0", np.zeros(c.d_h))
            init_mlp(s, f"{p}.flow", self.flow, rng)
            init_gru(s, f"{p}.gru", 2 * c.d2, c.d_h, rng)
        init_mlp(s, "drift", self.drift_spec, rng)
        init_mlp(s, "diff", self.diff_spec, rng, out_bias=c.diff_init_bias)
        init_mlp(s, "dec", self.dec_spec, rng)
        if c.init_from_first_obs:
            init_mlp(s, "init", self.init_spec, rng)
        return s

    def params(self, leaves: bool = False) -> Mapping:
        """Current parameters as arrays, or as fresh trainable leaves."""
        return self.store.leaves() if leaves else {k: ad.const(v) for k, v in self.store.params.items()}


# ---------------------------------------------------------------------------
# network pieces


def drift_prior(model: VSDN, P: Mapping, x, pre_feature):
    return mlp_forward(model.drift_spec, P, ad.concat([x, pre_feature], axis=-1), "drift")


def diffusion(model: VSDN, P: Mapping, pre_feature):
    """Positive diagonal diffusion from the history feature alone (never the latent state)."""
    return mlp_forward(model.diff_spec, P, pre_feature, "diff")


def drift_posterior(model: VSDN, P: Mapping, x, pre_feature, aux_feature=None, mode: Optional[str] = None,
                    at_observation: bool = False):
    mode = mode or model.config.inference_mode
    if mode == "smoothing":
        return drift_prior(model, P, x, ad.const(pre_feature) + aux_feature)
    if not at_observation:
        if aux_feature is not None:
            raise ContractViolation("filtering drift away from an observation takes no auxiliary feature")
        return drift_prior(model, P, x, pre_feature)
    if aux_feature is None:
        raise ContractViolation("filtering drift at an observation needs the post-update feature")
    return drift_prior(model, P, x, ad.const(pre_feature) + aux_feature)


def decode(model: VSDN, P: Mapping, x, pre_feature) -> GaussianObsParams:
    c = model.config
    out = mlp_forward(model.dec_spec, P, ad.concat([x, pre_feature], axis=-1), "dec")
    d2 = c.d2
    return GaussianObsParams(out[..., :d2], ad.clip(out[..., d2:], c.log_std_min, c.log_std_max))


def gaussian_loglik(y, mask, obs: GaussianObsParams):
    """Masked diagonal Gaussian log-density summed over the last axis."""
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, np.asarray(y, dtype=np.float64), 0.0)
    z = (y - obs.mean) * ad.exp(-ad.const(obs.log_std))
    per_dim = -0.5 * LOG_2PI - obs.log_std - 0.5 * ad.square(z)
    return ad.sum(ad.where(mask, per_dim, 0.0), axis=-1)


def gaussian_nll(y, mask, obs: GaussianObsParams):
    out = -gaussian_loglik(y, mask, obs)
    if not any(isinstance(v, ad.DiffNode) and v.requires_grad for v in (obs.mean, obs.log_std)):
        v = out.value
        return float(v) if v.ndim == 0 else v
    return out


# ---------------------------------------------------------------------------
# batched engine


def encode(model: VSDN, P: Mapping, batch: GridBatch, need_posterior: bool = True) -> EncoderOutput:
    want_post = need_posterior and not model.smoothing
    enc = encode_forward_batch(batch, P, model.flow, "enc_f", want_post=want_post)
    if need_posterior and model.smoothing:
        enc.back_features = encode_backward_batch(batch, P, model.flow, "enc_b")
    return enc


def initial_state(model: VSDN, P: Mapping, batch: GridBatch, K: int):
    c = model.config
    B = batch.size
    if not c.init_from_first_obs:
        return ad.broadcast_to(P["x0"], (B, K, c.d1))
    inp = batch.cell_input
    first = np.zeros((B, inp.shape[-1]))
    for b, fn in enumerate(batch.frame_nodes):
        if fn.size:
            first[b] = inp[b, fn[0]]
    x = mlp_forward(model.init_spec, P, first, "init")
    return ad.broadcast_to(ad.reshape(x, (B, 1, c.d1)), (B, K, c.d1))


def simulate_paths(model: VSDN, P: Mapping, batch: GridBatch, enc: EncoderOutput, eps: np.ndarray,
                   posterior: bool = True, record_cols: Sequence[int] = (), keep_states: bool = False):
    """Euler-Maruyama over the batch grid with K samples per sequence.

    Returns a ``LatentPath`` whose ``state_nodes`` maps each recorded column
    to its (B, K, d1) state.  With ``posterior=False`` the prior SDE is
    simulated and KL / log-weights stay zero.
    """
    c = model.config
    B, M = batch.size, batch.n_nodes
    K = eps.shape[1]
    d1 = c.d1
    x = initial_state(model, P, batch, K)
    kl = ad.const(np.zeros((B, K)))
    logw = ad.const(np.zeros((B, K)))
    rec = set(int(m) for m in record_cols)
    recorded = {}
    states = np.zeros((B, K, M, d1)) if keep_states else None

    if c.deterministic:
        for m in rec:
            recorded[m] = x
        if keep_states:
            states[:] = x.value[:, :, None, :]
        return LatentPath(states, eps, kl, logw, recorded)

    pre = enc.pre_features
    W0 = P["drift.W0"]
    Wx, Wh = W0[:d1], W0[d1:]
    b0 = P["drift.b0"]
    gproj = ad.matmul(pre, Wh) + b0
    qproj = None
    if posterior:
        aux = enc.back_features if model.smoothing else enc.post_features
        qproj = ad.matmul(pre + aux, Wh) + b0
    scale = diffusion(model, P, pre)

    for m in range(M):
        if m in rec:
            recorded[m] = x
        if keep_states:
            states[:, :, m] = x.value
        if m == M - 1:
            break
        dtm = batch.dt[:, m]
        if not dtm.any():
            continue
        dt3 = dtm[:, None, None]
        xw = ad.matmul(x, Wx)
        hg = mlp_rest(model.drift_spec, P, xw + gproj[:, m][:, None, :], "drift")
        hq, gap = hg, False
        if posterior:
            if model.smoothing:
                hq, gap = mlp_rest(model.drift_spec, P, xw + qproj[:, m][:, None, :], "drift"), True
            elif batch.obs[:, m].any():
                hq_obs = mlp_rest(model.drift_spec, P, xw + qproj[:, m][:, None, :], "drift")
                hq, gap = ad.where(batch.obs[:, m][:, None, None], hq_obs, hg), True
        scale_m = scale[:, m][:, None, :]
        e = eps[:, :, m]
        x_next = euler_step(x, hq, scale_m, dt3, e, node_index=m)
        if gap:
            kl = kl + kl_increment(hq, hg, scale_m, dt3)
            logw = logw + logw_increment(hq, hg, scale_m, dt3, e)
        x = x_next
    return LatentPath(states, eps, kl, logw, recorded)


def decode_columns(model: VSDN, P: Mapping, enc: EncoderOutput, paths: LatentPath, cols: np.ndarray):
    """Decode the recorded states at grid columns ``cols``: (B, K, n_cols, d2) params."""
    states = ad.stack([paths.state_nodes[int(m)] for m in cols], axis=2)
    B = states.shape[0]
    pre = ad.reshape(enc.pre_features[:, cols], (B, 1, len(cols), model.config.d_h))
    return decode(model, P, states, pre)


@dataclass
class BatchLoss:
    objective: object      # scalar node to minimise
    vae: np.ndarray        # (B,) per-sequence bounds
    iwae: np.ndarray
    kl: np.ndarray         # (B,) mean over samples
    recon: np.ndarray      # (B,) mean over samples
    sq_err: float
    n_cells: int
    n_frames: np.ndarray   # (B,)


def batch_loss(model: VSDN, P: Mapping, batch: GridBatch, eps: np.ndarray, loss: str = "vae",
               normalizer: Optional[float] = None) -> BatchLoss:
    """Negative bound summed over the batch, divided by ``normalizer`` (default: frame count)."""
    c = model.config
    enc = encode(model, P, batch, need_posterior=True)
    cols = batch.obs_columns()
    paths = simulate_paths(model, P, batch, enc, eps, posterior=True, record_cols=cols)
    obs = decode_columns(model, P, enc, paths, cols)
    y = batch.values[:, cols][:, None]
    mask = batch.mask[:, cols][:, None]
    ll = gaussian_loglik(y, mask, obs)                   # (B, K, n_cols)
    vae = vae_bound(paths, ll, c.beta)
    iwae = iwae_bound(paths, ll)
    bound = vae if loss == "vae" else mixed_objective(vae, iwae, c.alpha)
    n_frames = batch.obs.sum(axis=1)
    norm = float(n_frames.sum()) if normalizer is None else float(normalizer)
    objective = -ad.sum(bound) * (1.0 / norm)
    err = (np.mean(obs.mean.value, axis=1) - batch.values[:, cols]) ** 2
    m2 = batch.mask[:, cols]
    return BatchLoss(objective, np.atleast_1d(vae.value), np.atleast_1d(iwae.value),
                     paths.kl_accum.value.mean(axis=1), ll.value.sum(axis=-1).mean(axis=1),
                     float(np.sum(err * m2)), int(m2.sum()), n_frames)


def loss_report(parts: Sequence[BatchLoss], alpha: float) -> LossReport:
    vae = np.concatenate([p.vae for p in parts])
    iwae = np.concatenate([p.iwae for p in parts])
    kl = np.concatenate([p.kl for p in parts])
    recon = np.concatenate([p.recon for p in parts])
    frames = int(np.sum([p.n_frames.sum() for p in parts]))
    sq = float(np.sum([p.sq_err for p in parts]))
    cells = int(np.sum([p.n_cells for p in parts]))
    return LossReport(
        vae_bound=float(vae.sum() / frames), iwae_bound=float(iwae.sum() / frames),
        mixed=float(((1 - alpha) * vae + alpha * iwae).sum() / frames),
        kl_total=float(kl.sum()), recon_total=float(recon.sum()),
        per_frame_nll=float(-recon.sum() / frames), frame_mse=sq / max(cells, 1), n_frames=frames)


# ---------------------------------------------------------------------------
# single-series API


def sample_posterior_paths(model: VSDN, series: TimeSeries, grid: Optional[TimeGrid], K: int, seed: int,
                           P: Optional[Mapping] = None) -> LatentPath:
    """K posterior paths for one series with KL and log-weights accumulated."""
    if K < 1:
        raise ContractViolation("K must be >= 1")
    batch = _single(series, grid, model.config.max_dt)
    P = model.params() if P is None else P
    enc = encode(model, P, batch)
    eps = draw_noise(batch, K, model.config.d1, seed)
    p = simulate_paths(model, P, batch, enc, eps, posterior=True, keep_states=True)
    return LatentPath(p.states[0], eps[0], _squeeze0(p.kl_accum), _squeeze0(p.logw_accum))


def _squeeze0(x):
    return x.value[0] if isinstance(x, ad.DiffNode) and not x.requires_grad else x[0]


@dataclass
class PredictionResult:
    times: np.ndarray          # frame times that were scored
    nll: np.ndarray            # per-frame predictive NLL
    mse: np.ndarray            # per-frame mean squared error over observed dims
    point: np.ndarray          # (n, d2) sample-average decoder means
    n_obs_dims: np.ndarray
    uid: np.ndarray


def _score(model, P, batch, enc, paths, cols, y, mask, valid, S):
    obs = decode_columns(model, P, enc, paths, cols)
    ll = gaussian_loglik(y[:, None], mask[:, None], obs).value          # (B, S, n)
    nll = -(ad.logsumexp(ll, axis=1).value - np.log(S))                   # (B, n)
    point = obs.mean.value.mean(axis=1)                                  # (B, n, d2)
    cnt = mask.sum(axis=-1)
    se = np.where(mask, (point - y) ** 2, 0.0).sum(axis=-1) / np.maximum(cnt, 1)
    bidx, cidx = np.nonzero(valid)
    return PredictionResult(batch.nodes[bidx, cols[cidx]], nll[bidx, cidx], se[bidx, cidx],
                            point[bidx, cidx], cnt[bidx, cidx], batch.uids[bidx])


def predict_batch(model: VSDN, batch: GridBatch, S: int, seed: int, tag: int = 1,
                  P: Optional[Mapping] = None) -> PredictionResult:
    """One-step-ahead scoring of every observed frame after the first with the prior SDE."""
    if S < 1:
        raise ContractViolation("number of prediction samples must be >= 1")
    P = model.params() if P is None else P
    enc = encode(model, P, batch, need_posterior=False)
    cols = batch.obs_columns()
    eps = draw_noise(batch, S, model.config.d1, seed, tag)
    paths = simulate_paths(model, P, batch, enc, eps, posterior=False, record_cols=cols)
    valid = batch.obs[:, cols].copy()
    for b, fn in enumerate(batch.frame_nodes):
        if fn.size:
            valid[b, np.searchsorted(cols, fn[0])] = False
    return _score(model, P, batch, enc, paths, cols, batch.values[:, cols], batch.mask[:, cols], valid, S)


def predict_sequence(model: VSDN, series: TimeSeries, S: int, seed: int = 0) -> PredictionResult:
    if series.n < 2:
        raise ContractViolation("prediction needs at least two observations")
    return predict_batch(model, make_batch([series], model.config.max_dt), S, seed)


def interpolate_batch(model: VSDN, batch: GridBatch, S: int, seed: int, tag: int = 2,
                      P: Optional[Mapping] = None) -> PredictionResult:
    """Decode posterior paths (conditioned on the observed frames) at the query nodes."""
    if S < 1:
        raise ContractViolation("number of samples must be >= 1")
    if batch.query is None:
        raise ContractViolation("batch has no query frames")
    P = model.params() if P is None else P
    cols = batch.query_columns()
    enc = encode(model, P, batch, need_posterior=True)
    eps = draw_noise(batch, S, model.config.d1, seed, tag)
    paths = simulate_paths(model, P, batch, enc, eps, posterior=True, record_cols=cols)
    if cols.size == 0:
        empty = np.empty(0)
        return PredictionResult(empty, empty, empty, np.empty((0, model.config.d2)), empty, empty)
    return _score(model, P, batch, enc, paths, cols, batch.query_values[:, cols], batch.query_mask[:, cols],
                  batch.query[:, cols], S)


def interpolate(model: VSDN, series_observed: TimeSeries, query_times, S: int, seed: int = 0,
                heldout: Optional[TimeSeries] = None, horizon: Optional[float] = None):
    """Posterior decoding at ``query_times``.

    Returns (GaussianObsParams per query with sample axis, PredictionResult or
    None).  Metrics need ``heldout`` values at exactly those times.
    """
    query_times = np.asarray(query_times, dtype=np.float64).reshape(-1)
    if horizon is not None and query_times.size and query_times.max() > horizon:
        raise ContractViolation("query time beyond horizon")
    if query_times.size and query_times.min() < 0:
        raise ContractViolation("query time before 0")
    if query_times.size == 0:
        return GaussianObsParams(np.empty((S, 0, model.config.d2)), np.empty((S, 0, model.config.d2))), None
    if heldout is None:
        heldout = TimeSeries(query_times, np.zeros((query_times.size, model.config.d2)),
                             np.ones((query_times.size, model.config.d2), dtype=bool), series_observed.uid)
    elif not np.allclose(heldout.times, query_times):
        raise ContractViolation("held-out frames must sit at the query times")
    batch = make_batch([series_observed], model.config.max_dt, horizon, queries=[heldout])
    P = model.params()
    cols = batch.query_columns()
    enc = encode(model, P, batch, need_posterior=True)
    eps = draw_noise(batch, S, model.config.d1, seed, 2)
    paths = simulate_paths(model, P, batch, enc, eps, posterior=True, record_cols=cols)
    obs = decode_columns(model, P, enc, paths, cols)
    params = GaussianObsParams(obs.mean.value[0], obs.log_std.value[0])
    return params, interpolate_batch(model, batch, S, seed, P=P)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: VSDN, meta: Optional[dict] = None, rng_state: Optional[dict] = None):
    """Write a ``.npz`` checkpoint; layout is documented in the README."""
    store = model.store
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "config_json": np.array(json.dumps(asdict(model.config), sort_keys=True)),
        "param_names": np.array(json.dumps(store.names())),
        "step_count": np.array(store.step_count, dtype=np.int64),
        "rng_state_json": np.array(json.dumps(rng_state or {}, sort_keys=True)),
        "meta_json": np.array(json.dumps(meta or {}, sort_keys=True, default=float)),
    }
    for name in store.names():
        arrays[f"param/{name}"] = store.params[name]
        arrays[f"adam_m/{name}"] = store.adam_m[name]
        arrays[f"adam_v/{name}"] = store.adam_v[name]
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (model, meta, rng_state)."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise IngestionError(f"{path}: unknown checkpoint format {z['format']}")
        cfg = model_config_from_dict(json.loads(str(z["config_json"])))
        store = ParamStore()
        for name in json.loads(str(z["param_names"])):
            store.add(name, z[f"param/{name}"])
            store.adam_m[name] = z[f"adam_m/{name}"].copy()
            store.adam_v[name] = z[f"adam_v/{name}"].copy()
        store.step_count = int(z["step_count"])
        meta = json.loads(str(z["meta_json"]))
        rng_state = json.loads(str(z["rng_state_json"]))
    return VSDN(cfg, store=store), meta, rng_state
