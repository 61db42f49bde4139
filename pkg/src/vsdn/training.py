"""Training loop, early stopping and the prediction / interpolation metrics."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamHyper, adam_step, clip_by_global_norm
from .batch import draw_noise, make_batch
from .config import TrainConfig
from .datasets import TimeSeries
from .errors import ConfigError, PathFault, TrainingFault
from .model import (VSDN, BatchLoss, PredictionResult, batch_loss, interpolate_batch, loss_report,
                    predict_batch, save_checkpoint)
from .objectives import LossReport

HISTORY_COLUMNS = ["epoch", "split", "vae_bound", "iwae_bound", "mixed", "kl_total", "recon_total",
                   "nll_per_frame", "mse", "wall_time"]
METRIC_COLUMNS = ["task", "nll_per_frame", "mse", "n_frames", "wall_time"]

# noise-stream tags; training uses TRAIN_TAG + epoch
VAL_TAG = 5
TRAIN_TAG = 10_000


@dataclass
class Metrics:
    task: str
    nll_per_frame: float
    mse: float
    n_frames: int
    wall_time: float

    def row(self):
        return [self.task, self.nll_per_frame, self.mse, self.n_frames, self.wall_time]


@dataclass
class TrainResult:
    model: VSDN
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = -np.inf
    epochs_run: int = 0


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _map(fn, jobs, threads):
    # results come back in job order whatever the thread count
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def _history_row(epoch, split, rep: LossReport, wall):
    return dict(epoch=epoch, split=split, vae_bound=rep.vae_bound, iwae_bound=rep.iwae_bound, mixed=rep.mixed,
                kl_total=rep.kl_total, recon_total=rep.recon_total, nll_per_frame=rep.per_frame_nll,
                mse=rep.frame_mse, wall_time=wall)


def write_history(rows, path, include_wall_time=True):
    cols = HISTORY_COLUMNS if include_wall_time else HISTORY_COLUMNS[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def bound_report(model: VSDN, data: Sequence[TimeSeries], K: int, loss: str, seed: int, tag: int,
                 chunk_size: int = 50, threads: int = 1) -> LossReport:
    """Bounds on a split without gradients (samples drawn from fixed streams)."""
    c = model.config
    P = model.params()

    def run(chunk):
        b = make_batch(chunk, c.max_dt)
        return batch_loss(model, P, b, draw_noise(b, K, c.d1, seed, tag), loss)

    return loss_report(_map(run, _chunks(list(data), chunk_size), threads), c.alpha)


def _grad_chunk(model, chunk, loss, seed, tag, normalizer, K):
    c = model.config
    b = make_batch(chunk, c.max_dt)
    eps = draw_noise(b, K, c.d1, seed, tag)
    with ad.Tape():
        P = model.store.leaves()
        part = batch_loss(model, P, b, eps, loss, normalizer=normalizer)
        val = float(part.objective.value)
        if not np.isfinite(val):
            return part, None
        grads = ad.backward(part.objective, P)
    part.objective = val
    return part, grads


def train(cfg: TrainConfig, train_set: Sequence[TimeSeries], val_set: Sequence[TimeSeries],
          model: Optional[VSDN] = None, history_path=None, checkpoint_path=None,
          log: Optional[Callable[[str], None]] = None, max_epochs: Optional[int] = None) -> TrainResult:
    """Adam on the negative bound with early stopping on the validation bound.

    The returned model holds the best-validation parameters.  ``history``
    has one row per (epoch, split) in ``HISTORY_COLUMNS`` order.
    """
    if not train_set or not val_set:
        raise ConfigError("training and validation splits must be nonempty")
    mc = cfg.model
    if train_set[0].dim != mc.d2:
        raise ConfigError(f"data dimension {train_set[0].dim} != model d2 {mc.d2}")
    model = model or VSDN(mc, seed=cfg.seed)
    hyper = AdamHyper(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    criterion = "vae_bound" if cfg.loss == "vae" else "mixed"
    result = TrainResult(model)
    best_store = model.store.copy()
    stale = 0
    t0 = time.perf_counter()
    n_epochs = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    train_set = list(train_set)

    for epoch in range(1, n_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        parts: List[BatchLoss] = []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            members = [train_set[i] for i in order[start:start + cfg.batch_size]]
            normalizer = float(sum(s.n for s in members))
            tag = TRAIN_TAG + epoch
            try:
                outs = _map(lambda ch: _grad_chunk(model, ch, cfg.loss, cfg.seed, tag, normalizer, mc.K),
                            _chunks(members, cfg.chunk_size), cfg.threads)
            except PathFault as exc:
                raise TrainingFault(f"epoch {epoch} batch {bi}: {exc}") from exc
            total = {}
            for part, grads in outs:
                if grads is None:
                    raise TrainingFault(f"epoch {epoch} batch {bi}: non-finite loss")
                parts.append(part)
                for k, g in grads.items():
                    total[k] = total[k] + g if k in total else g
            if cfg.clip_norm is not None:
                total, _ = clip_by_global_norm(total, cfg.clip_norm)
            adam_step(model.store, total, hyper)

        train_rep = loss_report(parts, mc.alpha)
        val_rep = bound_report(model, val_set, mc.K, cfg.loss, cfg.seed, VAL_TAG, cfg.chunk_size, cfg.threads)
        wall = time.perf_counter() - t0
        result.history.append(_history_row(epoch, "train", train_rep, wall))
        result.history.append(_history_row(epoch, "val", val_rep, wall))
        result.epochs_run = epoch
        score = getattr(val_rep, criterion)
        if not np.isfinite(score):
            raise TrainingFault(f"epoch {epoch}: non-finite validation bound")
        if log:
            log(f"epoch {epoch:3d}  train {getattr(train_rep, criterion):+.4f}  val {score:+.4f}  "
                f"val nll {val_rep.per_frame_nll:+.4f}  {wall:.0f}s")
        if score > result.best_val:
            result.best_val, result.best_epoch, stale = score, epoch, 0
            best_store = model.store.copy()
        else:
            stale += 1
        if history_path is not None:
            write_history(result.history, history_path)
        if stale >= cfg.early_stop_patience:
            break

    model.store = best_store
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model,
                        meta=dict(best_epoch=result.best_epoch, best_val=result.best_val, loss=cfg.loss,
                                  epochs_run=result.epochs_run),
                        rng_state=dict(seed=cfg.seed, next_epoch=result.epochs_run + 1))
    return result


def _concat_results(parts: List[PredictionResult]) -> PredictionResult:
    return PredictionResult(*[np.concatenate([getattr(p, f) for p in parts])
                              for f in ("times", "nll", "mse", "point", "n_obs_dims", "uid")])


def evaluate(model: VSDN, dataset: Sequence[TimeSeries], task: str = "prediction", S: Optional[int] = None,
             seed: int = 0, heldout: Optional[Sequence[TimeSeries]] = None, chunk_size: int = 50,
             threads: int = 1, return_frames: bool = False):
    """Per-frame NLL and frame MSE for ``task`` averaged over every scored frame.

    Interpolation needs ``heldout`` (one series of removed frames per input
    series; a ``None`` entry means nothing to recover there).
    """
    if not dataset:
        raise ConfigError("empty dataset")
    if task not in ("prediction", "interpolation"):
        raise ConfigError(f"unknown task {task!r}")
    S = S or model.config.prediction_samples
    t0 = time.perf_counter()
    P = model.params()
    max_dt = model.config.max_dt
    data = list(dataset)
    if task == "prediction":
        jobs = [(c, None) for c in _chunks(data, chunk_size)]
    else:
        if heldout is None or len(heldout) != len(data):
            raise ConfigError("interpolation needs one held-out series per input series")
        jobs = list(zip(_chunks(data, chunk_size), _chunks(list(heldout), chunk_size)))

    def run(job):
        series, held = job
        if held is None:
            return predict_batch(model, make_batch(series, max_dt), S, seed, P=P)
        return interpolate_batch(model, make_batch(series, max_dt, queries=held), S, seed, P=P)

    frames = _concat_results(_map(run, jobs, threads))
    if frames.nll.size == 0:
        raise ConfigError("no frames to score")
    metrics = Metrics(task, float(np.mean(frames.nll)), float(np.mean(frames.mse)), int(frames.nll.size),
                      time.perf_counter() - t0)
    return (metrics, frames) if return_frames else metrics


def write_metrics(metrics: Sequence[Metrics], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow(m.row())
