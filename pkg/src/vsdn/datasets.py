"""Sporadic time series: containers, Double-OU generation, masking, CSV I/O.

CSV schema (UTF-8, header required)::

    series_id,time,value_1,...,value_D,mask_1,...,mask_D

One row per observation time.  A cell with ``mask_j = 0`` may be left empty;
it is stored as 0.0 regardless of its content.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractViolation, IngestionError

log = logging.getLogger(__name__)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TimeSeries:
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    uid: int = 0
    norm_stats: Optional[NormStats] = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        n = self.times.size
        if self.values.ndim != 2 or self.values.shape[0] != n or self.mask.shape != self.values.shape:
            raise IngestionError(
                f"series {self.uid}: values {self.values.shape} / mask {self.mask.shape} do not match {n} times")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise IngestionError(f"series {self.uid}: times must be strictly ascending")
        if n and not np.all(self.mask.any(axis=1)):
            row = int(np.flatnonzero(~self.mask.any(axis=1))[0])
            raise IngestionError(f"series {self.uid}: row {row} has no observed dimension")
        # canonical zero-fill; also neutralises NaN placeholders
        self.values = np.where(self.mask, self.values, 0.0)
        if not np.all(np.isfinite(self.values)):
            raise IngestionError(f"series {self.uid}: non-finite observed value")

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def subset(self, rows) -> "TimeSeries":
        rows = np.asarray(rows)
        return TimeSeries(self.times[rows], self.values[rows], self.mask[rows], self.uid, self.norm_stats)


@dataclass
class OUParams:
    theta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if not (self.theta.shape == self.mu.shape == self.sigma.shape and self.theta.ndim == 1):
            raise ConfigError("theta, mu, sigma must be 1-D arrays of equal length")
        if np.any(self.theta <= 0) or np.any(self.sigma <= 0):
            raise ConfigError("OU theta and sigma must be positive")

    @property
    def stationary_var(self):
        return self.sigma ** 2 / (2 * self.theta)


DEFAULT_OU = OUParams(theta=(1.0, 0.5), mu=(1.0, -1.0), sigma=(0.4, 0.3))


def simulate_double_ou(params: OUParams, n_seq: int, horizon: float = 10.0, sim_dt: float = 0.01,
                       seed: int = 0, lattice: float = 0.1, x0=None) -> List[TimeSeries]:
    """Euler-Maruyama OU sequences recorded densely every ``lattice`` time units.

    Each sequence draws from its own stream seeded by (seed, index); the start
    is stationary unless ``x0`` is given.
    """
    if horizon <= 0 or sim_dt <= 0 or lattice <= 0:
        raise ConfigError("horizon, sim_dt and lattice must be positive")
    if np.any(params.theta * sim_dt >= 1):
        raise ConfigError("unstable OU config: theta * sim_dt >= 1")
    if np.any(params.theta * sim_dt > 0.01):
        raise ConfigError("sim_dt must not exceed 0.01 / max(theta)")
    per_frame = lattice / sim_dt
    if abs(per_frame - round(per_frame)) > 1e-6:
        raise ConfigError("lattice must be an integer multiple of sim_dt")
    per_frame = int(round(per_frame))
    n_frames = int(np.floor(horizon / lattice + 1e-9)) + 1
    n_steps = (n_frames - 1) * per_frame
    d = params.theta.size

    noise = np.empty((n_seq, n_steps, d))
    start = np.empty((n_seq, d))
    for i in range(n_seq):
        rng = np.random.default_rng([seed, i])
        start[i] = rng.standard_normal(d)
        noise[i] = rng.standard_normal((n_steps, d))
    if x0 is None:
        x = params.mu + np.sqrt(params.stationary_var) * start
    else:
        x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_seq, d)).copy()

    frames = np.empty((n_seq, n_frames, d))
    frames[:, 0] = x
    sq = np.sqrt(sim_dt)
    for k in range(n_steps):
        x = x + params.theta * (params.mu - x) * sim_dt + params.sigma * sq * noise[:, k]
        if (k + 1) % per_frame == 0:
            frames[:, (k + 1) // per_frame] = x
    times = np.arange(n_frames) * lattice
    full = np.ones((n_frames, d), dtype=bool)
    return [TimeSeries(times, frames[i], full, uid=i) for i in range(n_seq)]


def sporadify(series: TimeSeries, p_time: float, p_dim: float, seed: int = 0,
              max_tries: int = 1000) -> TimeSeries:
    """Drop frames with probability ``p_time``, then cells with probability ``p_dim``.

    Rows are never left empty and at least two rows survive; both are
    enforced by re-drawing from the same stream, so the result is a pure
    function of (series, p_time, p_dim, seed).
    """
    if not (0 <= p_time < 1 and 0 <= p_dim < 1):
        raise ConfigError("p_time and p_dim must lie in [0, 1)")
    if series.n < 2:
        raise ConfigError(f"series {series.uid} has fewer than 2 rows")
    rng = np.random.default_rng([seed, series.uid])
    for _ in range(max_tries):
        keep = rng.random(series.n) >= p_time
        if keep.sum() >= 2:
            break
    else:
        raise ConfigError(f"could not retain 2 rows of series {series.uid} with p_time={p_time}")
    rows = np.flatnonzero(keep)
    mask = series.mask[rows].copy()
    for r in range(rows.size):
        base = mask[r]
        for _ in range(max_tries):
            cand = base & (rng.random(base.size) >= p_dim)
            if cand.any():
                mask[r] = cand
                break
        else:
            raise ConfigError(f"could not keep a nonempty row in series {series.uid}")
    return TimeSeries(series.times[rows], series.values[rows], mask, series.uid, series.norm_stats)


def holdout_frames(series: TimeSeries, frac: float = 0.5, seed: int = 0) -> Tuple[TimeSeries, TimeSeries]:
    """Split frames into (observed, held-out) for the interpolation task."""
    if not 0 < frac < 1:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, series.uid, 1])
    n_out = min(int(np.floor(series.n * frac)), series.n - 1)
    out = np.zeros(series.n, dtype=bool)
    out[rng.choice(series.n, size=n_out, replace=False)] = True
    return series.subset(np.flatnonzero(~out)), series.subset(np.flatnonzero(out))


def split_dataset(series: Sequence[TimeSeries], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Seeded split by whole sequences into (train, val, test)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ConfigError("split fractions must be three nonnegative numbers summing to 1")
    order = np.random.default_rng(seed).permutation(len(series))
    n_train = int(round(fractions[0] * len(series)))
    n_val = int(round(fractions[1] * len(series)))
    pick = lambda idx: [series[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def segment_by_length(series: TimeSeries, length: int) -> List[TimeSeries]:
    """Cut a long series into consecutive pieces of ``length`` rows, times re-based to 0."""
    if length < 2:
        raise ConfigError("segment length must be at least 2")
    out = []
    for k, start in enumerate(range(0, series.n - length + 1, length)):
        piece = series.subset(np.arange(start, start + length))
        piece.times = piece.times - piece.times[0]
        piece.uid = series.uid * 100000 + k
        out.append(piece)
    return out


# ---------------------------------------------------------------------------
# normalisation


def fit_norm_stats(train: Sequence[TimeSeries]) -> NormStats:
    if not train:
        raise ConfigError("cannot fit normalisation on an empty split")
    vals = np.concatenate([s.values for s in train])
    mask = np.concatenate([s.mask for s in train])
    counts = mask.sum(axis=0)
    for j, c in enumerate(counts):
        if c == 0:
            raise ConfigError(f"dimension {j + 1} has no observations in the training split")
    mean = (vals * mask).sum(axis=0) / counts
    var = (((vals - mean) * mask) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    for j, s in enumerate(std):
        if not s > 0:
            raise ConfigError(f"dimension {j + 1} has zero standard deviation")
    return NormStats(mean, std)


def normalize(dataset: Sequence[TimeSeries], stats: Optional[NormStats] = None,
              stats_from: Optional[Sequence[TimeSeries]] = None):
    """Masked per-dimension standardisation; statistics come from the train split.

    Returns (normalised series, stats).  Pass the *train* split as
    ``stats_from`` (or precomputed ``stats``) when normalising val/test.
    """
    if stats is None:
        stats = fit_norm_stats(dataset if stats_from is None else stats_from)
    out = []
    for s in dataset:
        v = np.where(s.mask, (s.values - stats.mean) / stats.std, 0.0)
        out.append(TimeSeries(s.times, v, s.mask, s.uid, stats))
    return out, stats


def denormalize(series: TimeSeries, stats: Optional[NormStats] = None) -> TimeSeries:
    stats = stats or series.norm_stats
    if stats is None:
        raise ContractViolation("series carries no normalisation statistics")
    v = np.where(series.mask, series.values * stats.std + stats.mean, 0.0)
    return TimeSeries(series.times, v, series.mask, series.uid, None)


# ---------------------------------------------------------------------------
# CSV


def save_sporadic_csv(series: Sequence[TimeSeries], path) -> None:
    if not series:
        raise ContractViolation("nothing to write")
    d = series[0].dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "time"] + [f"value_{j + 1}" for j in range(d)]
                   + [f"mask_{j + 1}" for j in range(d)])
        for s in series:
            for i in range(s.n):
                vals = [repr(float(v)) if m else "" for v, m in zip(s.values[i], s.mask[i])]
                w.writerow([s.uid, repr(float(s.times[i]))] + vals + [int(m) for m in s.mask[i]])


def load_sporadic_csv(path) -> List[TimeSeries]:
    """Read the sporadic CSV schema; rows are grouped by series and sorted by time."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        vcols = [i for i, h in enumerate(header) if h.startswith("value_")]
        mcols = [i for i, h in enumerate(header) if h.startswith("mask_")]
        if header[:2] != ["series_id", "time"] or not vcols or len(vcols) != len(mcols):
            raise IngestionError(f"{path}: header must be series_id,time,value_1..value_D,mask_1..mask_D")
        groups = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                sid = int(row[0])
                t = float(row[1])
                mask = [int(row[i]) for i in mcols]
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if any(m not in (0, 1) for m in mask):
                raise IngestionError(f"{path}:{lineno}: mask entries must be 0 or 1")
            vals = []
            for i, m in zip(vcols, mask):
                cell = row[i].strip()
                if m and not cell:
                    raise IngestionError(f"{path}:{lineno}: mask bit set on empty value")
                try:
                    vals.append(float(cell) if m else 0.0)
                except ValueError:
                    raise IngestionError(f"{path}:{lineno}: bad value {cell!r}") from None
            if not any(mask):
                raise IngestionError(f"{path}:{lineno}: row has no observed dimension")
            groups.setdefault(sid, []).append((t, lineno, vals, mask))
    out = []
    for sid in sorted(groups):
        rows = sorted(groups[sid], key=lambda r: r[0])
        for a, b in zip(rows[:-1], rows[1:]):
            if a[0] == b[0]:
                raise IngestionError(f"{path}:{b[1]}: duplicate time {b[0]} in series {sid}")
        out.append(TimeSeries([r[0] for r in rows], [r[2] for r in rows], [r[3] for r in rows], uid=sid))
    return out
