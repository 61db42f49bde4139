"""Pack several sporadic series onto padded per-sequence solver grids.

Every sequence keeps its own grid (built by ``build_time_grid``); shorter
grids are padded with zero-length intervals at the end.  A zero-length step
is the identity for every recurrence in the model, so a sequence's results do
not depend on which other sequences share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .datasets import TimeSeries
from .errors import ContractViolation
from .sde import TIME_TOL, TimeGrid, build_time_grid


@dataclass
class GridBatch:
    grids: List[TimeGrid]
    nodes: np.ndarray        # (B, M)
    dt: np.ndarray           # (B, M-1), zero on padding
    obs: np.ndarray          # (B, M) bool, node carries an observed frame
    values: np.ndarray       # (B, M, d2) zero-filled
    mask: np.ndarray         # (B, M, d2) bool
    frame_nodes: List[np.ndarray]
    uids: np.ndarray
    query: Optional[np.ndarray] = None          # (B, M) bool
    query_values: Optional[np.ndarray] = None   # (B, M, d2)
    query_mask: Optional[np.ndarray] = None     # (B, M, d2)
    query_nodes: Optional[List[np.ndarray]] = None

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[1]

    @property
    def cell_input(self) -> np.ndarray:
        """Recurrent cell input: zero-filled values followed by mask bits."""
        return np.concatenate([np.where(self.mask, self.values, 0.0), self.mask.astype(np.float64)], axis=-1)

    def obs_columns(self) -> np.ndarray:
        return np.flatnonzero(self.obs.any(axis=0))

    def query_columns(self) -> np.ndarray:
        return np.flatnonzero(self.query.any(axis=0))


def _merge_times(a, b):
    allt = np.union1d(a, b)
    if allt.size > 1:
        keep = np.concatenate([[True], np.diff(allt) > TIME_TOL])
        allt = allt[keep]
    return allt


def _locate(nodes, times):
    idx = np.searchsorted(nodes, times - TIME_TOL)
    idx = np.clip(idx, 0, len(nodes) - 1)
    if times.size and np.max(np.abs(nodes[idx] - times)) > 1e-7:
        raise ContractViolation("time not found on grid")
    return idx


def make_batch(series: Sequence[TimeSeries], max_dt: float, horizon: Optional[float] = None,
               queries: Optional[Sequence[Optional[TimeSeries]]] = None) -> GridBatch:
    """Build the padded batch.  ``queries`` carries held-out frames to decode at."""
    if not series:
        raise ContractViolation("empty batch")
    d2 = series[0].dim
    grids, frame_nodes, query_nodes = [], [], []
    for b, s in enumerate(series):
        if s.dim != d2:
            raise ContractViolation("all series in a batch must share the data dimension")
        q = queries[b] if queries is not None else None
        qt = q.times if q is not None else np.empty(0)
        allt = _merge_times(s.times, qt)
        h = horizon
        if h is None:
            h = float(allt[-1]) if allt.size else 0.0
        elif allt.size and allt[-1] > h + TIME_TOL:
            raise ContractViolation(f"series {s.uid}: time {allt[-1]} beyond horizon {h}")
        grid = build_time_grid(allt, max_dt, h)
        if s.n:
            grid.obs_index = {i: int(j) for i, j in enumerate(_locate(grid.nodes, s.times))}
        else:
            grid.obs_index = {}
        grids.append(grid)
        frame_nodes.append(np.array([grid.obs_index[i] for i in range(s.n)], dtype=int))
        query_nodes.append(_locate(grid.nodes, qt) if q is not None else np.empty(0, dtype=int))

    B = len(series)
    M = max(len(g) for g in grids)
    nodes = np.zeros((B, M))
    dt = np.zeros((B, max(M - 1, 0)))
    obs = np.zeros((B, M), dtype=bool)
    values = np.zeros((B, M, d2))
    mask = np.zeros((B, M, d2), dtype=bool)
    for b, (s, g) in enumerate(zip(series, grids)):
        n = len(g)
        nodes[b, :n] = g.nodes
        nodes[b, n:] = g.nodes[-1]
        dt[b, :n - 1] = g.dt_values
        fn = frame_nodes[b]
        obs[b, fn] = True
        values[b, fn] = s.values
        mask[b, fn] = s.mask
    batch = GridBatch(grids, nodes, dt, obs, values, mask, frame_nodes,
                      np.array([s.uid for s in series], dtype=np.int64))
    if queries is not None:
        query = np.zeros((B, M), dtype=bool)
        qv = np.zeros((B, M, d2))
        qm = np.zeros((B, M, d2), dtype=bool)
        for b, q in enumerate(queries):
            if q is None or q.n == 0:
                continue
            qn = query_nodes[b]
            query[b, qn] = True
            qv[b, qn] = q.values
            qm[b, qn] = q.mask
        batch.query, batch.query_values, batch.query_mask = query, qv, qm
        batch.query_nodes = query_nodes
    return batch


_MOD = 1 << 63


def draw_noise(batch: GridBatch, K: int, d1: int, seed: int, tag: int = 0) -> np.ndarray:
    """Standard normal draws (B, K, M-1, d1), one stream per (seed, tag, sequence, sample).

    Padding intervals get zeros.  Because the stream is keyed by the
    sequence uid and sample index, sample k of a sequence is the same path
    whatever K or batch composition is used.
    """
    B, M = batch.size, batch.n_nodes
    eps = np.zeros((B, K, max(M - 1, 0), d1))
    for b in range(B):
        n_int = len(batch.grids[b]) - 1
        for k in range(K):
            rng = np.random.default_rng([int(seed) % _MOD, int(tag) % _MOD, int(batch.uids[b]) % _MOD, k])
            eps[b, k, :n_int] = rng.standard_normal((n_int, d1))
    return eps
