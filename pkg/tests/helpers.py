import numpy as np

from vsdn.config import VSDNConfig
from vsdn.datasets import DEFAULT_OU, TimeSeries, simulate_double_ou, sporadify
from vsdn.model import VSDN


def small_config(**kw):
    base = dict(d1=2, d2=2, d_h=4, mlp_hidden=(6,), activation="tanh", max_dt=0.05, K=3, prediction_samples=4)
    base.update(kw)
    return VSDNConfig(**base)


def small_model(seed=0, **kw):
    return VSDN(small_config(**kw), seed=seed)


def toy_series(n_seq=3, horizon=1.0, seed=0, p_time=0.4, p_dim=0.3):
    return [sporadify(s, p_time, p_dim, seed=seed)
            for s in simulate_double_ou(DEFAULT_OU, n_seq, horizon=horizon, seed=seed)]


def zero_model(**kw):
    """Every parameter zero: features stay at 0 and posterior equals prior."""
    m = small_model(**kw)
    for k in m.store.names():
        m.store.params[k][...] = 0.0
    return m


def series(times, values, mask=None, uid=0):
    values = np.asarray(values, dtype=float)
    return TimeSeries(times, values, np.ones_like(values, bool) if mask is None else mask, uid)
