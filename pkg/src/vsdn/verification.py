"""Executable cross-checks of the derivations behind the model.

Each check returns plain data (rows or a small dataclass) plus a ``passed``
flag; the CLI turns them into CSV reports and exit codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .batch import draw_noise, make_batch
from .datasets import TimeSeries
from .errors import ContractViolation
from .model import VSDN, decode_columns, encode, gaussian_loglik, simulate_paths
from .sde import euler_step, logw_increment, transition_log_density
from .training import train


# ---------------------------------------------------------------------------
# KL between two constant-drift SDEs


@dataclass
class KLOracleResult:
    gap: float
    r_g: float
    analytic: float
    mc: float
    std_err: float

    @property
    def rel_err(self) -> float:
        if self.analytic == 0:
            return abs(self.mc)
        return abs(self.mc - self.analytic) / self.analytic


def kl_mc_oracle(h_q, h_g, r_g, horizon: float = 1.0, dt: float = 1e-3, n_paths: int = 50_000, seed: int = 0,
                 batch: int = 10_000):
    """Closed-form path KL against a Monte-Carlo average of log density ratios.

    Paths are simulated under the posterior drift ``h_q``; every step
    contributes log q(x'|x) - log g(x'|x) from the Gaussian transition
    densities.  Returns (analytic, mc, std_err).
    """
    h_q = np.atleast_1d(np.asarray(h_q, dtype=np.float64))
    h_g = np.atleast_1d(np.asarray(h_g, dtype=np.float64))
    r_g = np.atleast_1d(np.asarray(r_g, dtype=np.float64))
    if np.any(r_g <= 0):
        raise ContractViolation("r_g must be positive")
    if dt <= 0 or horizon <= 0 or n_paths < 2:
        raise ContractViolation("need positive dt and horizon and at least 2 paths")
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * horizon:
        raise ContractViolation("horizon must be a multiple of dt")
    d = np.broadcast(h_q, h_g, r_g).shape[-1]
    analytic = float(0.5 * np.sum(((h_q - h_g) / r_g) ** 2) * horizon)

    rng = np.random.default_rng(seed)
    totals = np.empty(n_paths)
    for start in range(0, n_paths, batch):
        n = min(batch, n_paths - start)
        x = np.zeros((n, d))
        acc = np.zeros(n)
        for _ in range(n_steps):
            eps = rng.standard_normal((n, d))
            x_next = euler_step(x, h_q, r_g, dt, eps)
            acc += transition_log_density(x_next, x, h_q, r_g, dt) - transition_log_density(x_next, x, h_g, r_g, dt)
            x = x_next
        totals[start:start + n] = acc
    return analytic, float(totals.mean()), float(totals.std(ddof=1) / math.sqrt(n_paths))


KL_GRID_GAPS = (0.5, 1.0, 2.0)
KL_GRID_DIFFUSIONS = (0.5, 1.0, 2.0)


def kl_oracle_grid(gaps=KL_GRID_GAPS, diffusions=KL_GRID_DIFFUSIONS, dt=1e-3, n_paths=50_000, seed=0,
                   horizon=1.0) -> List[KLOracleResult]:
    out = []
    for i, gap in enumerate(gaps):
        for j, r in enumerate(diffusions):
            a, m, se = kl_mc_oracle(gap, 0.0, r, horizon, dt, n_paths, seed=[seed, i, j])
            out.append(KLOracleResult(gap, r, a, m, se))
    return out


# ---------------------------------------------------------------------------
# log-weight increment vs. transition density ratio


def logw_identity_check(n_steps: int = 10_000, seed: int = 0, max_dim: int = 4) -> float:
    """Largest |logw_increment - (log g - log q)| over random single steps."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_steps):
        d = int(rng.integers(1, max_dim + 1))
        x = rng.normal(size=d)
        h_q, h_g = rng.uniform(-2, 2, size=d), rng.uniform(-2, 2, size=d)
        r = rng.uniform(0.5, 2.0, size=d)
        dt = float(rng.uniform(1e-3, 0.1))
        eps = rng.standard_normal(d)
        x_next = euler_step(x, h_q, r, dt, eps)
        ratio = transition_log_density(x_next, x, h_g, r, dt) - transition_log_density(x_next, x, h_q, r, dt)
        worst = max(worst, abs(logw_increment(h_q, h_g, r, dt, eps) - ratio))
    return worst


# ---------------------------------------------------------------------------
# weak consistency of the Euler scheme on an OU process


@dataclass
class EulerOUResult:
    mean: float
    var: float
    mean_exact: float
    var_exact: float
    mean_se: float

    @property
    def mean_z(self) -> float:
        return abs(self.mean - self.mean_exact) / self.mean_se

    @property
    def var_rel_err(self) -> float:
        return abs(self.var - self.var_exact) / self.var_exact

    @property
    def passed(self) -> bool:
        return self.mean_z <= 3 and self.var_rel_err <= 0.05


def euler_ou_check(x0: float = 1.0, sigma: float = 1.0, T: float = 1.0, dt: float = 0.01,
                   n_paths: int = 100_000, seed: int = 0) -> EulerOUResult:
    """Simulate dX = -X dt + sigma dW and compare moments at T with the exact ones."""
    rng = np.random.default_rng(seed)
    n = int(round(T / dt))
    x = np.full(n_paths, float(x0))
    diff = np.full(n_paths, float(sigma))
    for _ in range(n):
        x = euler_step(x, -x, diff, dt, rng.standard_normal(n_paths))
    mean_exact = x0 * math.exp(-T)
    var_exact = sigma ** 2 * (1 - math.exp(-2 * T)) / 2
    return EulerOUResult(float(x.mean()), float(x.var(ddof=1)), mean_exact, var_exact,
                         float(x.std(ddof=1) / math.sqrt(n_paths)))


# ---------------------------------------------------------------------------
# tightness of the bounds in K


@dataclass
class BoundRow:
    K: int
    bound: str          # "vae" or "iwae"
    mean: float
    std_err: float
    n_mc: int


@dataclass
class BoundSweep:
    rows: List[BoundRow]
    paired_diff_mean: float   # K=1: mean(iwae - vae)
    paired_diff_se: float

    def table(self):
        return [(r.K, r.bound, r.mean, r.std_err, r.n_mc) for r in self.rows]

    def iwae_rows(self):
        return [r for r in self.rows if r.bound == "iwae"]

    def monotone_within(self, n_se: float = 3.0) -> bool:
        rows = self.iwae_rows()
        return all(b.mean >= a.mean - n_se * math.hypot(a.std_err, b.std_err) for a, b in zip(rows, rows[1:]))

    def k1_matches_vae(self, n_se: float = 4.0) -> bool:
        if self.paired_diff_se == 0:
            return abs(self.paired_diff_mean) < 1e-9
        return abs(self.paired_diff_mean) <= n_se * self.paired_diff_se


def _path_terms(model: VSDN, series: Sequence[TimeSeries], n_samples: int, seed: int, tag: int,
                chunk: int = 2000):
    """Per-sample (recon, kl, logw), each (n_samples,), summed over all given series."""
    c = model.config
    P = model.params()
    recon = np.zeros(n_samples)
    kl = np.zeros(n_samples)
    logw = np.zeros(n_samples)
    for s in series:
        b = make_batch([s], c.max_dt)
        enc = encode(model, P, b)
        cols = b.obs_columns()
        eps_all = draw_noise(b, n_samples, c.d1, seed, tag)
        for start in range(0, n_samples, chunk):
            eps = eps_all[:, start:start + chunk]
            paths = simulate_paths(model, P, b, enc, eps, posterior=True, record_cols=cols)
            obs = decode_columns(model, P, enc, paths, cols)
            ll = gaussian_loglik(b.values[:, cols][:, None], b.mask[:, cols][:, None], obs).value
            sl = slice(start, start + eps.shape[1])
            recon[sl] += ll[0].sum(axis=-1)
            kl[sl] += paths.kl_accum.value[0]
            logw[sl] += paths.logw_accum.value[0]
    return recon, kl, logw


def bound_ordering_sweep(model: VSDN, series: Sequence[TimeSeries], K_list=(1, 5, 25), n_mc: int = 500,
                         seed: int = 0) -> BoundSweep:
    """Monte-Carlo means of the VAE bound and of the IWAE bound at each K.

    Every (K, replicate) pair uses its own fresh block of K sample paths.
    Bounds are per frame (summed over ``series``, divided by the frame count).
    """
    K_list = [int(k) for k in K_list]
    if not K_list or K_list != sorted(K_list) or K_list[0] < 1:
        raise ContractViolation("K_list must be ascending positive integers")
    if n_mc < 100:
        raise ContractViolation("n_mc must be at least 100")
    if not series:
        raise ContractViolation("need at least one series")
    n_frames = sum(s.n for s in series)
    total = n_mc * sum(K_list)
    recon, kl, logw = _path_terms(model, series, total, seed, tag=7)
    beta = model.config.beta
    rows = []
    offset = 0
    paired = None
    for K in K_list:
        sl = slice(offset, offset + n_mc * K)
        offset += n_mc * K
        r, k_, w = recon[sl].reshape(n_mc, K), kl[sl].reshape(n_mc, K), logw[sl].reshape(n_mc, K)
        vae = (r - beta * k_).mean(axis=1) / n_frames
        lw = w + r
        top = lw.max(axis=1, keepdims=True)
        iwae = (top[:, 0] + np.log(np.exp(lw - top).mean(axis=1))) / n_frames
        for name, v in (("vae", vae), ("iwae", iwae)):
            rows.append(BoundRow(K, name, float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_mc)), n_mc))
        if K == 1:
            paired = iwae - vae
    if paired is None:
        d_mean, d_se = float("nan"), float("nan")
    else:
        d_mean, d_se = float(paired.mean()), float(paired.std(ddof=1) / math.sqrt(n_mc))
    return BoundSweep(rows, d_mean, d_se)


# ---------------------------------------------------------------------------
# noise injection through a state-dependent diffusion


def chain_rule_gradients(xs, eps, dt, dH_dX, dR_dX, dH_dphi, dR_dtheta):
    """General three-step backpropagation for L = X_3 along an Euler path.

    ``xs`` holds X_0..X_3, ``eps`` the draws eps_1..eps_3; the derivative
    callables take the state X_{k-1} and return scalars.  Step k contributes
    (prod over j > k of J_j) * (dH/dphi dt  resp.  dR/dtheta sqrt(dt) eps_k)
    with J_j = 1 + dH/dX dt + dR/dX sqrt(dt) eps_j.
    """
    sq = math.sqrt(dt)
    n = len(eps)
    jac = [1 + dH_dX(xs[j - 1]) * dt + dR_dX(xs[j - 1]) * sq * eps[j - 1] for j in range(1, n + 1)]
    g_phi = g_theta = 0.0
    for k in range(1, n + 1):
        carry = float(np.prod(jac[k:]))
        g_phi += carry * dH_dphi(xs[k - 1]) * dt
        g_theta += carry * dR_dtheta(xs[k - 1]) * sq * eps[k - 1]
    return g_phi, g_theta


def closed_form_case_a(dt, eps):
    """Constant drift phi, constant diffusion theta."""
    sq = math.sqrt(dt)
    return 3 * dt, sq * (eps[0] + eps[1] + eps[2])


def closed_form_case_b(dt, eps, theta, xs):
    """Constant drift phi, diffusion theta * X."""
    sq = math.sqrt(dt)
    j3 = 1 + theta * sq * eps[2]
    j2 = 1 + theta * sq * eps[1]
    g_phi = dt * (1 + j3 + j3 * j2)
    g_theta = sq * (eps[2] * xs[2] + j3 * eps[1] * xs[1] + j3 * j2 * eps[0] * xs[0])
    return g_phi, g_theta


def _three_step_grads(case, dt, theta, phi, eps, x0):
    with ad.Tape():
        th = ad.param(np.array(theta), "theta")
        ph = ad.param(np.array(phi), "phi")
        x = ad.const(np.array(x0))
        xs = [x0]
        for k in range(3):
            diff = th if case == "A" else th * x
            x = euler_step(x, ph, diff, dt, eps[k], node_index=k)
            xs.append(float(x.value))
        g = ad.backward(x, [th, ph])
    return float(g["phi"]), float(g["theta"]), xs


@dataclass
class NoiseInjectionReport:
    max_err: Dict[str, float] = field(default_factory=dict)
    var_phi_a: float = float("nan")
    var_phi_b: float = float("nan")
    var_theta_a: float = float("nan")
    var_theta_b: float = float("nan")
    rows: List[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (max(self.max_err.values()) <= 1e-10 and self.var_phi_a == 0.0 and self.var_phi_b > 0)


def _shifted_var(v):
    # shifting by one sample makes a constant column give exactly 0 (np.var's
    # pairwise mean of identical values can be off in the last bit)
    return float(np.var(v - v[0]))


def noise_injection_experiment(dt: Optional[float] = None, theta: Optional[float] = None, phi: Optional[float] = None,
                          seed: int = 0, n_draws: int = 100, n_redraws: int = 10_000,
                          x0: float = 1.0) -> NoiseInjectionReport:
    """Autodiff gradients of L = X_3 against closed forms, then gradient variance over noise.

    Unspecified ``dt``/``theta``/``phi`` are drawn per comparison (dt in
    [1e-3, 0.25]); the variance study uses the given values or dt=0.1,
    theta=0.5, phi=0.3.
    """
    rng = np.random.default_rng(seed)
    rep = NoiseInjectionReport(max_err={k: 0.0 for k in ("A_phi", "A_theta", "B_phi", "B_theta",
                                                    "general_B_phi", "general_B_theta")})
    for i in range(n_draws):
        d = dt if dt is not None else float(rng.uniform(1e-3, 0.25))
        th = theta if theta is not None else float(rng.uniform(-1, 1))
        ph = phi if phi is not None else float(rng.uniform(-1, 1))
        eps = rng.standard_normal(3)
        a_phi, a_theta, _ = _three_step_grads("A", d, th, ph, eps, x0)
        ca = closed_form_case_a(d, eps)
        b_phi, b_theta, xs = _three_step_grads("B", d, th, ph, eps, x0)
        cb = closed_form_case_b(d, eps, th, xs)
        gb = chain_rule_gradients(xs, eps, d, lambda x: 0.0, lambda x: th, lambda x: 1.0, lambda x: x)
        errs = dict(A_phi=abs(a_phi - ca[0]), A_theta=abs(a_theta - ca[1]), B_phi=abs(b_phi - cb[0]),
                    B_theta=abs(b_theta - cb[1]), general_B_phi=abs(b_phi - gb[0]),
                    general_B_theta=abs(b_theta - gb[1]))
        for k, v in errs.items():
            rep.max_err[k] = max(rep.max_err[k], v)
        rep.rows.append((i, d, th, ph, a_phi, ca[0], a_theta, ca[1], b_phi, cb[0], b_theta, cb[1]))

    d = dt if dt is not None else 0.1
    th = theta if theta is not None else 0.5
    ph = phi if phi is not None else 0.3
    ga, gb_ = [], []
    for _ in range(n_redraws):
        eps = rng.standard_normal(3)
        ga.append(_three_step_grads("A", d, th, ph, eps, x0)[:2])
        gb_.append(_three_step_grads("B", d, th, ph, eps, x0)[:2])
    ga, gb_ = np.array(ga), np.array(gb_)
    rep.var_phi_a, rep.var_theta_a = _shifted_var(ga[:, 0]), _shifted_var(ga[:, 1])
    rep.var_phi_b, rep.var_theta_b = _shifted_var(gb_[:, 0]), _shifted_var(gb_[:, 1])
    return rep


# ---------------------------------------------------------------------------
# training curves for several K


def k_sweep_training(cfg, train_set, val_set, K_list=(1, 5, 25), epochs: int = 40,
                     losses=("vae", "iwae_mixed"), log=None):
    """Fresh model per (loss, K); returns (curve rows, history rows).

    Curve rows are long format ``(metric, x, y, group)`` with one row per
    epoch, K and loss: the validation value of that run's own training bound.
    """
    curves, history = [], []
    for loss in losses:
        for K in K_list:
            mcfg = replace(cfg.model, K=int(K))
            tcfg = replace(cfg, model=mcfg, loss=loss, epochs=epochs, early_stop_patience=epochs + 1)
            res = train(tcfg, train_set, val_set, log=log)
            group = f"{'vae' if loss == 'vae' else 'iwae'}_K{K}"
            crit = "vae_bound" if loss == "vae" else "mixed"
            for row in res.history:
                history.append(dict(row, group=group))
                if row["split"] == "val":
                    curves.append(("val_bound", row["epoch"], row[crit], group))
    return curves, history
