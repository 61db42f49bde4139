"""Command-line entry point.

Exit status: 0 success, 1 bad input or configuration, 2 runtime fault
(divergence, non-finite values), 3 a verification tolerance was missed.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from . import verification as V
from .config import Config, dump_config, load_config
from .datasets import (OUParams, holdout_frames, load_sporadic_csv, normalize, save_sporadic_csv,
                       simulate_double_ou, split_dataset, sporadify)
from .errors import (ConfigError, ContractViolation, IngestionError, OracleFailure, TrainingFault,
                     VerificationFailed)
from .model import load_checkpoint
from .training import evaluate, train, write_metrics

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _common(p, out_help="output directory"):
    p.add_argument("--config", help="INI config file ([model], [train], [data])")
    p.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--threads", type=int, default=1)


def build_parser():
    ap = _Parser(prog="vsdn", description="Latent neural SDE models for sporadic time series")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate-ou", help="generate Double-OU sequences as CSV")
    _common(p, "CSV file to write")
    p.add_argument("--sporadic", action="store_true", help="also apply the [data] p_time / p_dim masking")

    p = sub.add_parser("sporadify", help="drop frames and cells from a CSV dataset")
    _common(p, "CSV file to write")
    p.add_argument("--data", required=True)

    p = sub.add_parser("train", help="train a model; writes checkpoint.npz and history.csv")
    _common(p)
    p.add_argument("--data", help="CSV dataset (default: simulate from [data])")
    p.add_argument("--epochs", type=int, help="overrides [train] epochs")

    for name in ("evaluate", "interpolate"):
        p = sub.add_parser(name, help="score a checkpoint on the test split" if name == "evaluate"
                           else "decode posterior paths at held-out frames")
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="CSV dataset scored in full (default: test split from [data])")
        p.add_argument("--samples", type=int, help="number of sampled paths S")
        if name == "evaluate":
            p.add_argument("--task", choices=("prediction", "interpolation"), default="prediction")

    p = sub.add_parser("verify", help="run one of the numerical cross-checks")
    p.add_argument("check", choices=("kl-oracle", "logw-identity", "euler-ou", "noise-injection", "bound-ordering"))
    _common(p)
    p.add_argument("--checkpoint", help="model for bound-ordering")
    p.add_argument("--data", help="CSV dataset for bound-ordering (default: validation split)")
    p.add_argument("--samples", type=int, default=500, help="replicates per K for bound-ordering")
    p.add_argument("--n-series", type=int, default=4, help="sequences used by bound-ordering")

    p = sub.add_parser("k-sweep", help="training curves for several K, both losses")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--k-list", default="1,5,25")
    p.add_argument("--epochs", type=int, default=40)
    return ap


# ---------------------------------------------------------------------------
# shared helpers


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    seed = cfg.train.seed if args.seed is None else args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    train = replace(cfg.train, seed=seed, threads=args.threads, model=cfg.model)
    return Config(cfg.model, train, cfg.data)


def _ou_params(cfg):
    d = cfg.data
    return OUParams(np.array(d.theta), np.array(d.mu), np.array(d.sigma))


def _simulate(cfg, sporadic=True):
    d = cfg.data
    seed = cfg.train.seed
    dense = simulate_double_ou(_ou_params(cfg), d.n_seq, d.horizon, d.sim_dt, seed=seed, lattice=d.lattice)
    if not sporadic:
        return dense
    return [sporadify(s, d.p_time, d.p_dim, seed=seed) for s in dense]


def _dataset(cfg, data_path=None):
    path = data_path or cfg.data.path
    return load_sporadic_csv(path) if path else _simulate(cfg)


def load_splits(cfg, data_path=None):
    """(train, val, test, stats) from the config and seed alone."""
    series = _dataset(cfg, data_path)
    tr, va, te = split_dataset(series, cfg.data.split, seed=cfg.train.seed)
    stats = None
    if cfg.data.normalize:
        tr, stats = normalize(tr)
        va, _ = normalize(va, stats)
        te, _ = normalize(te, stats)
    return tr, va, te, stats


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _eval_set(cfg, args, model):
    if args.data:
        data = load_sporadic_csv(args.data)
    else:
        data = load_splits(cfg)[2]
    if not data:
        raise ConfigError("evaluation set is empty")
    if data[0].dim != model.config.d2:
        raise ConfigError(f"data dimension {data[0].dim} != model d2 {model.config.d2}")
    return data


def _holdout(cfg, data):
    pairs = [holdout_frames(s, cfg.data.holdout_frac, seed=cfg.train.seed) for s in data]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _frame_rows(frames, d2):
    header = ["uid", "time", "nll", "mse"] + [f"pred_{j + 1}" for j in range(d2)]
    rows = [[int(u), float(t), float(n), float(m), *map(float, p)]
            for u, t, n, m, p in zip(frames.uid, frames.times, frames.nll, frames.mse, frames.point)]
    return header, rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = _load_cfg(args)
    series = _simulate(cfg, sporadic=args.sporadic)
    save_sporadic_csv(series, args.out)
    print(f"wrote {len(series)} sequences to {args.out}")


def cmd_sporadify(args):
    cfg = _load_cfg(args)
    d = cfg.data
    out = [sporadify(s, d.p_time, d.p_dim, seed=cfg.train.seed) for s in load_sporadic_csv(args.data)]
    save_sporadic_csv(out, args.out)
    print(f"wrote {len(out)} sequences to {args.out}")


def cmd_train(args):
    cfg = _load_cfg(args)
    if args.epochs is not None:
        cfg = Config(cfg.model, replace(cfg.train, epochs=args.epochs, model=cfg.model), cfg.data)
    out = _outdir(args.out)
    tr, va, _, stats = load_splits(cfg, args.data)
    (out / "config.ini").write_text(dump_config(cfg))
    res = train(cfg.train, tr, va, history_path=out / "history.csv", checkpoint_path=out / "checkpoint.npz",
                log=print)
    key = "vae_bound" if cfg.train.loss == "vae" else "mixed"
    plotting.plot_history(res.history, out / "history.png", key)
    if stats is not None:
        _write_rows(out / "norm_stats.csv", ["dim", "mean", "std"],
                    [[j + 1, float(m), float(s)] for j, (m, s) in enumerate(zip(stats.mean, stats.std))])
    print(f"best epoch {res.best_epoch} (validation {key} {res.best_val:.4f}); wrote {out}/checkpoint.npz")


def cmd_evaluate(args, task=None):
    cfg = _load_cfg(args)
    task = task or args.task
    model, _, _ = load_checkpoint(args.checkpoint)
    out = _outdir(args.out)
    data = _eval_set(cfg, args, model)
    S = args.samples or cfg.train.eval_samples
    held = None
    if task == "interpolation":
        data, held = _holdout(cfg, data)
    metrics, frames = evaluate(model, data, task, S, seed=cfg.train.seed, heldout=held,
                               threads=cfg.train.threads, return_frames=True)
    write_metrics([metrics], out / f"metrics_{task}.csv")
    header, rows = _frame_rows(frames, model.config.d2)
    _write_rows(out / f"frames_{task}.csv", header, rows)
    truth = _truth_at(data if held is None else held, frames, model.config.d2)
    plotting.plot_frames(dict(uid=list(frames.uid), time=frames.times, truth=truth,
                              pred=[frames.point[:, j] for j in range(model.config.d2)]),
                         out / f"frames_{task}.png")
    print(f"{task}: nll/frame {metrics.nll_per_frame:.4f}  mse {metrics.mse:.5f}  frames {metrics.n_frames}")


def _truth_at(series, frames, d2):
    lookup = {}
    for s in series:
        if s is None:
            continue
        for t, v, m in zip(s.times, s.values, s.mask):
            lookup[(int(s.uid), round(float(t), 9))] = np.where(m, v, np.nan)
    vals = np.array([lookup.get((int(u), round(float(t), 9)), np.full(d2, np.nan))
                     for u, t in zip(frames.uid, frames.times)]).reshape(-1, d2)
    return [vals[:, j] for j in range(d2)]


def cmd_interpolate(args):
    cmd_evaluate(args, task="interpolation")


def cmd_verify(args):
    cfg = _load_cfg(args)
    out = _outdir(args.out)
    seed = cfg.train.seed
    failures = []
    if args.check == "kl-oracle":
        res = V.kl_oracle_grid(seed=seed)
        rows = [[r.gap, r.r_g, r.analytic, r.mc, r.std_err, r.rel_err, r.rel_err < 0.02] for r in res]
        _write_rows(out / "kl_oracle.csv", ["drift_gap", "r_g", "analytic", "mc", "std_err", "rel_err", "pass"], rows)
        plotting.plot_kl_grid(res, out / "kl_oracle.png")
        for r in res:
            ok = r.rel_err < 0.02
            print(f"{'PASS' if ok else 'FAIL'} gap={r.gap} r_g={r.r_g} analytic={r.analytic:.5f} "
                  f"mc={r.mc:.5f} rel_err={r.rel_err:.4f}")
            if not ok:
                failures.append(f"gap={r.gap}, r_g={r.r_g}")
    elif args.check == "logw-identity":
        worst = V.logw_identity_check(seed=seed)
        _write_rows(out / "logw_identity.csv", ["n_steps", "max_abs_err", "pass"], [[10_000, worst, worst <= 1e-12]])
        print(f"{'PASS' if worst <= 1e-12 else 'FAIL'} max |logw - density ratio| = {worst:.3e}")
        if worst > 1e-12:
            failures.append("logw identity")
    elif args.check == "euler-ou":
        r = V.euler_ou_check(seed=seed)
        _write_rows(out / "euler_ou.csv", ["mean", "mean_exact", "mean_se", "mean_z", "var", "var_exact",
                                           "var_rel_err", "pass"],
                    [[r.mean, r.mean_exact, r.mean_se, r.mean_z, r.var, r.var_exact, r.var_rel_err, r.passed]])
        print(f"{'PASS' if r.passed else 'FAIL'} mean z={r.mean_z:.2f} var rel err={r.var_rel_err:.4f}")
        if not r.passed:
            failures.append("euler-ou")
    elif args.check == "noise-injection":
        rep = V.noise_injection_experiment(seed=seed)
        header = ["draw", "dt", "theta", "phi", "A_dphi", "A_dphi_closed", "A_dtheta", "A_dtheta_closed",
                  "B_dphi", "B_dphi_closed", "B_dtheta", "B_dtheta_closed"]
        _write_rows(out / "noise_injection.csv", header, rep.rows)
        _write_rows(out / "noise_injection_summary.csv", ["quantity", "value"],
                    [[f"max_err_{k}", v] for k, v in rep.max_err.items()] +
                    [["var_dphi_A", rep.var_phi_a], ["var_dphi_B", rep.var_phi_b],
                     ["var_dtheta_A", rep.var_theta_a], ["var_dtheta_B", rep.var_theta_b]])
        print(f"{'PASS' if rep.passed else 'FAIL'} max closed-form err {max(rep.max_err.values()):.2e}; "
              f"var dL/dphi A={rep.var_phi_a} B={rep.var_phi_b:.3e}")
        if not rep.passed:
            failures.append("noise-injection")
    else:
        if not args.checkpoint:
            raise ConfigError("bound-ordering needs --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        data = load_sporadic_csv(args.data) if args.data else load_splits(cfg)[1]
        sweep = V.bound_ordering_sweep(model, data[:args.n_series], (1, 5, 25), args.samples, seed)
        _write_rows(out / "bound_ordering.csv", ["K", "bound", "mean", "std_err", "n_mc"], sweep.table())
        plotting.plot_bound_sweep(sweep, out / "bound_ordering.png")
        mono, k1 = sweep.monotone_within(3.0), sweep.k1_matches_vae(4.0)
        print(f"{'PASS' if mono else 'FAIL'} IWAE means non-decreasing in K within 3 se")
        print(f"{'PASS' if k1 else 'FAIL'} K=1 IWAE - VAE = {sweep.paired_diff_mean:.4g} "
              f"(se {sweep.paired_diff_se:.2g})")
        if not (mono and k1):
            failures.append("bound ordering")
    if failures:
        raise VerificationFailed("; ".join(failures))


def cmd_k_sweep(args):
    cfg = _load_cfg(args)
    out = _outdir(args.out)
    try:
        K_list = [int(k) for k in args.k_list.split(",")]
    except ValueError:
        raise ConfigError(f"bad --k-list {args.k_list!r}") from None
    tr, va, _, _ = load_splits(cfg, args.data)
    curves, history = V.k_sweep_training(cfg.train, tr, va, K_list, args.epochs, log=print)
    _write_rows(out / "k_sweep.csv", ["metric", "x", "y", "group"], curves)
    with open(out / "k_sweep_history.csv", "w", newline="") as fh:
        cols = ["group", "epoch", "split", "vae_bound", "iwae_bound", "mixed", "kl_total", "recon_total",
                "nll_per_frame", "mse", "wall_time"]
        w = csv.writer(fh)
        w.writerow(cols)
        for r in history:
            w.writerow([r[c] for c in cols])
    plotting.plot_long(curves, out / "k_sweep.png", "validation bound per frame")


COMMANDS = {"simulate-ou": cmd_simulate, "sporadify": cmd_sporadify, "train": cmd_train,
            "evaluate": cmd_evaluate, "interpolate": cmd_interpolate, "verify": cmd_verify,
            "k-sweep": cmd_k_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_INPUT
    try:
        COMMANDS[args.command](args)
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, IngestionError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingFault, OracleFailure, FloatingPointError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
