"""Command-line harness.

Subcommands: ``simulate`` (draw and store a data set), ``filter`` (one
filter run with per-step diagnostics), ``convergence`` (error and bias
against the exact filter across particle counts), ``variance`` (engine
comparison with quadrature reference), ``abc`` (the likelihood-free toy
across its tolerance ladder), ``condexp`` (Monte Carlo check of the
one-step conditional-expectation identity) and ``logz`` (normalising
constant unbiasedness check).

Every command reads one config file, consumes no wall-clock randomness
and writes CSV whose bytes depend only on (config, seed).  Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 check verdict
failed.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, write_csv
from .engine import EngineConfig, check_conditional_expectations, run_msmc, run_standard_smc
from .errors import ConfigError, MarginalSmcError
from .filters import abc_gaussian_posterior, build_filter_model, simulate_lgssm
from .model import test_function
from .numerics import fit_loglog_slope
from .oracles import grid_for_ssm, kalman_filter
from .replicates import FilterReplicateJob, run_replicates
from .streams import SeededStream
from .variance import compare_variances

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERDICT = 4


def _comments(cfg: ExperimentConfig, extra: list[str] | None = None) -> list[str]:
    lines = [
        f"marginalsmc {__version__}",
        f"config-hash {cfg.config_hash}",
        f"seed {cfg.seed}",
        f"kind {cfg.kind}",
    ]
    if extra:
        lines.extend(extra)
    return lines


def _root_stream(cfg: ExperimentConfig) -> SeededStream:
    return SeededStream(cfg.seed).child(cfg.kind)


def cmd_simulate(cfg: ExperimentConfig) -> int:
    stream = _root_stream(cfg)
    xs, ys = simulate_lgssm(cfg.a, cfg.sigma_x, cfg.c, cfg.sigma_y, cfg.m0,
                            cfg.s0, cfg.horizon, stream)
    rows = [{"step": 0, "y": None, "x_latent": float(xs[0])}]
    for n in range(1, cfg.horizon + 1):
        rows.append({"step": n, "y": float(ys[n - 1]), "x_latent": float(xs[n])})
    write_csv(cfg.out, _comments(cfg, [
        f"model a={cfg.a} sigma_x={cfg.sigma_x} c={cfg.c} sigma_y={cfg.sigma_y} "
        f"m0={cfg.m0} s0={cfg.s0} horizon={cfg.horizon}"]),
        ["step", "y", "x_latent"], rows)
    return EXIT_OK


def cmd_filter(cfg: ExperimentConfig) -> int:
    ssm = cfg.ssm()
    model, inferential = build_filter_model(ssm, cfg.filter_kind, cfg.proposal, cfg.aux)
    engine_cfg = EngineConfig(cfg.n_list[0], chunk_size=cfg.chunk_size)
    phis = {cfg.phi: test_function(cfg.phi)}
    stream = _root_stream(cfg)
    if cfg.algorithm == "marginal":
        trace = run_msmc(model, engine_cfg, phis, stream,
                         inferential_log_weight=inferential)
    else:
        trace = run_standard_smc(model, engine_cfg, phis, stream)
    fields = ["step", "ess", "log_increment", "cumulative_log_z",
              f"pre_{cfg.phi}", f"post_{cfg.phi}"]
    if inferential is not None and cfg.algorithm == "marginal":
        fields.append(f"inferential_{cfg.phi}")
    rows = []
    for rec in trace.records:
        row = {
            "step": rec.step, "ess": rec.ess,
            "log_increment": rec.log_increment,
            "cumulative_log_z": rec.cumulative_log_z,
            f"pre_{cfg.phi}": rec.estimates_pre[cfg.phi],
            f"post_{cfg.phi}": rec.estimates_post.get(cfg.phi),
        }
        if f"inferential_{cfg.phi}" in fields:
            row[f"inferential_{cfg.phi}"] = rec.estimates_inferential[cfg.phi]
        rows.append(row)
    write_csv(cfg.out, _comments(cfg, [
        f"filter {cfg.filter_kind} algorithm {cfg.algorithm} "
        f"proposal {cfg.proposal} N {cfg.n_list[0]}"]), fields, rows)
    return EXIT_OK


def cmd_convergence(cfg: ExperimentConfig) -> int:
    ssm = cfg.ssm()
    step = cfg.step if cfg.step is not None else ssm.horizon
    truth_trace = kalman_filter(ssm)
    phi = cfg.phi
    if phi == "identity":
        truth = float(truth_trace.filt_mean[step])
    elif phi == "square":
        truth = float(truth_trace.filt_var[step] + truth_trace.filt_mean[step] ** 2)
    elif phi == "one":
        truth = 1.0
    else:
        raise ConfigError("convergence supports phi in (one, identity, square)")
    stream = _root_stream(cfg)
    rows = []
    rmse_points = []
    bias_points = []
    for n in cfg.n_list:
        job = FilterReplicateJob(
            ssm=ssm, algorithm=cfg.algorithm, filter_kind=cfg.filter_kind,
            proposal=cfg.proposal, aux=cfg.aux, n_particles=n,
            chunk_size=cfg.chunk_size, phi_names=(phi,),
            estimator=cfg.estimator, step=step)
        estimates = run_replicates(job, stream.child("N", n), cfg.replicates,
                                   threads=cfg.threads)[:, 0]
        sq_err = (estimates - truth) ** 2
        mse = float(sq_err.mean())
        rmse = float(np.sqrt(mse))
        mse_se = float(sq_err.std(ddof=1) / np.sqrt(cfg.replicates))
        rmse_se = mse_se / (2.0 * rmse) if rmse > 0 else 0.0
        bias = float(estimates.mean() - truth)
        bias_se = float(estimates.std(ddof=1) / np.sqrt(cfg.replicates))
        rows.append({"method": cfg.algorithm, "N": n,
                     "replicates": cfg.replicates, "rmse": rmse,
                     "rmse_se": rmse_se, "mean_bias": bias, "bias_se": bias_se})
        if rmse > 0:
            rmse_points.append((n, rmse))
        if abs(bias) > 0:
            bias_points.append((n, abs(bias)))
    footer_comment = []
    rmse_slope = (fit_loglog_slope(rmse_points)[0]
                  if len({n for n, _ in rmse_points}) >= 2 else None)
    bias_slope = (fit_loglog_slope(bias_points)[0]
                  if len({n for n, _ in bias_points}) >= 2 else None)
    if rmse_slope is not None or bias_slope is not None:
        rows.append({"method": cfg.algorithm, "N": "slope",
                     "replicates": cfg.replicates, "rmse": rmse_slope,
                     "rmse_se": None, "mean_bias": bias_slope, "bias_se": None})
        footer_comment = ["slope row: rmse and mean_bias columns hold "
                          "log-log slopes over the N list"]
    write_csv(cfg.out, _comments(cfg, [
        f"truth {truth:.17g} at step {step} for phi {phi}"] + footer_comment),
        ["method", "N", "replicates", "rmse", "rmse_se", "mean_bias", "bias_se"],
        rows)
    return EXIT_OK


def cmd_variance(cfg: ExperimentConfig) -> int:
    ssm = cfg.ssm()
    step = cfg.step if cfg.step is not None else min(2, ssm.horizon)
    report = compare_variances(ssm, cfg.proposal, cfg.phi, step,
                               cfg.n_list[0], cfg.replicates,
                               _root_stream(cfg), threads=cfg.threads)
    write_csv(cfg.out, _comments(cfg),
              ["method", "n", "phi", "N", "replicates", "scaled_variance",
               "se", "quadrature_marginal", "verdict"], report.rows())
    print(report.summary())
    return EXIT_OK


def cmd_abc(cfg: ExperimentConfig) -> int:
    from .engine import run_msmc as _run
    from .filters import gaussian_abc_toy, make_abc

    epsilons = tuple(cfg.epsilon0 * cfg.epsilon_decay**k for k in range(cfg.stages))
    problem = gaussian_abc_toy(cfg.y_obs, epsilons, cfg.proposal_std)
    model = make_abc(problem)
    engine_cfg = EngineConfig(cfg.n_list[0], chunk_size=cfg.chunk_size)
    phis = {"theta": lambda p: p[:, 0], "theta2": lambda p: p[:, 0] ** 2}
    trace = _run(model, engine_cfg, phis, _root_stream(cfg))
    rows = []
    for rec, eps in zip(trace.records, epsilons):
        mean = rec.estimates_pre["theta"]
        rows.append({"step": rec.step, "epsilon": eps,
                     "posterior_mean": mean,
                     "posterior_var": rec.estimates_pre["theta2"] - mean**2,
                     "ess": rec.ess, "log_increment": rec.log_increment})
    ref_mean, ref_var = abc_gaussian_posterior(cfg.y_obs, epsilons[-1])
    write_csv(cfg.out, _comments(cfg, [
        f"closed-form final-stage mean {ref_mean:.17g} var {ref_var:.17g}"]),
        ["step", "epsilon", "posterior_mean", "posterior_var", "ess",
         "log_increment"], rows)
    return EXIT_OK


def cmd_condexp(cfg: ExperimentConfig) -> int:
    ssm = cfg.ssm()
    model, _ = build_filter_model(ssm, cfg.filter_kind, cfg.proposal, cfg.aux)
    if not 1 <= cfg.check_step <= ssm.horizon:
        raise ConfigError("[condexp] check_step must lie in 1..horizon")
    if not 0 <= cfg.warmup_steps < cfg.check_step:
        raise ConfigError("[condexp] warmup_steps must lie before check_step")
    stream = _root_stream(cfg)
    engine_cfg = EngineConfig(cfg.cloud_size, chunk_size=cfg.chunk_size)
    phis = {"one": test_function("one")}
    from .engine import _initial_step, msmc_step

    uniform, weighted, _ = _initial_step(model, engine_cfg,
                                         stream.child("warmup"), phis, None)
    for n in range(1, cfg.warmup_steps + 1):
        uniform, weighted, _ = msmc_step(uniform, weighted, model, n,
                                         engine_cfg, stream.child("warmup"), phis)
    grid = grid_for_ssm(ssm, cfg.grid_points)
    check_phis = {name: test_function(name) for name in ("one", "identity", "square")}
    results = check_conditional_expectations(
        weighted, model, cfg.warmup_steps + 1, check_phis,
        cfg.replicates, stream.child("mc"), grid, cfg.chunk_size)
    rows = []
    all_pass = True
    for name, (mc, se, exact) in results.items():
        gap = abs(mc - exact)
        ok = gap <= 4.0 * se
        all_pass = all_pass and ok
        rows.append({"phi": name, "mc_mean": mc, "mc_se": se, "exact": exact,
                     "abs_diff": gap, "n_se": gap / se if se > 0 else 0.0,
                     "pass": ok})
    write_csv(cfg.out, _comments(cfg, [
        f"identity checked at step {cfg.warmup_steps + 1} with "
        f"{cfg.replicates} replications of a {cfg.cloud_size}-particle cloud"]),
        ["phi", "mc_mean", "mc_se", "exact", "abs_diff", "n_se", "pass"], rows)
    for row in rows:
        status = "pass" if row["pass"] else "FAIL"
        print(f"condexp phi={row['phi']}: |mc-exact| = {row['abs_diff']:.3g} "
              f"({row['n_se']:.2f} se) [{status}]")
    return EXIT_OK if all_pass else EXIT_VERDICT


def cmd_logz(cfg: ExperimentConfig) -> int:
    ssm = cfg.ssm()
    truth = kalman_filter(ssm).log_z
    job = FilterReplicateJob(
        ssm=ssm, algorithm=cfg.algorithm, filter_kind=cfg.filter_kind,
        proposal=cfg.proposal, aux=cfg.aux, n_particles=cfg.n_list[0],
        chunk_size=cfg.chunk_size, estimator="logz")
    log_z = run_replicates(job, _root_stream(cfg), cfg.replicates,
                           threads=cfg.threads)[:, 0]
    ratios = np.exp(log_z - truth)
    mean = float(ratios.mean())
    se = float(ratios.std(ddof=1) / np.sqrt(cfg.replicates))
    ok = abs(mean - 1.0) <= 3.0 * se
    rows = [{"replicate": r, "log_z_hat": float(v)} for r, v in enumerate(log_z)]
    rows.append({"replicate": "mean_ratio", "log_z_hat": mean})
    rows.append({"replicate": "se_ratio", "log_z_hat": se})
    rows.append({"replicate": "verdict", "log_z_hat": 1.0 if ok else 0.0})
    write_csv(cfg.out, _comments(cfg, [
        f"kalman log evidence {truth:.17g}",
        "footer rows: mean_ratio, se_ratio, verdict (1 pass / 0 fail)"]),
        ["replicate", "log_z_hat"], rows)
    print(f"logz: mean ratio {mean:.6f} (se {se:.6f}) over "
          f"{cfg.replicates} replicates [{'pass' if ok else 'FAIL'}]")
    return EXIT_OK if ok else EXIT_VERDICT


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "convergence": cmd_convergence,
    "variance": cmd_variance,
    "abc": cmd_abc,
    "condexp": cmd_condexp,
    "logz": cmd_logz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginalsmc",
        description="Particle filter engines, oracles and experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="experiment file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--out", default=None, help="override the output path")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker count (has no effect on results)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.command:
            raise ConfigError(
                f"config kind {cfg.kind!r} does not match command {args.command!r}")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.threads is not None:
            cfg.threads = max(1, args.threads)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MarginalSmcError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
