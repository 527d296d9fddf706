"""Command-line interface: ``odflow <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage or input error and 2 when a
numerical routine fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .calibration import CalibEstimates, KalmanError, run_calibration
from .evaluation import (PRESETS, RESULT_COLUMNS, PipelineConfig, StudyConfig, apply_settings,
                         flow_errors, load_config, model_params, naive, result_row, run_study,
                         stationary_params, summarize)
from .model import simulate, synthetic_schedule
from .network import FlowSeries, Topology, TopologyError, build_topology
from .polytope import IPFPError
from .regularization import RegularizationSchedule, compute_schedule
from .sirm import DegenerateEnsembleError, FilterStepError, run_filter

log = logging.getLogger("odflow")

NUMERICAL_ERRORS = (KalmanError, IPFPError, FilterStepError, DegenerateEnsembleError,
                    np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# flag -> configuration key understood by apply_settings
PIPELINE_FLAGS = {
    "rho_calib": float, "sigma2": float, "window": int, "calib_mode": str,
    "rho_model": float, "tau": float, "alpha": float, "naive_phi": float,
    "n_particles": int, "n_moves": int,
}


def _add_pipeline_flags(p):
    g = p.add_argument_group("model settings (override --config)")
    for key, typ in PIPELINE_FLAGS.items():
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def pipeline_config(args, cfg: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    if args.config:
        cfg = load_config(args.config, cfg)
    flags = {k: str(getattr(args, k)) for k in PIPELINE_FLAGS if getattr(args, k, None) is not None}
    return apply_settings(cfg, flags)


def _load_y_A(args):
    A = io.read_routing_matrix(args.routing)
    y = io.read_flow_series(args.y)
    if tuple(y.names) != tuple(A.link_names):
        raise UsageError(f"--y columns {y.names} do not match routing links {A.link_names}")
    return y, A


def cmd_topology(args):
    if args.topology:
        topo = Topology.parse(args.topology)
    elif args.kind:
        topo = Topology(args.kind, k=args.k, k1=args.k1, k2=args.k2)
    else:
        raise UsageError("give --kind or --topology")
    A = build_topology(topo)
    io.write_routing_matrix(args.out or sys.stdout, A)
    return 0


def cmd_simulate(args):
    cfg = pipeline_config(args)
    topo = Topology.parse(args.topology)
    A = build_topology(topo)
    s_sched, s_sim = (int(s.generate_state(1)[0])
                      for s in np.random.SeedSequence(args.seed).spawn(2))
    sched = synthetic_schedule(A.n_od, args.T, s_sched, rho=cfg.rho_model,
                               level_range=(args.level_min, args.level_max),
                               lambda_cv=args.lambda_cv, phi_mean=args.phi_mean,
                               alpha=cfg.alpha, tau=cfg.tau)
    sim = simulate(A, sched, stationary_params(sched), args.T, s_sim)
    out = Path(args.out_dir)
    io.write_routing_matrix(out / "routing.csv", A)
    io.write_flow_series(out / "x.csv", sim.x)
    io.write_flow_series(out / "y.csv", sim.y)
    io.write_flow_series(out / "lambda.csv", FlowSeries(sim.lam, A.od_names))
    io.write_rows(out / "phi.csv", ["t", "phi"], enumerate(sim.phi, start=1))
    io.write_json(out / "manifest.json", {
        "topology": topo.label, "T": args.T, "seed": args.seed,
        "schedule_hash": io.array_digest(sched.theta1, sched.theta2, sched.phi_t_hat),
        "x_hash": io.array_digest(sim.x.values),
        "level_range": [args.level_min, args.level_max], "lambda_cv": args.lambda_cv,
        "phi_mean": args.phi_mean, "rho_model": cfg.rho_model, "tau": cfg.tau,
        "alpha": cfg.alpha,
    })
    return 0


def cmd_calibrate(args):
    cfg = pipeline_config(args)
    y, A = _load_y_A(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # reported through logging below
        est = run_calibration(y, A, cfg.calib)
    io.write_long(args.out, ["x_hat", "V_hat"], A.od_names, [est.x_hat, est.V_hat])
    w = cfg.calib.window
    rows = ([i, i + 1, i + w, fit.params.phi_scale, fit.loglik, int(fit.converged),
             fit.n_evals, *fit.params.lambda_vec] for i, fit in enumerate(est.window_params))
    io.write_rows(args.window_log,
                  ["window", "start_t", "end_t", "phi_hat", "loglik", "converged", "n_evals",
                   *(f"lambda_{n}" for n in A.od_names)], rows)
    if est.warnings:
        log.warning("%d window fits did not converge", est.warnings)
    return 0


def read_calibration(path, window_log) -> CalibEstimates:
    names, cols = io.read_long(path)
    header, rows = io.read_rows(window_log)
    T = cols["x_hat"].shape[0]
    w = int(rows[0][2]) - int(rows[0][1]) + 1
    starts = np.clip(np.arange(T) - w // 2, 0, T - w)
    phi_w = np.array([float(r[header.index("phi_hat")]) for r in rows])
    ll_w = np.array([float(r[header.index("loglik")]) for r in rows])
    return CalibEstimates(x_hat=cols["x_hat"], V_hat=cols["V_hat"], phi_hat=phi_w[starts],
                          loglik=ll_w[starts], window_start=starts)


def write_schedule(path, sidecar, sched: RegularizationSchedule, names, kind: str):
    io.write_long(path, ["theta1", "theta2"], names, [sched.theta1, sched.theta2])
    io.write_json(sidecar, {"kind": kind, "rho_model": sched.rho_model, "tau": sched.tau,
                            "alpha": sched.alpha, "phi_t_hat": sched.phi_t_hat.tolist()})


def read_schedule(path, sidecar) -> RegularizationSchedule:
    _, cols = io.read_long(path)
    meta = json.loads(Path(sidecar).read_text())
    return RegularizationSchedule(theta1=cols["theta1"], theta2=cols["theta2"],
                                  phi_t_hat=np.array(meta["phi_t_hat"]),
                                  rho_model=meta["rho_model"], tau=meta["tau"],
                                  alpha=meta["alpha"])


def _sidecar(args, schedule_path):
    return args.sidecar or Path(schedule_path).with_suffix(".json")


def cmd_schedule(args):
    cfg = pipeline_config(args)
    y, A = _load_y_A(args)
    if args.naive:
        sched, kind = naive(cfg, A.n_od, y.T), "naive"
    else:
        if not (args.calib and args.window_log):
            raise UsageError("--calib and --window-log are required unless --naive is given")
        est = read_calibration(args.calib, args.window_log)
        sched = compute_schedule(est, A, y.values, rho_model=cfg.rho_model, alpha=cfg.alpha,
                                 tau=cfg.tau)
        kind = "two-stage"
    write_schedule(args.out, _sidecar(args, args.out), sched, A.od_names, kind)
    return 0


def cmd_filter(args):
    cfg = pipeline_config(args)
    y, A = _load_y_A(args)
    sched = read_schedule(args.schedule, _sidecar(args, args.schedule))
    sirm = replace(cfg.sirm, resample=args.resample) if args.resample else cfg.sirm
    res = run_filter(y.values, A, sched, model_params(cfg, y.values, A), sirm, seed=args.seed)
    io.write_long(args.out, ["mean", "sd", "q05", "q95"], A.od_names,
                  [res.mean, res.sd, res.q05, res.q95])
    if args.diagnostics:
        io.write_rows(args.diagnostics, ["t", "ess", "acc_x", "acc_lambda", "acc_phi", "ms_elapsed"],
                      ([t + 1, res.ess[t], res.acc_x[t], res.acc_lambda[t], res.acc_phi[t],
                        res.ms_elapsed[t]] for t in range(len(res.ess))))
    return 0


def read_estimate(path, column: str = "mean") -> np.ndarray:
    """Flow-series CSV, or a long CSV (``t,od_name,...``) using ``column``."""
    header, _ = io.read_rows(path)
    if len(header) > 1 and header[1] == "od_name":
        _, cols = io.read_long(path)
        if column not in cols:
            raise UsageError(f"{path} has no column {column!r}")
        return cols[column]
    return io.read_flow_series(path).values


def cmd_evaluate(args):
    est = read_estimate(args.est, args.column)
    truth = read_estimate(args.truth, args.column)
    rep = flow_errors(est, truth, per_cell=args.per_cell)
    print(f"l1={rep.l1!r} l2={rep.l2!r} se_l1={rep.se_l1!r} se_l2={rep.se_l2!r}")
    if args.out:
        io.write_json(args.out, {"l1": rep.l1, "l2": rep.l2, "se_l1": rep.se_l1,
                                 "se_l2": rep.se_l2, "per_cell": args.per_cell})
    return 0


def cmd_study(args):
    base = PRESETS[args.preset]
    pc = pipeline_config(args, base.pipeline)
    cfg = StudyConfig(
        topologies=tuple(args.topologies) if args.topologies else base.topologies,
        replicates=args.replicates or base.replicates, T=args.T or base.T,
        seed=args.seed if args.seed is not None else base.seed,
        n_jobs=args.jobs, pipeline=pc)

    def progress(r):
        if r is not None:
            log.info("%s replicate %d: rel_l2=%.3f ess %.1f vs %.1f (%.1fs)", r.topology,
                     r.replicate, r.rel_l2, r.ess_two, r.ess_naive, r.seconds)

    results, failures = run_study(cfg, progress=progress)
    out = Path(args.out_dir)
    io.write_rows(out / "results.csv", RESULT_COLUMNS, (result_row(r) for r in results))
    summary = summarize(results, failures)
    if summary:
        io.write_rows(out / "summary.csv", list(summary[0]), (list(s.values()) for s in summary))
    for s in summary:
        print(f"{s['topology']:>10} dim={s['latent_dim']:<2} n={s['n']:<3} "
              f"rel_l2={s['mean_rel_l2']:.3f}±{s['sd_rel_l2']:.3f} "
              f"rel_l1={s['mean_rel_l1']:.3f}±{s['sd_rel_l1']:.3f} "
              f"ess {s['median_ess_two']:.1f} vs {s['median_ess_naive']:.1f} "
              f"(p={s['ess_mannwhitney_p']:.2g}) failures={s['failures']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="odflow", description="OD flow estimation from link loads")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("topology", parents=[common], help="write a routing-matrix CSV")
    s.add_argument("--kind", choices=["chain3", "star", "two_router_star"])
    s.add_argument("--k", type=int, default=0)
    s.add_argument("--k1", type=int, default=0)
    s.add_argument("--k2", type=int, default=0)
    s.add_argument("--topology", help="label such as star3 or two_router_star(4,8)")
    s.add_argument("--out", help="output path (default: stdout)")
    s.set_defaults(func=cmd_topology)

    s = sub.add_parser("simulate", parents=[common], help="simulate OD flows and link loads")
    s.add_argument("--topology", required=True)
    s.add_argument("--T", type=int, default=100)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--level-min", type=float, default=0.5)
    s.add_argument("--level-max", type=float, default=2.0)
    s.add_argument("--lambda-cv", type=float, default=0.5)
    s.add_argument("--phi-mean", type=float, default=0.2)
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", parents=[common], help="sliding-window Kalman calibration")
    s.add_argument("--y", required=True)
    s.add_argument("--routing", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window-log", required=True)
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("schedule", parents=[common], help="build a regularization schedule")
    s.add_argument("--y", required=True)
    s.add_argument("--routing", required=True)
    s.add_argument("--calib")
    s.add_argument("--window-log")
    s.add_argument("--naive", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--sidecar", help="JSON sidecar path (default: --out with .json)")
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("filter", parents=[common], help="run the particle filter")
    s.add_argument("--y", required=True)
    s.add_argument("--routing", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--sidecar")
    s.add_argument("--out", required=True)
    s.add_argument("--diagnostics")
    s.add_argument("--resample", choices=["always", "conditional"])
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("evaluate", parents=[common], help="L1/L2 errors against the truth")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--column", default="mean", help="column to use from long-format files")
    s.add_argument("--per-cell", action="store_true", help="average over flow-time cells")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("study", parents=[common], help="simulation study, two-stage vs naive")
    s.add_argument("--preset", choices=sorted(PRESETS), default="paper-desk")
    s.add_argument("--topologies", nargs="+")
    s.add_argument("--replicates", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd != "study" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"odflow {args.cmd}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, TopologyError, KeyError, ValueError, OSError) as exc:
        print(f"odflow {args.cmd}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
