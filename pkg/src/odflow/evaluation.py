"""Error metrics, the two-stage pipeline and the simulation-study runner."""
from __future__ import annotations

import configparser
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.stats import mannwhitneyu

from .calibration import CalibConfig, run_calibration
from .model import ModelParams, simulate, synthetic_schedule
from .network import RoutingMatrix, Topology, build_topology, latent_dim
from .regularization import RegularizationSchedule, compute_schedule, naive_schedule
from .sirm import SIRMConfig, default_lambda0_mean, run_filter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ErrorReport:
    l1: float
    l2: float
    se_l1: float
    se_l2: float
    per_flow: np.ndarray | None = None  # mean absolute error per OD flow


def flow_errors(estimate, truth, per_cell: bool = False) -> ErrorReport:
    """Mean over time of the L1 and L2 norms of ``estimate - truth``.

    With ``per_cell`` the norms are replaced by absolute/squared errors
    averaged over every (time, flow) cell, the L2 figure being the root of
    that mean.
    """
    e = np.atleast_2d(getattr(estimate, "values", estimate)).astype(float)
    x = np.atleast_2d(getattr(truth, "values", truth)).astype(float)
    if e.shape != x.shape:
        raise ValueError(f"shape mismatch: estimate {e.shape}, truth {x.shape}")
    r = e - x
    T = r.shape[0]
    if per_cell:
        a1 = np.abs(r).ravel()
        a2 = (r ** 2).ravel()
        l2 = float(np.sqrt(a2.mean()))
        se2 = float(a2.std(ddof=1) / np.sqrt(a2.size) / (2 * l2)) if l2 > 0 and a2.size > 1 else 0.0
        return ErrorReport(float(a1.mean()), l2, _se(a1), se2, np.abs(r).mean(axis=0))
    n1 = np.abs(r).sum(axis=1)
    n2 = np.sqrt((r ** 2).sum(axis=1))
    return ErrorReport(float(n1.mean()), float(n2.mean()), _se(n1), _se(n2),
                       np.abs(r).mean(axis=0) if T else None)


def _se(v) -> float:
    return float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0


@dataclass(frozen=True)
class PipelineConfig:
    calib: CalibConfig = CalibConfig()
    sirm: SIRMConfig = SIRMConfig()
    rho_model: float = 0.9
    tau: float = 2.0
    alpha: float = 2.0
    naive_phi: float = 0.5
    lambda0_sd: float = 2.0


_CONFIG_KEYS = {
    # flat key -> (section attribute, field name)
    "rho_calib": ("calib", "rho_calib"),
    "sigma2": ("calib", "sigma2_obs"),
    "window": ("calib", "window"),
    "max_evals": ("calib", "max_evals"),
    "calib_mode": ("calib", "mode"),
    "n_particles": ("sirm", "n_particles"),
    "n_moves": ("sirm", "n_moves"),
    "proposal_steps": ("sirm", "proposal_steps"),
    "resample": ("sirm", "resample"),
    "rho_model": (None, "rho_model"),
    "tau": (None, "tau"),
    "alpha": (None, "alpha"),
    "naive_phi": (None, "naive_phi"),
    "lambda0_sd": (None, "lambda0_sd"),
}


def _coerce(current, text: str):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text.strip()


def apply_settings(cfg: PipelineConfig, settings: dict) -> PipelineConfig:
    """Override defaults from flat ``key -> text`` pairs; unknown keys raise."""
    calib, sirm, top = {}, {}, {}
    for key, text in settings.items():
        if key not in _CONFIG_KEYS:
            raise KeyError(f"unknown configuration key {key!r}")
        part, name = _CONFIG_KEYS[key]
        target = {"calib": (calib, cfg.calib), "sirm": (sirm, cfg.sirm), None: (top, cfg)}[part]
        target[0][name] = _coerce(getattr(target[1], name), text)
    if "tau" in top:
        calib.setdefault("tau_calib", top["tau"])
    return replace(cfg, calib=replace(cfg.calib, **calib), sirm=replace(cfg.sirm, **sirm), **top)


def load_config(path, cfg: PipelineConfig | None = None) -> PipelineConfig:
    """Read a key=value file; ``[section]`` headers are allowed and ignored."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        text = fh.read()
    if not text.lstrip().startswith("["):
        text = "[pipeline]\n" + text
    parser.read_string(text)
    flat = {}
    for section in parser.sections():
        flat.update(parser[section])
    return apply_settings(cfg or PipelineConfig(), flat)


def model_params(cfg: PipelineConfig, y, A) -> ModelParams:
    return ModelParams(rho_model=cfg.rho_model, tau=cfg.tau, alpha=cfg.alpha,
                       lambda0_mean=default_lambda0_mean(y, A), lambda0_sd=cfg.lambda0_sd)


def two_stage_schedule(y, A, cfg: PipelineConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est = run_calibration(y, A, cfg.calib)
    sched = compute_schedule(est, A, y, rho_model=cfg.rho_model, alpha=cfg.alpha, tau=cfg.tau)
    return est, sched


def naive(cfg: PipelineConfig, n_od: int, T: int) -> RegularizationSchedule:
    return naive_schedule(n_od, T, alpha=cfg.alpha, phi_default=cfg.naive_phi,
                          rho_model=cfg.rho_model, tau=cfg.tau)


@dataclass(frozen=True)
class StudyConfig:
    topologies: tuple = ("chain3", "star3", "star4")
    replicates: int = 10
    T: int = 100
    seed: int = 20110611
    n_jobs: int = 1
    pipeline: PipelineConfig = PipelineConfig(sirm=SIRMConfig(n_particles=500))
    # ground truth
    level_range: tuple = (0.5, 2.0)
    lambda_cv: float = 0.5
    phi_mean: float = 0.2


PRESETS = {
    "paper-desk": StudyConfig(),
    "paper": StudyConfig(replicates=30, T=300,
                         pipeline=PipelineConfig(sirm=SIRMConfig(n_particles=1000))),
    "smoke": StudyConfig(topologies=("chain3", "star3"), replicates=2, T=40,
                         pipeline=PipelineConfig(sirm=SIRMConfig(n_particles=100))),
}


@dataclass
class StudyResult:
    topology: str
    replicate: int
    latent_dim: int
    seed: int
    l1_two: float
    l2_two: float
    l1_naive: float
    l2_naive: float
    l1_calib: float
    l2_calib: float
    ess_two: float    # median per-time ESS
    ess_naive: float
    seconds: float
    rel_l1: float = field(init=False)
    rel_l2: float = field(init=False)

    def __post_init__(self):
        self.rel_l1 = self.l1_naive / self.l1_two
        self.rel_l2 = self.l2_naive / self.l2_two


def replicate_seeds(seed: int, topo_index: int, rep: int) -> list[int]:
    ss = np.random.SeedSequence([seed, topo_index, rep])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(4)]


def run_replicate(cfg: StudyConfig, topo_index: int, rep: int) -> StudyResult:
    """Simulate one truth and score the two-stage and naive filters on it."""
    tic = time.perf_counter()
    label = cfg.topologies[topo_index]
    A = build_topology(Topology.parse(label))
    s_sched, s_sim, s_two, s_naive = replicate_seeds(cfg.seed, topo_index, rep)
    pc = cfg.pipeline
    truth_sched = synthetic_schedule(A.n_od, cfg.T, s_sched, rho=pc.rho_model,
                                     level_range=cfg.level_range, lambda_cv=cfg.lambda_cv,
                                     phi_mean=cfg.phi_mean, alpha=pc.alpha, tau=pc.tau)
    sim = simulate(A, truth_sched, stationary_params(truth_sched), cfg.T, s_sim)
    y = sim.y.values
    est, two = two_stage_schedule(y, A, pc)
    mp = model_params(pc, y, A)
    f_two = run_filter(y, A, two, mp, pc.sirm, seed=s_two)
    f_naive = run_filter(y, A, naive(pc, A.n_od, cfg.T), mp, pc.sirm, seed=s_naive)
    x = sim.x.values
    e_two, e_naive, e_cal = (flow_errors(f_two.mean, x), flow_errors(f_naive.mean, x),
                             flow_errors(est.x_hat, x))
    return StudyResult(topology=label, replicate=rep, latent_dim=latent_dim(A), seed=cfg.seed,
                       l1_two=e_two.l1, l2_two=e_two.l2, l1_naive=e_naive.l1,
                       l2_naive=e_naive.l2, l1_calib=e_cal.l1, l2_calib=e_cal.l2,
                       ess_two=float(np.median(f_two.ess)),
                       ess_naive=float(np.median(f_naive.ess)),
                       seconds=time.perf_counter() - tic)


def stationary_params(schedule: RegularizationSchedule) -> ModelParams:
    """Initial intensities drawn from the stationary law of a constant schedule."""
    rho = schedule.rho_model
    mu = schedule.theta1[0] / (1 - rho)
    sd = float(np.sqrt(np.mean(schedule.theta2[0]) / (1 - rho ** 2)))
    return ModelParams(rho_model=rho, tau=schedule.tau, alpha=schedule.alpha,
                       lambda0_mean=np.exp(mu), lambda0_sd=sd)


def _safe_replicate(args):
    cfg, ti, rep = args
    try:
        return run_replicate(cfg, ti, rep)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.error("replicate %s/%d failed: %s", cfg.topologies[ti], rep, exc)
        return None


def run_study(cfg: StudyConfig, progress=None) -> tuple[list[StudyResult], dict]:
    """Every topology x replicate; failed replicates are dropped and counted."""
    jobs = [(cfg, ti, rep) for ti in range(len(cfg.topologies)) for rep in range(cfg.replicates)]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as ex:
            raw = list(ex.map(_safe_replicate, jobs))
    else:
        raw = []
        for j in jobs:
            raw.append(_safe_replicate(j))
            if progress:
                progress(raw[-1])
    failures = {}
    for (c, ti, rep), r in zip(jobs, raw):
        if r is None:
            failures[c.topologies[ti]] = failures.get(c.topologies[ti], 0) + 1
    return [r for r in raw if r is not None], failures


def summarize(results: list[StudyResult], failures: dict | None = None) -> list[dict]:
    """Per-topology mean and sd of the relative errors, plus ESS statistics."""
    failures = failures or {}
    rows = []
    for topo in dict.fromkeys(r.topology for r in results):
        rs = [r for r in results if r.topology == topo]
        rel2 = np.array([r.rel_l2 for r in rs])
        rel1 = np.array([r.rel_l1 for r in rs])
        e2 = np.array([r.ess_two for r in rs])
        en = np.array([r.ess_naive for r in rs])
        p = float(mannwhitneyu(e2, en, alternative="greater").pvalue) if len(rs) > 1 else float("nan")
        rows.append({
            "topology": topo,
            "latent_dim": rs[0].latent_dim,
            "n": len(rs),
            "failures": failures.get(topo, 0),
            "mean_rel_l2": float(rel2.mean()),
            "sd_rel_l2": float(rel2.std(ddof=1)) if len(rs) > 1 else 0.0,
            "mean_rel_l1": float(rel1.mean()),
            "sd_rel_l1": float(rel1.std(ddof=1)) if len(rs) > 1 else 0.0,
            "median_ess_two": float(np.median(e2)),
            "median_ess_naive": float(np.median(en)),
            "ess_mannwhitney_p": p,
        })
    return rows


RESULT_COLUMNS = [f.name for f in fields(StudyResult)]


def result_row(r: StudyResult) -> list:
    d = asdict(r)
    return [d[c] for c in RESULT_COLUMNS]
