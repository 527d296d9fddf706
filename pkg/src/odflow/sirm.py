"""Sample-importance-resample-move particle filter for the multilevel model.

Each particle carries ``(lam_t, phi_t, x_t)`` plus its ancestor's
``lam_{t-1}``.  Per time step:

sample
    ``lam`` from the intensity transition, ``phi`` from its Gamma prior, and
    ``x`` from one truncated-normal proposal shared by all particles,
    realized by random-directions chains on the feasible polytope.  Since
    ``lam`` and ``phi`` come from their prior, the importance weight
    reduces to emission density over proposal density; the proposal's
    polytope normalizer is common to all particles and cancels.
resample
    systematic.
move
    Metropolis-within-Gibbs sweeps: ``x`` by random directions, ``log lam``
    coordinatewise and ``log phi`` by Gaussian random walks.

All particle operations are vectorized; one ``numpy`` Generator drives a
run, so results are reproducible from the seed.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .model import ModelParams, emission_terms, phi_prior_logpdf
from .network import RoutingMatrix
from .polytope import PolytopeDecomposition, decompose, feasible_start, ipfp_project, rda_step
from .regularization import RegularizationSchedule

log = logging.getLogger(__name__)

# per-coordinate emission log densities: (x, lam, phi) -> P x n
EmissionTerms = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class DegenerateEnsembleError(RuntimeError):
    pass


class FilterStepError(RuntimeError):
    def __init__(self, t: int, cause: Exception):
        super().__init__(f"filter failed at t={t}: {cause}")
        self.t = t


@dataclass(frozen=True)
class SIRMConfig:
    n_particles: int = 1000
    n_moves: int = 5
    proposal_steps: int = 50
    resample: str = "always"        # or "conditional"
    ess_threshold: float = 0.5      # fraction of n_particles, conditional mode only
    literal_proposal_mean: bool = False
    warmup_fraction: float = 0.4
    target_accept: float = 0.35
    lambda_step: float = 0.3
    phi_step: float = 0.5


@dataclass
class ParticleEnsemble:
    lam: np.ndarray        # P x n
    phi: np.ndarray        # P
    x: np.ndarray          # P x n
    lam_prev: np.ndarray   # P x n
    log_weights: np.ndarray
    t: int

    @property
    def n_particles(self) -> int:
        return self.lam.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def ess(self) -> float:
        return ess(self.log_weights)

    def take(self, idx) -> "ParticleEnsemble":
        return ParticleEnsemble(self.lam[idx], self.phi[idx], self.x[idx],
                                self.lam_prev[idx], np.zeros(len(idx)), self.t)


@dataclass
class MoveState:
    """Random-walk step sizes, carried across time steps."""

    lambda_step: float
    phi_step: float


@dataclass
class FilterOutput:
    names: tuple
    mean: np.ndarray
    sd: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    log_lambda_mean: np.ndarray
    ess: np.ndarray
    acc_x: np.ndarray
    acc_lambda: np.ndarray
    acc_phi: np.ndarray
    ms_elapsed: np.ndarray
    degenerate_steps: list = field(default_factory=list)


def ess(log_weights) -> float:
    """Effective sample size ``1 / sum(w**2)`` of normalized weights."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - logsumexp(lw))
    return float(1.0 / np.sum(w * w))


def truncnorm_emission(tau: float) -> EmissionTerms:
    def terms(x, lam, phi):
        return emission_terms(x, lam, phi, tau)
    return terms


def _schedule_row(schedule: RegularizationSchedule, t: int):
    return schedule.theta1[t], schedule.theta2[t], float(schedule.phi_t_hat[t])


def proposal_moments(lam_prev, weights, theta1, phi_hat, rho, literal: bool = False):
    """Mean and sd of the shared truncated-normal x proposal."""
    lam_bar = weights @ lam_prev
    if literal:
        mu = np.maximum(theta1 + rho * lam_bar, 1e-12 * max(lam_bar.max(), 1.0))
    else:
        mu = np.exp(theta1) * rho * lam_bar
    return mu, np.sqrt(np.expm1(phi_hat)) * mu


def sample_step(prev: ParticleEnsemble, y_t, row, decomp: PolytopeDecomposition,
                rng: np.random.Generator, params: ModelParams, config: SIRMConfig,
                emission: EmissionTerms | None = None) -> ParticleEnsemble:
    """Propagate and reweight; the returned ensemble is not resampled."""
    theta1, theta2, phi_hat = row
    emission = emission or truncnorm_emission(params.tau)
    P, n = prev.lam.shape
    rho = params.rho_model
    lam_prev = prev.lam
    log_lam = rho * np.log(lam_prev) + theta1 + np.sqrt(theta2) * rng.standard_normal((P, n))
    lam = np.exp(log_lam)
    phi = rng.gamma(params.alpha, phi_hat / params.alpha, size=P)

    mu, sd = proposal_moments(lam_prev, prev.weights, theta1, phi_hat, rho,
                              config.literal_proposal_mean)

    def log_q(X):
        z = (X - mu) / sd
        return -0.5 * np.sum(z * z, axis=-1)

    start = ipfp_project(mu, decomp.A, y_t).x
    X = np.tile(start, (P, 1))
    lq = log_q(X)
    for _ in range(config.proposal_steps if decomp.n_free else 0):
        X, lq, _ = rda_step(X, decomp, log_q, rng, logp=lq)

    log_w = np.sum(emission(X, lam, phi), axis=-1) - lq
    if config.resample == "conditional":
        log_w = log_w + prev.log_weights
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    return ParticleEnsemble(lam, phi, X, lam_prev, log_w, prev.t + 1)


def systematic_indices(weights, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    P = len(w)
    cum = np.cumsum(w)
    cum[-1] = 1.0
    positions = (rng.random() + np.arange(P)) / P
    return np.searchsorted(cum, positions, side="right").clip(max=P - 1)


def resample(ens: ParticleEnsemble, rng: np.random.Generator) -> ParticleEnsemble:
    """Systematic resampling; offspring counts are within one of ``P * w``."""
    if not np.any(np.isfinite(ens.log_weights)):
        raise DegenerateEnsembleError(f"all particle weights are zero at t={ens.t}")
    return ens.take(systematic_indices(ens.weights, rng))


def move_step(ens: ParticleEnsemble, y_t, row, decomp: PolytopeDecomposition, n_moves: int,
              rng: np.random.Generator, params: ModelParams, config: SIRMConfig,
              state: MoveState, emission: EmissionTerms | None = None):
    """Metropolis-within-Gibbs rejuvenation of an equally weighted ensemble.

    Step sizes adapt during the first ``warmup_fraction`` of the sweeps and
    are frozen afterwards; reported acceptance rates cover frozen sweeps.
    Returns ``(ensemble, (acc_x, acc_lambda, acc_phi))``.
    """
    theta1, theta2, phi_hat = row
    emission = emission or truncnorm_emission(params.tau)
    rho, alpha = params.rho_model, params.alpha
    lam, phi, X = ens.lam.copy(), ens.phi.copy(), ens.x.copy()
    log_lam = np.log(lam)
    prior_mean = rho * np.log(ens.lam_prev) + theta1
    P, n = lam.shape
    n_warm = int(np.ceil(config.warmup_fraction * n_moves)) if n_moves > 1 else 0
    acc = np.zeros(3)
    n_frozen = 0

    def log_lam_prior(ll):
        return -0.5 * (ll - prior_mean) ** 2 / theta2

    for sweep in range(n_moves):
        # x | lam, phi, y
        def log_target(Z):
            return np.sum(emission(Z, lam, phi), axis=-1)
        X, _, ax = rda_step(X, decomp, log_target, rng)

        # log lam, coordinatewise: all coordinates are conditionally independent
        e_cur = emission(X, lam, phi)
        ll_prop = log_lam + state.lambda_step * rng.standard_normal((P, n))
        lam_prop = np.exp(ll_prop)
        e_prop = emission(X, lam_prop, phi)
        ratio = log_lam_prior(ll_prop) + e_prop - log_lam_prior(log_lam) - e_cur
        al = np.log(rng.random((P, n))) < ratio
        log_lam = np.where(al, ll_prop, log_lam)
        lam = np.exp(log_lam)

        # log phi
        lp_prop = np.log(phi) + state.phi_step * rng.standard_normal(P)
        phi_prop = np.exp(lp_prop)
        cur = phi_prior_logpdf(phi, alpha, phi_hat) + np.log(phi) + np.sum(emission(X, lam, phi), axis=-1)
        new = (phi_prior_logpdf(phi_prop, alpha, phi_hat) + lp_prop
               + np.sum(emission(X, lam, phi_prop), axis=-1))
        ap = np.log(rng.random(P)) < new - cur
        phi = np.where(ap, phi_prop, phi)

        rates = np.array([ax.mean() if decomp.n_free else np.nan, al.mean(), ap.mean()])
        if sweep < n_warm:
            state.lambda_step *= np.exp(2.0 * (rates[1] - config.target_accept))
            state.phi_step *= np.exp(2.0 * (rates[2] - config.target_accept))
        else:
            acc += rates
            n_frozen += 1
    out = ParticleEnsemble(lam, phi, X, ens.lam_prev, ens.log_weights, ens.t)
    return out, (acc / n_frozen if n_frozen else np.full(3, np.nan))


def init_ensemble(A, y_1, schedule: RegularizationSchedule, params: ModelParams,
                  n_particles: int, seed, config: SIRMConfig | None = None,
                  decomp: PolytopeDecomposition | None = None,
                  emission: EmissionTerms | None = None) -> ParticleEnsemble:
    """Weighted ensemble at the first time step, from the prior on ``lam_0``."""
    rng = np.random.default_rng(seed)
    config = replace(config or SIRMConfig(), n_particles=n_particles)
    decomp = decomp or decompose(A)
    n = decomp.A.shape[1]
    lam0 = np.exp(np.log(np.broadcast_to(params.lambda0_mean, (n,)))
                  + params.lambda0_sd * rng.standard_normal((n_particles, n)))
    prior = ParticleEnsemble(lam0, np.ones(n_particles), np.zeros((n_particles, n)), lam0,
                             np.zeros(n_particles), 0)
    return sample_step(prior, np.asarray(y_1, float), _schedule_row(schedule, 0), decomp,
                       rng, params, config, emission)


def default_lambda0_mean(y, A) -> float:
    """Mean total OD traffic per OD flow, via IPFP on the mean link loads."""
    Y = np.atleast_2d(getattr(y, "values", y))
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, float)
    x = feasible_start(a, Y.mean(axis=0)).x
    return max(float(x.sum()) / a.shape[1], 1e-6)


def run_filter(y, A, schedule: RegularizationSchedule, params: ModelParams,
               config: SIRMConfig = SIRMConfig(), seed=0,
               emission: EmissionTerms | None = None) -> FilterOutput:
    """Filter every time step; the estimate is the post-move ensemble mean of ``x``."""
    Y = np.atleast_2d(getattr(y, "values", y)).astype(float)
    T = Y.shape[0]
    if schedule.T < T:
        raise ValueError(f"schedule covers {schedule.T} steps, series has {T}")
    decomp = decompose(A)
    n = decomp.A.shape[1]
    if schedule.n_od != n:
        raise ValueError("schedule and routing matrix disagree on the number of OD flows")
    names = tuple(A.od_names) if isinstance(A, RoutingMatrix) else tuple(f"od{j + 1}" for j in range(n))
    rng = np.random.default_rng(seed)
    state = MoveState(config.lambda_step, config.phi_step)
    P = config.n_particles

    out = {k: np.empty((T, n)) for k in ("mean", "sd", "q05", "q95", "log_lambda_mean")}
    diag = {k: np.empty(T) for k in ("ess", "acc_x", "acc_lambda", "acc_phi", "ms")}
    degenerate = []
    ens = None
    for t in range(T):
        tic = time.perf_counter()
        row = _schedule_row(schedule, t)
        try:
            if ens is None:
                ens = init_ensemble(decomp.A, Y[0], schedule, params, P, rng, config, decomp,
                                    emission)
            else:
                ens = sample_step(ens, Y[t], row, decomp, rng, params, config, emission)
            diag["ess"][t] = ens.ess if np.any(np.isfinite(ens.log_weights)) else 0.0
            if diag["ess"][t] < 1 + 1e-9:
                degenerate.append(t)
            if config.resample == "always" or diag["ess"][t] < config.ess_threshold * P:
                ens = resample(ens, rng)
            ens, rates = move_step(ens, Y[t], row, decomp, config.n_moves, rng, params, config,
                                   state, emission)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise FilterStepError(t, exc) from exc
        w = ens.weights
        out["mean"][t] = w @ ens.x
        out["sd"][t] = np.sqrt(np.maximum(w @ (ens.x - out["mean"][t]) ** 2, 0.0))
        if config.resample == "always":
            out["q05"][t], out["q95"][t] = np.quantile(ens.x, [0.05, 0.95], axis=0)
        else:
            out["q05"][t], out["q95"][t] = _weighted_quantiles(ens.x, w, (0.05, 0.95))
        out["log_lambda_mean"][t] = w @ np.log(ens.lam)
        diag["acc_x"][t], diag["acc_lambda"][t], diag["acc_phi"][t] = rates
        diag["ms"][t] = 1000.0 * (time.perf_counter() - tic)
    if degenerate:
        log.warning("degenerate ensemble (ESS ~ 1) at %d of %d steps", len(degenerate), T)
    return FilterOutput(names=names, mean=out["mean"], sd=out["sd"], q05=out["q05"],
                        q95=out["q95"], log_lambda_mean=out["log_lambda_mean"],
                        ess=diag["ess"], acc_x=diag["acc_x"], acc_lambda=diag["acc_lambda"],
                        acc_phi=diag["acc_phi"], ms_elapsed=diag["ms"],
                        degenerate_steps=degenerate)


def _weighted_quantiles(X, w, qs):
    """Per-column lower weighted quantiles of the rows of ``X``."""
    order = np.argsort(X, axis=0)
    cw = np.cumsum(w[order], axis=0)
    cols = np.arange(X.shape[1])
    res = []
    for q in qs:
        k = np.argmax(cw >= q * cw[-1], axis=0)
        res.append(X[order[k, cols], cols])
    return res
