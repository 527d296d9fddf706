"""Multilevel state-space model for bursty, sparse OD flows.

Intensities follow a log-AR(1) process,

    log lam_{i,t} = rho * log lam_{i,t-1} + eps_{i,t},  eps ~ N(theta1_{i,t}, theta2_{i,t}),

and flows are truncated normals around them,

    x_{i,t} | lam, phi_t ~ N(lam_{i,t}, lam_{i,t}**tau * (exp(phi_t) - 1)) truncated to (0, inf),

with ``phi_t ~ Gamma(alpha, scale=beta_t / alpha)``.  For ``tau = 2`` the
untruncated variance over squared mean is ``exp(phi) - 1``, as for a
log-normal with log-variance ``phi``.

All densities broadcast over leading axes and sum over the last (OD) axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr

from .network import FlowSeries, RoutingMatrix, aggregate
from .regularization import RegularizationSchedule

LOG_2PI = np.log(2.0 * np.pi)
# proposal acceptance below which the tail sampler replaces plain rejection
REJECTION_MIN_ACCEPT = 0.05


@dataclass(frozen=True)
class ModelParams:
    rho_model: float = 0.9
    tau: float = 2.0
    alpha: float = 2.0
    lambda0_mean: float | np.ndarray = 1.0
    lambda0_sd: float = 2.0  # sd of log lam_0

    def __post_init__(self):
        if not 0 < self.rho_model < 1:
            raise ValueError("rho_model must lie in (0, 1)")
        if self.tau <= 0 or self.alpha <= 0 or self.lambda0_sd <= 0:
            raise ValueError("tau, alpha and lambda0_sd must be positive")
        if np.any(np.asarray(self.lambda0_mean) <= 0):
            raise ValueError("lambda0_mean must be positive")


@dataclass(frozen=True)
class LatentState:
    lam: np.ndarray
    phi: float
    x: np.ndarray

    def __post_init__(self):
        if np.any(self.lam <= 0) or self.phi <= 0 or np.any(self.x < 0):
            raise ValueError("invalid latent state")


@dataclass(frozen=True)
class Simulation:
    x: FlowSeries
    lam: np.ndarray   # T x n_od
    phi: np.ndarray   # T
    y: FlowSeries


def emission_sd(lam, phi, tau):
    phi = np.asarray(phi, dtype=float)
    with np.errstate(over="ignore"):  # huge phi: infinite sd, zero density
        return np.sqrt(np.asarray(lam, dtype=float) ** tau * np.expm1(phi))


def _expand(phi, lam):
    phi = np.asarray(phi, dtype=float)
    return phi[..., None] if phi.ndim and phi.ndim == np.ndim(lam) - 1 else phi


def lambda_transition_logpdf(lam_t, lam_prev, theta1, theta2, rho):
    """Log density of ``lam_t`` (in intensity space) given ``lam_prev``."""
    log_lam = np.log(lam_t)
    resid = log_lam - rho * np.log(lam_prev) - theta1
    terms = -0.5 * (LOG_2PI + np.log(theta2) + resid ** 2 / theta2) - log_lam
    return np.sum(terms, axis=-1)


def emission_terms(x, lam, phi, tau):
    """Per-coordinate truncated-normal log densities of ``x``."""
    sd = emission_sd(lam, _expand(phi, lam), tau)
    z = (x - lam) / sd
    return -0.5 * (LOG_2PI + z * z) - np.log(sd) - log_ndtr(lam / sd)


def emission_logpdf(x, lam, phi, tau):
    """Truncated-normal emission log density, normalizer on (0, inf) included.

    ``phi`` may carry one value per leading index (e.g. per particle).
    """
    return np.sum(emission_terms(x, lam, phi, tau), axis=-1)


def phi_prior_logpdf(phi, alpha, beta):
    """Gamma log density with shape ``alpha`` and mean ``beta``."""
    phi = np.asarray(phi, dtype=float)
    scale = beta / alpha
    return (alpha - 1) * np.log(phi) - phi / scale - gammaln(alpha) - alpha * np.log(scale)


def truncnorm_mean(mean, sd):
    """Mean of N(mean, sd**2) truncated to (0, inf)."""
    mean, sd = np.asarray(mean, float), np.asarray(sd, float)
    a = -mean / sd
    return mean + sd * np.exp(-0.5 * (LOG_2PI + a * a) - log_ndtr(mean / sd))


def sample_truncnorm_positive(mean, sd, rng: np.random.Generator):
    """Draw N(mean, sd**2) conditioned on being positive.

    Plain rejection while its acceptance rate is at least 5%; beyond that
    an exponential-proposal sampler for the one-sided tail (Robert, 1995).
    """
    mean, sd = np.broadcast_arrays(np.asarray(mean, float), np.asarray(sd, float))
    out = np.empty(mean.shape)
    a = -mean / sd  # standardized lower bound
    tail = log_ndtr(-a) < np.log(REJECTION_MIN_ACCEPT)

    todo = np.flatnonzero(~tail.ravel())
    m, s = mean.ravel(), sd.ravel()
    flat = out.reshape(-1)
    while todo.size:
        z = m[todo] + s[todo] * rng.standard_normal(todo.size)
        good = z > 0
        flat[todo[good]] = z[good]
        todo = todo[~good]

    todo = np.flatnonzero(tail.ravel())
    af = a.ravel()
    while todo.size:
        lo = af[todo]
        rate = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
        z = lo + rng.exponential(1.0 / rate)
        good = rng.random(todo.size) <= np.exp(-0.5 * (z - rate) ** 2)
        flat[todo[good]] = m[todo[good]] + s[todo[good]] * z[good]
        todo = todo[~good]
    return out


def simulate(A: RoutingMatrix, schedule: RegularizationSchedule, params: ModelParams,
             T: int, seed) -> Simulation:
    """Forward-simulate intensities, dispersions, OD flows and link loads."""
    if schedule.T < T:
        raise ValueError(f"schedule covers {schedule.T} steps, {T} requested")
    rng = np.random.default_rng(seed)
    n = A.n_od
    log_lam = (np.log(np.broadcast_to(params.lambda0_mean, (n,)))
               + params.lambda0_sd * rng.standard_normal(n))
    lam = np.empty((T, n))
    phi = np.empty(T)
    x = np.empty((T, n))
    for t in range(T):
        log_lam = (params.rho_model * log_lam + schedule.theta1[t]
                   + np.sqrt(schedule.theta2[t]) * rng.standard_normal(n))
        lam[t] = np.exp(log_lam)
        beta = schedule.phi_t_hat[t]
        phi[t] = rng.gamma(params.alpha, beta / params.alpha)
        x[t] = sample_truncnorm_positive(lam[t], emission_sd(lam[t], phi[t], params.tau), rng)
    xs = FlowSeries(x, A.od_names)
    return Simulation(x=xs, lam=lam, phi=phi, y=aggregate(xs, A))


def synthetic_schedule(n_od: int, T: int, seed, rho: float = 0.9,
                       level_range=(0.5, 2.0), lambda_cv: float = 0.5,
                       phi_mean: float = 0.2, alpha: float = 2.0,
                       tau: float = 2.0) -> RegularizationSchedule:
    """Stationary ground-truth schedule for simulation studies.

    Each OD flow gets a log-uniform level in ``level_range``; the drift keeps
    ``log lam`` stationary around it with coefficient of variation
    ``lambda_cv`` for the log-normal intensity.
    """
    rng = np.random.default_rng(seed)
    levels = np.exp(rng.uniform(*np.log(level_range), size=n_od))
    log_var = np.log1p(lambda_cv ** 2)
    # stationary log-mean is mu = theta1 / (1 - rho); place the median below the level
    mu = np.log(levels) - 0.5 * log_var
    theta1 = np.tile((1 - rho) * mu, (T, 1))
    theta2 = np.full((T, n_od), (1 - rho ** 2) * log_var)
    return RegularizationSchedule(theta1=theta1, theta2=theta2,
                                  phi_t_hat=np.full(T, phi_mean), rho_model=rho,
                                  tau=tau, alpha=alpha)
