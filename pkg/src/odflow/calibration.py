"""Gaussian calibration model: Kalman filter/smoother and windowed ML fits.

The calibration model is

    x_t = rho * x_{t-1} + lam + e_t,   e_t ~ N(0, phi * diag(lam)**tau)
    y_t = A x_t + eps_t,               eps_t ~ N(0, sigma2 * I)

i.e. the augmented system on ``(x_t, 1)`` with transition
``[[rho I, diag(lam)], [0, I]]`` and observation matrix ``[A | 0]``.  The
constant block of the augmented state is deterministic, so the recursions
below carry it as a known intercept instead of an extra state coordinate.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .network import RoutingMatrix
from .polytope import IPFPError, ipfp_project

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class KalmanError(np.linalg.LinAlgError):
    def __init__(self, t: int, what: str = "innovation covariance"):
        super().__init__(f"{what} not positive definite at t={t}")
        self.t = t


@dataclass(frozen=True)
class CalibParams:
    lambda_vec: np.ndarray
    phi_scale: float
    rho_calib: float = 0.1
    sigma2_obs: float = 0.01
    tau_calib: float = 2.0

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda_vec, dtype=float))
        if np.any(lam <= 0) or self.phi_scale <= 0:
            raise ValueError("lambda_vec and phi_scale must be positive")
        if not -1 < self.rho_calib < 1:
            raise ValueError("rho_calib must lie in (-1, 1)")
        if self.sigma2_obs < 0 or self.tau_calib <= 0:
            raise ValueError("sigma2_obs must be >= 0 and tau_calib > 0")
        object.__setattr__(self, "lambda_vec", lam)

    @property
    def process_var(self) -> np.ndarray:
        return self.phi_scale * self.lambda_vec ** self.tau_calib

    def stationary_prior(self):
        """Mean and covariance of the stationary distribution of ``x_t``."""
        rho = self.rho_calib
        return (self.lambda_vec / (1 - rho),
                np.diag(self.process_var / (1 - rho ** 2)))


@dataclass
class FilterResult:
    means: np.ndarray        # T x n, E[x_t | y_1..t]
    covs: np.ndarray         # T x n x n
    pred_means: np.ndarray   # T x n, E[x_t | y_1..t-1]
    pred_covs: np.ndarray
    y_pred: np.ndarray       # T x m
    S: np.ndarray            # T x m x m
    loglik: float
    rho: float


@dataclass
class CalibEstimates:
    x_hat: np.ndarray
    V_hat: np.ndarray
    phi_hat: np.ndarray
    loglik: np.ndarray
    window_start: np.ndarray  # start index of the window each time was taken from
    window_params: list = field(default_factory=list)
    warnings: int = 0


@dataclass(frozen=True)
class CalibConfig:
    rho_calib: float = 0.1
    sigma2_obs: float = 0.01
    tau_calib: float = 2.0
    window: int = 23
    max_evals: int = 500
    ftol: float = 1e-8
    mode: str = "sequential"   # or "independent": every window from the default start
    n_jobs: int = 1


def _matrix(A) -> np.ndarray:
    return A.entries if isinstance(A, RoutingMatrix) else np.atleast_2d(np.asarray(A, float))


def _values(y) -> np.ndarray:
    return np.atleast_2d(getattr(y, "values", y)).astype(float)


def kalman_filter(y, A, params: CalibParams, init_mean=None, init_cov=None,
                  store: bool = True) -> FilterResult:
    """Kalman filter from a Gaussian prior on ``x_0`` (default: stationary).

    Returns filtered and one-step predicted moments plus the predicted
    observation mean ``y_pred`` and covariance ``S`` of each ``y_t``.
    """
    a = _matrix(A)
    Y = _values(y)
    T, m = Y.shape
    n = a.shape[1]
    rho = params.rho_calib
    q = params.process_var
    drift = params.lambda_vec
    if init_mean is None or init_cov is None:
        m0, P0 = params.stationary_prior()
        init_mean = m0 if init_mean is None else init_mean
        init_cov = P0 if init_cov is None else init_cov
    mean = np.asarray(init_mean, dtype=float)
    P = np.asarray(init_cov, dtype=float)
    R = params.sigma2_obs * np.eye(m)

    if store:
        means = np.empty((T, n)); covs = np.empty((T, n, n))
        pmeans = np.empty((T, n)); pcovs = np.empty((T, n, n))
        ypred = np.empty((T, m)); Ss = np.empty((T, m, m))
    loglik = 0.0
    for t in range(T):
        mp = rho * mean + drift
        Pp = rho * rho * P
        Pp[np.diag_indices(n)] += q
        PA = Pp @ a.T
        S = a @ PA + R
        try:
            cf = cho_factor(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise KalmanError(t) from None
        yp = a @ mp
        e = Y[t] - yp
        Sinv_e = cho_solve(cf, e, check_finite=False)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        loglik -= 0.5 * (logdet + e @ Sinv_e + m * LOG_2PI)
        K = cho_solve(cf, PA.T, check_finite=False).T
        mean = mp + K @ e
        P = Pp - K @ PA.T
        P = 0.5 * (P + P.T)
        if store:
            means[t], covs[t], pmeans[t], pcovs[t] = mean, P, mp, Pp
            ypred[t], Ss[t] = yp, S
    if not store:
        return FilterResult(mean[None], P[None], None, None, None, None, loglik, rho)
    return FilterResult(means, covs, pmeans, pcovs, ypred, Ss, loglik, rho)


def kalman_smoother(f: FilterResult):
    """Rauch-Tung-Striebel fixed-interval smoother on a stored filter pass."""
    T = f.means.shape[0]
    ms = f.means.copy()
    Ps = f.covs.copy()
    for t in range(T - 2, -1, -1):
        try:
            cf = cho_factor(f.pred_covs[t + 1], lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise KalmanError(t + 1, "predicted state covariance") from None
        # J = P_t F' Pp^{-1} with F = rho I
        J = f.rho * cho_solve(cf, f.covs[t], check_finite=False).T
        ms[t] = f.means[t] + J @ (ms[t + 1] - f.pred_means[t + 1])
        Ps[t] = f.covs[t] + J @ (Ps[t + 1] - f.pred_covs[t + 1]) @ J.T
        Ps[t] = 0.5 * (Ps[t] + Ps[t].T)
    return ms, Ps


def marginal_loglik(y, A, params: CalibParams, init_mean=None, init_cov=None) -> float:
    """Gaussian prediction-error log likelihood, constants included."""
    Y = _values(y)
    if Y.shape[0] < 2:
        raise ValueError("marginal_loglik needs at least two observations")
    return kalman_filter(Y, A, params, init_mean, init_cov, store=False).loglik


def initial_params(y, A, rho_calib=0.1, sigma2_obs=0.01, tau_calib=2.0) -> CalibParams:
    """Moment-based starting values for a window fit.

    The mean flow is the IPFP projection of a flat vector onto the mean link
    loads; ``phi`` matches the total link-load variance.
    """
    a = _matrix(A)
    Y = _values(y)
    ybar = Y.mean(axis=0)
    scale = max(float(ybar.max()), 1e-6)
    try:
        xbar = ipfp_project(np.full(a.shape[1], scale / a.shape[1]), a,
                            np.maximum(ybar, 0), tol=1e-8, max_iter=2000).x
    except IPFPError:
        xbar = np.full(a.shape[1], scale / a.shape[1])
    xbar = np.maximum(xbar, 1e-3 * scale)
    lam = (1 - rho_calib) * xbar
    total_var = float(np.sum(Y.var(axis=0))) if Y.shape[0] > 1 else 0.0
    link_var = np.sum((a ** 2) @ (lam ** tau_calib)) / (1 - rho_calib ** 2)
    phi = max((total_var - sigma2_obs * a.shape[0]) / link_var, 1e-4) if link_var > 0 else 1.0
    return CalibParams(lam, phi, rho_calib, sigma2_obs, tau_calib)


@dataclass
class WindowFit:
    params: CalibParams
    loglik: float
    converged: bool
    n_evals: int


def fit_window(y, A, params0: CalibParams, max_evals: int = 500, ftol: float = 1e-8) -> WindowFit:
    """Maximize the marginal likelihood over ``(lambda_vec, phi_scale)``.

    ``rho``, ``sigma2`` and ``tau`` stay at their ``params0`` values.  The
    search runs L-BFGS-B over log-parameters with finite-difference
    gradients; the best point seen is returned even without convergence.
    """
    a = _matrix(A)
    Y = _values(y)
    n = a.shape[1]
    theta0 = np.concatenate([np.log(params0.lambda_vec), [np.log(params0.phi_scale)]])
    ymax = max(float(np.abs(Y).max()), 1.0)
    lo = np.concatenate([np.full(n, np.log(1e-8 * ymax)), [-20.0]])
    hi = np.concatenate([np.full(n, np.log(1e3 * ymax)), [10.0]])
    theta0 = np.clip(theta0, lo, hi)

    def unpack(theta):
        return replace(params0, lambda_vec=np.exp(theta[:n]), phi_scale=float(np.exp(theta[n])))

    best = {"f": np.inf, "theta": theta0}

    def objective(theta):
        try:
            f = -kalman_filter(Y, a, unpack(theta), store=False).loglik
        except KalmanError:
            return 1e300
        if f < best["f"]:
            best["f"], best["theta"] = f, theta.copy()
        return f

    f0 = objective(theta0)
    res = minimize(objective, theta0, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options={"maxfun": max_evals, "ftol": ftol, "gtol": 1e-10,
                            "maxiter": max_evals})
    converged = bool(res.success)
    if not converged:
        log.debug("window fit stopped without convergence: %s", res.message)
    theta = best["theta"] if best["f"] <= f0 else theta0
    return WindowFit(unpack(theta), -min(best["f"], f0), converged, int(res.nfev))


def _fit_and_smooth(Y, a, params0, max_evals, ftol):
    fit = fit_window(Y, a, params0, max_evals, ftol)
    ms, Ps = kalman_smoother(kalman_filter(Y, a, fit.params))
    return fit, ms, np.diagonal(Ps, axis1=1, axis2=2).copy()


def _better_start(Y, a, warm, default):
    """The previous window's optimum unless the default start scores higher.

    Warm starts alone can drift into a poorer local optimum once the data
    move away from where the chain started.
    """
    if warm is None:
        return default
    scores = []
    for p in (warm, default):
        try:
            scores.append(kalman_filter(Y, a, p, store=False).loglik)
        except KalmanError:
            scores.append(-np.inf)
    return warm if scores[0] >= scores[1] else default


def run_calibration(y, A, config: CalibConfig = CalibConfig()) -> CalibEstimates:
    """Sliding-window ML fits with smoothed OD estimates.

    Every window of width ``config.window`` (stride 1) is fitted; time ``t``
    takes its estimates from the window centred on it, edge times from the
    nearest full window.  In ``sequential`` mode each fit starts from the
    previous window's solution.
    """
    a = _matrix(A)
    Y = _values(y)
    T, _ = Y.shape
    w = config.window
    if T < w:
        raise ValueError(f"series length {T} shorter than window {w}")
    starts = np.clip(np.arange(T) - w // 2, 0, T - w)
    n_windows = T - w + 1

    def default_start(s):
        return initial_params(Y[s:s + w], a, config.rho_calib, config.sigma2_obs, config.tau_calib)

    results = []
    if config.mode == "sequential":
        warm = None
        for s in range(n_windows):
            params0 = _better_start(Y[s:s + w], a, warm, default_start(s))
            fit, ms, vs = _fit_and_smooth(Y[s:s + w], a, params0, config.max_evals, config.ftol)
            results.append((fit, ms, vs))
            warm = fit.params
    elif config.mode == "independent":
        jobs = [(Y[s:s + w], a, default_start(s), config.max_evals, config.ftol)
                for s in range(n_windows)]
        if config.n_jobs > 1:
            with ProcessPoolExecutor(config.n_jobs) as ex:
                results = list(ex.map(_fit_and_smooth, *zip(*jobs)))
        else:
            results = [_fit_and_smooth(*j) for j in jobs]
    else:
        raise ValueError(f"unknown calibration mode {config.mode!r}")

    n = a.shape[1]
    x_hat = np.empty((T, n)); V_hat = np.empty((T, n))
    phi_hat = np.empty(T); loglik = np.empty(T)
    for t in range(T):
        s = starts[t]
        fit, ms, vs = results[s]
        x_hat[t], V_hat[t] = ms[t - s], vs[t - s]
        phi_hat[t], loglik[t] = fit.params.phi_scale, fit.loglik
    n_warn = sum(not r[0].converged for r in results)
    if n_warn:
        warnings.warn(f"{n_warn} of {n_windows} window fits did not converge", RuntimeWarning)
    return CalibEstimates(x_hat=x_hat, V_hat=V_hat, phi_hat=phi_hat, loglik=loglik,
                          window_start=starts, window_params=[r[0] for r in results],
                          warnings=n_warn)
