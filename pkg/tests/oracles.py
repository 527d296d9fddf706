"""Independent reference computations used as test oracles."""
from __future__ import annotations

import numpy as np
from scipy.linalg import null_space
from scipy.stats import multivariate_normal

from odflow.model import ModelParams
from odflow.regularization import RegularizationSchedule
from odflow.sirm import SIRMConfig


def joint_gaussian(A, lam, phi, rho, sigma2, tau, T, m0, P0):
    """Mean and covariance of ``(x_1..x_T, y_1..y_T)`` built directly.

    ``x_t = rho^t x_0 + sum_{k<=t} rho^(t-k) (lam + e_k)``, so the stacked
    state is a linear map of ``(x_0, e_1..e_T)``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    m, n = A.shape
    lam = np.asarray(lam, float)
    Q = np.diag(phi * lam ** tau)
    L = np.zeros((T * n, (T + 1) * n))
    mean_x = np.zeros(T * n)
    for t in range(1, T + 1):
        rows = slice((t - 1) * n, t * n)
        L[rows, :n] = rho ** t * np.eye(n)
        for k in range(1, t + 1):
            L[rows, k * n:(k + 1) * n] = rho ** (t - k) * np.eye(n)
        mean_x[rows] = rho ** t * m0 + sum(rho ** (t - k) for k in range(1, t + 1)) * lam
    cov_z = np.zeros(((T + 1) * n,) * 2)
    cov_z[:n, :n] = P0
    for k in range(1, T + 1):
        cov_z[k * n:(k + 1) * n, k * n:(k + 1) * n] = Q
    cov_x = L @ cov_z @ L.T
    H = np.kron(np.eye(T), A)
    mean = np.concatenate([mean_x, H @ mean_x])
    cov = np.block([[cov_x, cov_x @ H.T],
                    [H @ cov_x, H @ cov_x @ H.T + sigma2 * np.eye(T * m)]])
    return mean, cov, n, m


def condition(mean, cov, keep, given, values):
    """Moments of ``z[keep]`` given ``z[given] = values``."""
    S12 = cov[np.ix_(keep, given)]
    S22 = cov[np.ix_(given, given)]
    K = np.linalg.solve(S22, S12.T).T
    mu = mean[keep] + K @ (values - mean[given])
    return mu, cov[np.ix_(keep, keep)] - K @ S12.T


def brute_force_kalman(Y, A, lam, phi, rho, sigma2, tau, m0, P0):
    """Filtered and smoothed moments plus log likelihood by direct conditioning."""
    Y = np.atleast_2d(Y)
    T = Y.shape[0]
    mean, cov, n, m = joint_gaussian(A, lam, phi, rho, sigma2, tau, T, m0, P0)
    y_idx = lambda t: np.arange(T * n + t * m, T * n + (t + 1) * m)  # noqa: E731
    x_idx = lambda t: np.arange(t * n, (t + 1) * n)  # noqa: E731
    filt_m, filt_P, sm_m, sm_P = [], [], [], []
    all_y = np.concatenate([y_idx(s) for s in range(T)])
    for t in range(T):
        given = np.concatenate([y_idx(s) for s in range(t + 1)])
        mu, P = condition(mean, cov, x_idx(t), given, Y[:t + 1].ravel())
        filt_m.append(mu); filt_P.append(P)
        mu, P = condition(mean, cov, x_idx(t), all_y, Y.ravel())
        sm_m.append(mu); sm_P.append(P)
    ll = multivariate_normal(mean[all_y], cov[np.ix_(all_y, all_y)]).logpdf(Y.ravel())
    return np.array(filt_m), np.array(filt_P), np.array(sm_m), np.array(sm_P), float(ll)


def hit_and_run_uniform(A, x0, n_chains, n_steps, rng, burn=200):
    """Uniform hit-and-run on ``{x >= 0, A x = A x0}`` in an orthonormal null-space basis."""
    N = null_space(np.atleast_2d(A))
    X = np.tile(np.asarray(x0, float), (n_chains, 1))
    out = np.zeros_like(X)
    for step in range(burn + n_steps):
        z = rng.standard_normal((n_chains, N.shape[1]))
        d = z @ N.T
        with np.errstate(divide="ignore", invalid="ignore"):
            r = -X / d
        hi = np.min(np.where(d < -1e-12, r, np.inf), axis=1)
        lo = np.max(np.where(d > 1e-12, r, -np.inf), axis=1)
        u = lo + (hi - lo) * rng.random(n_chains)
        X = X + u[:, None] * d
        if step >= burn:
            out += X
    return out / n_steps  # per-chain averages


def scalar_log_kalman(y, rho, theta1, theta2, obs_var, m0, P0):
    """Filtered means of ``l_t = rho l_{t-1} + theta1 + N(0, theta2)``, ``y_t ~ N(l_t, obs_var)``."""
    m, P = m0, P0
    means = []
    for t, yt in enumerate(y):
        m = rho * m + theta1[t]
        P = rho * rho * P + theta2[t]
        K = P / (P + obs_var)
        m = m + K * (yt - m)
        P = (1 - K) * P
        means.append(m)
    return np.array(means)


def unimodal_on_grid(g, tol: float = 1e-9) -> bool:
    """True when ``g`` rises to its maximum and then falls, up to ``tol``.

    Equivalent to every superlevel set of the gridded function being an
    interval, i.e. no second local maximum behind a lower valley.
    """
    g = np.asarray(g, float)
    k = int(np.argmax(g))
    rising = np.all(np.diff(g[:k + 1]) >= -tol)
    falling = np.all(np.diff(g[k:]) <= tol)
    return bool(rising and falling)


def lognormal_segment_logpdf(y, mu, s, n_grid=10_000):
    """Product log-normal log density along ``x1 + x2 = y`` on an interior grid."""
    u = np.linspace(0.0, y, n_grid + 2)[1:-1]
    parts = []
    for x, m, sd in ((u, mu[0], s[0]), (y - u, mu[1], s[1])):
        parts.append(-np.log(x) - (np.log(x) - m) ** 2 / (2 * sd ** 2))
    return u, parts[0] + parts[1]


def conjugate_surrogate(run_filter, T=50, runs=20, n_particles=1000, seed=0):
    """SMC on ``A = [1]`` with a Gaussian emission ``y_t ~ N(log lam_t, s2)``.

    The model is then linear-Gaussian in ``log lam``; returns the exact
    filtered means and the per-run SMC means of ``log lam`` (``runs x T``).
    """
    rho, s2 = 0.8, 0.3
    theta1, theta2 = np.full(T, 0.1), np.full(T, 0.2)
    rng = np.random.default_rng(seed)
    level, y = 0.0, np.empty(T)
    for t in range(T):
        level = rho * level + theta1[t] + np.sqrt(theta2[t]) * rng.standard_normal()
        y[t] = level + np.sqrt(s2) * rng.standard_normal()
    y = y - min(0.0, y.min()) + 0.1  # loads must be nonnegative; any data will do

    def emission(x, lam, phi):
        return -0.5 * (x - np.log(lam)) ** 2 / s2 - 0.5 * np.log(2 * np.pi * s2)

    sched = RegularizationSchedule(theta1[:, None], theta2[:, None], np.full(T, 0.3),
                                   rho_model=rho)
    params = ModelParams(rho_model=rho, lambda0_mean=1.0, lambda0_sd=1.0)
    exact = scalar_log_kalman(y, rho, theta1, theta2, s2, 0.0, 1.0)
    smc = np.array([run_filter(y[:, None], np.eye(1), sched, params,
                               SIRMConfig(n_particles=n_particles), seed=seed + 1 + r,
                               emission=emission).log_lambda_mean[:, 0]
                    for r in range(runs)])
    return exact, smc
