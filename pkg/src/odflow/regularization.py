"""Regularization schedules for the multilevel model.

Calibration estimates become, per OD flow and time, a log-scale drift
``theta1 = log x_t - log x_{t-1}`` and a log-scale innovation variance
``theta2 = (1 - rho**2) * log(1 + V_t / x_t**2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import RoutingMatrix
from .polytope import ipfp_project

NAIVE_THETA2 = np.log(5.0) / 2.0
MEDIAN_WINDOW = 5


@dataclass(frozen=True)
class RegularizationSchedule:
    theta1: np.ndarray     # T x n_od
    theta2: np.ndarray     # T x n_od, > 0
    phi_t_hat: np.ndarray  # T, prior mean of phi_t
    rho_model: float = 0.9
    tau: float = 2.0
    alpha: float = 2.0

    def __post_init__(self):
        t1 = np.atleast_2d(np.asarray(self.theta1, dtype=float))
        t2 = np.atleast_2d(np.asarray(self.theta2, dtype=float))
        ph = np.atleast_1d(np.asarray(self.phi_t_hat, dtype=float))
        if t1.shape != t2.shape or ph.shape != (t1.shape[0],):
            raise ValueError("schedule arrays have inconsistent shapes")
        if np.any(t2 <= 0) or np.any(ph <= 0):
            raise ValueError("theta2 and phi_t_hat must be positive")
        if not 0 < self.rho_model < 1:
            raise ValueError("rho_model must lie in (0, 1)")
        if self.tau <= 0 or self.alpha <= 0:
            raise ValueError("tau and alpha must be positive")
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)
        object.__setattr__(self, "phi_t_hat", ph)

    @property
    def T(self) -> int:
        return self.theta1.shape[0]

    @property
    def n_od(self) -> int:
        return self.theta1.shape[1]


def smooth_running_median(series, window: int = MEDIAN_WINDOW) -> np.ndarray:
    """Centered running median per column; edges use the truncated window."""
    x = np.asarray(series, dtype=float)
    squeeze = x.ndim == 1
    x = x.reshape(x.shape[0], -1)
    T = x.shape[0]
    if window < 1 or window % 2 == 0 or window > T:
        raise ValueError(f"window must be odd and in [1, {T}], got {window}")
    half = window // 2
    out = np.empty_like(x)
    for t in range(T):
        out[t] = np.median(x[max(0, t - half):t + half + 1], axis=0)
    return out[:, 0] if squeeze else out


def theta_from_estimates(x_hat, V_hat, rho: float):
    """Drift and variance formulas on already smoothed, positive ``x_hat``."""
    x_hat = np.asarray(x_hat, dtype=float)
    log_x = np.log(x_hat)
    theta1 = np.zeros_like(x_hat)
    theta1[1:] = log_x[1:] - log_x[:-1]
    theta2 = (1 - rho ** 2) * np.log1p(np.asarray(V_hat, dtype=float) / x_hat ** 2)
    return theta1, theta2


def default_floor(y) -> float:
    return max(1e-3, 1e-6 * float(np.mean(y)))


def project_estimates(x_hat, A, y, tol: float = 1e-10) -> np.ndarray:
    """IPFP-project every calibration estimate onto its feasible set.

    Nonpositive entries are lifted to a small positive value first since
    IPFP cannot move a zero.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, float)
    Y = np.atleast_2d(getattr(y, "values", y))
    X = np.asarray(x_hat, dtype=float)
    out = np.empty_like(X)
    for t in range(X.shape[0]):
        lift = max(1e-6 * float(np.abs(X[t]).max()), 1e-9)
        out[t] = ipfp_project(np.maximum(X[t], lift), a, Y[t], tol=tol).x
    return out


def compute_schedule(estimates, A, y, rho_model: float = 0.9, alpha: float = 2.0,
                     tau: float = 2.0, floor: float | None = None,
                     median_window: int = MEDIAN_WINDOW) -> RegularizationSchedule:
    """Two-stage regularization schedule from calibration estimates.

    Steps: IPFP projection per time, positivity floor, running median,
    then the drift/variance formulas.  ``phi_t_hat`` is the calibration
    dispersion estimate.
    """
    Y = np.atleast_2d(getattr(y, "values", y))
    if floor is None:
        floor = default_floor(Y)
    x = project_estimates(estimates.x_hat, A, Y)
    x = np.maximum(x, floor)
    T = x.shape[0]
    largest_odd = T if T % 2 else T - 1  # short series: shrink the window
    x = smooth_running_median(x, min(median_window, largest_odd))
    theta1, theta2 = theta_from_estimates(x, estimates.V_hat, rho_model)
    # zero posterior variance would give theta2 = 0; keep the schedule valid
    theta2 = np.maximum(theta2, 1e-12)
    return RegularizationSchedule(theta1=theta1, theta2=theta2,
                                  phi_t_hat=np.asarray(estimates.phi_hat, dtype=float),
                                  rho_model=rho_model, tau=tau, alpha=alpha)


def naive_schedule(n_od: int, T: int, alpha: float = 2.0, phi_default: float = 0.5,
                   rho_model: float = 0.9, tau: float = 2.0) -> RegularizationSchedule:
    """Random-walk regularization: ``theta1 = 0``, ``theta2 = log(5)/2``."""
    return RegularizationSchedule(theta1=np.zeros((T, n_od)),
                                  theta2=np.full((T, n_od), NAIVE_THETA2),
                                  phi_t_hat=np.full(T, phi_default),
                                  rho_model=rho_model, tau=tau, alpha=alpha)
