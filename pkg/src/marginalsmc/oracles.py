"""Exact and brute-force reference computations.

Two independent oracles for the linear-Gaussian state-space model: the
Kalman filter with a smoothing pass (exact), and a 1-D grid filter that
integrates the target recursion by trapezoid quadrature (exact up to
grid resolution, and applicable to any 1-D model whose densities can be
evaluated).  The two are cross-checked against each other in the tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ExtinctionError, QuadratureDriftWarning
from .model import MarginalModel
from .numerics import Grid1D, trapezoid_integrate

__all__ = [
    "KalmanTrace",
    "kalman_filter",
    "conditional_kalman_coefficients",
    "conditional_loglik_quadratic",
    "GridDensity",
    "GridFilterResult",
    "grid_filter",
    "exact_marginal_weight",
    "grid_for_ssm",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(x, mean, var):
    """Elementwise log N(x; mean, var); broadcasts like numpy arithmetic."""
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# Kalman filter / smoother for the scalar linear-Gaussian SSM


@dataclass
class KalmanTrace:
    """Filtering, predictive and smoothed moments plus the log evidence.

    Index n = 0 holds the prior (no observation is attached to time 0);
    observations y_1..y_T are assimilated at indices 1..T.
    """

    pred_mean: np.ndarray
    pred_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    loglik_increments: np.ndarray
    smooth_mean: np.ndarray
    smooth_var: np.ndarray

    @property
    def log_z(self) -> float:
        return float(self.loglik_increments.sum())


def kalman_filter(ssm) -> KalmanTrace:
    """Exact filtering and smoothing for a :class:`LinearGaussianSSM`."""
    if min(ssm.sigma_x, ssm.sigma_y, ssm.s0) <= 0:
        raise ValueError("standard deviations must be positive")
    ys = np.asarray(ssm.ys, dtype=float)
    horizon = ys.size
    a, c = ssm.a, ssm.c
    qx, ry = ssm.sigma_x**2, ssm.sigma_y**2

    pred_mean = np.empty(horizon + 1)
    pred_var = np.empty(horizon + 1)
    filt_mean = np.empty(horizon + 1)
    filt_var = np.empty(horizon + 1)
    inc = np.zeros(horizon + 1)

    pred_mean[0], pred_var[0] = ssm.m0, ssm.s0**2
    filt_mean[0], filt_var[0] = ssm.m0, ssm.s0**2
    for n in range(1, horizon + 1):
        pred_mean[n] = a * filt_mean[n - 1]
        pred_var[n] = a**2 * filt_var[n - 1] + qx
        s = c**2 * pred_var[n] + ry
        gain = pred_var[n] * c / s
        innov = ys[n - 1] - c * pred_mean[n]
        filt_mean[n] = pred_mean[n] + gain * innov
        filt_var[n] = (1.0 - gain * c) * pred_var[n]
        inc[n] = gaussian_logpdf(ys[n - 1], c * pred_mean[n], s)

    smooth_mean = filt_mean.copy()
    smooth_var = filt_var.copy()
    for n in range(horizon - 1, -1, -1):
        j = filt_var[n] * a / pred_var[n + 1]
        smooth_mean[n] = filt_mean[n] + j * (smooth_mean[n + 1] - pred_mean[n + 1])
        smooth_var[n] = filt_var[n] + j**2 * (smooth_var[n + 1] - pred_var[n + 1])

    return KalmanTrace(pred_mean, pred_var, filt_mean, filt_var, inc,
                       smooth_mean, smooth_var)


def conditional_kalman_coefficients(ssm, k: int, n: int):
    """Moments of state n given observations y_{k+1..n} and state k.

    The conditional filtering density is Gaussian with mean affine in the
    conditioning state: N(alpha * x_k + beta, var).  Returns
    ``(alpha, beta, var)``; for ``k == n`` the state is known exactly and
    ``(1.0, 0.0, 0.0)`` is returned.
    """
    if not 0 <= k <= n <= len(ssm.ys):
        raise ValueError("need 0 <= k <= n <= horizon")
    a, c = ssm.a, ssm.c
    qx, ry = ssm.sigma_x**2, ssm.sigma_y**2
    alpha, beta, var = 1.0, 0.0, 0.0
    for j in range(k + 1, n + 1):
        alpha, beta, var = a * alpha, a * beta, a**2 * var + qx
        s = c**2 * var + ry
        gain = var * c / s
        y = ssm.ys[j - 1]
        beta = beta + gain * (y - c * beta)
        alpha = (1.0 - gain * c) * alpha
        var = (1.0 - gain * c) * var
    return alpha, beta, var


def conditional_loglik_quadratic(ssm, k: int, n: int):
    """Coefficients (q2, q1, q0) of log p(y_{k+1..n} | x_k) = q2 x^2 + q1 x + q0."""
    if not 0 <= k <= n <= len(ssm.ys):
        raise ValueError("need 0 <= k <= n <= horizon")
    a, c = ssm.a, ssm.c
    qx, ry = ssm.sigma_x**2, ssm.sigma_y**2
    alpha, beta, var = 1.0, 0.0, 0.0
    q2 = q1 = q0 = 0.0
    for j in range(k + 1, n + 1):
        alpha, beta, var = a * alpha, a * beta, a**2 * var + qx
        s = c**2 * var + ry
        y = ssm.ys[j - 1]
        # log N(y; c*(alpha x + beta), s) collected as a quadratic in x
        q2 += -0.5 * (c * alpha) ** 2 / s
        q1 += (y - c * beta) * c * alpha / s
        q0 += -0.5 * ((y - c * beta) ** 2 / s + LOG_2PI + np.log(s))
        gain = var * c / s
        beta = beta + gain * (y - c * beta)
        alpha = (1.0 - gain * c) * alpha
        var = (1.0 - gain * c) * var
    return q2, q1, q0


# ---------------------------------------------------------------------------
# Grid filter


@dataclass(frozen=True)
class GridDensity:
    """A density tabulated in log form on a quadrature grid."""

    grid: Grid1D
    log_values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        log_values = np.asarray(self.log_values, dtype=float)
        if log_values.shape != self.grid.points.shape:
            raise ValueError("log_values must match the grid length")
        object.__setattr__(self, "log_values", log_values)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def integral(self) -> float:
        return trapezoid_integrate(self.values, self.grid)

    def mean(self) -> float:
        return trapezoid_integrate(self.values * self.grid.points, self.grid)

    def moment2(self) -> float:
        return trapezoid_integrate(self.values * self.grid.points**2, self.grid)

    def expect(self, f_values: np.ndarray) -> float:
        return trapezoid_integrate(self.values * f_values, self.grid)

    def normalize(self) -> "GridDensity":
        total = self.integral()
        if not total > 0:
            raise ExtinctionError("grid density has zero total mass")
        return GridDensity(self.grid, self.log_values - np.log(total), True)

    def to_csv(self, path) -> None:
        """Write (point, density) rows for external inspection."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("point,density\n")
            for x, v in zip(self.grid.points, self.values):
                fh.write(f"{x:.17g},{v:.17g}\n")


@dataclass
class GridFilterResult:
    """Grid representations of the exact flow of one model.

    ``updated[n]`` is the normalised target at step n, ``predictive[n]``
    the normalised proposal mixture (at n = 0, the initial proposal
    itself) and ``log_increments[n]`` the log of the integral that
    normalises step n, so the running sum is the exact log normalising
    constant of the unnormalised flow.
    """

    grid: Grid1D
    updated: list[GridDensity] = field(default_factory=list)
    predictive: list[GridDensity] = field(default_factory=list)
    log_increments: list[float] = field(default_factory=list)

    @property
    def log_z(self) -> float:
        return float(np.sum(self.log_increments))

    def marginal_weight(self, n: int) -> np.ndarray:
        """Exact importance weight at step n on the grid (linear domain)."""
        log_g = self.log_marginal_weight(n)
        return np.exp(log_g)

    def log_marginal_weight(self, n: int) -> np.ndarray:
        num = self.log_increments[n] + self.updated[n].log_values
        den = self.predictive[n].log_values
        out = np.full(len(self.grid), -np.inf)
        ok = den > -np.inf
        out[ok] = num[ok] - den[ok]
        return out


def _pairwise_matrix(fn, x_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate fn on the (len(x_prev), len(x)) product of 1-D grids."""
    xp = x_prev.reshape(-1, 1, 1)
    xq = x.reshape(1, -1, 1)
    return np.asarray(fn(xp, xq), dtype=float)


def grid_filter(model: MarginalModel, grid: Grid1D,
                drift_tol: float = 1e-4) -> GridFilterResult:
    """Integrate the target recursion of a 1-D model on a fixed grid.

    Each step evaluates the update integral by trapezoid quadrature and
    renormalises; a warning is emitted when kernel mass visibly escapes
    the grid (normalisation drift above ``drift_tol``).
    """
    if model.dim != 1:
        raise ValueError("grid_filter requires a 1-D state space")
    result = GridFilterResult(grid=grid)
    xs = grid.points
    w = grid.weights
    dummy_prev = np.zeros((len(grid), 1))

    for n in range(model.horizon + 1):
        step = model.step(n)
        if n == 0:
            x_col = xs.reshape(-1, 1)
            log_m0 = np.asarray(step.proposal.log_density(dummy_prev, x_col), dtype=float)
            log_k0 = np.asarray(step.kernel.log_density(dummy_prev, x_col), dtype=float)
            log_u0 = np.asarray(step.potential.log_u(dummy_prev, x_col), dtype=float)
            predictive = GridDensity(grid, log_m0).normalize()
            gamma_vals = np.exp(log_u0 + log_k0)
            kernel_mass = trapezoid_integrate(np.exp(log_k0), grid)
        else:
            prev = result.updated[n - 1]
            log_k = _pairwise_matrix(step.kernel.log_density, xs, xs)
            log_u = _pairwise_matrix(step.potential.log_u, xs, xs)
            log_m = _pairwise_matrix(step.proposal.log_density, xs, xs)
            prev_w = prev.values * w
            gamma_vals = prev_w @ np.exp(log_k + log_u)
            pred_vals = prev_w @ np.exp(log_m)
            kernel_mass = trapezoid_integrate(prev_w @ np.exp(log_k), grid)
            with np.errstate(divide="ignore"):
                predictive = GridDensity(grid, np.log(pred_vals)).normalize()

        if abs(kernel_mass - 1.0) > drift_tol:
            warnings.warn(
                f"grid filter step {n}: kernel mass on grid is {kernel_mass:.6f}; "
                "the grid is too narrow or too coarse",
                QuadratureDriftWarning, stacklevel=2)

        increment = trapezoid_integrate(gamma_vals, grid)
        if not increment > 0:
            raise ExtinctionError(f"update integral vanished at step {n}")
        with np.errstate(divide="ignore"):
            updated = GridDensity(grid, np.log(gamma_vals) - np.log(increment), True)
        result.updated.append(updated)
        result.predictive.append(predictive)
        result.log_increments.append(float(np.log(increment)))
    return result


def exact_marginal_weight(model: MarginalModel, updated_prev: GridDensity,
                          n: int, x: float) -> float:
    """Exact importance weight G_n(x) by quadrature against the previous target.

    Ratio of the update integral to the proposal mixture at ``x``, both
    integrated against ``updated_prev``.  Step 0 has no mixture and is
    the plain density ratio.
    """
    grid = updated_prev.grid
    x_arr = np.array([[float(x)]])
    step = model.step(n)
    if n == 0:
        dummy = np.zeros((1, 1))
        log_u = np.asarray(step.potential.log_u(dummy, x_arr)).reshape(-1)[0]
        log_k = np.asarray(step.kernel.log_density(dummy, x_arr)).reshape(-1)[0]
        log_m = np.asarray(step.proposal.log_density(dummy, x_arr)).reshape(-1)[0]
        return float(np.exp(log_u + log_k - log_m))
    xp = grid.points.reshape(-1, 1)
    xq = np.broadcast_to(x_arr, (len(grid), 1))
    log_k = np.asarray(step.kernel.log_density(xp, xq), dtype=float).reshape(-1)
    log_u = np.asarray(step.potential.log_u(xp, xq), dtype=float).reshape(-1)
    log_m = np.asarray(step.proposal.log_density(xp, xq), dtype=float).reshape(-1)
    dens_prev = updated_prev.values
    num = trapezoid_integrate(dens_prev * np.exp(log_u + log_k), grid)
    den = trapezoid_integrate(dens_prev * np.exp(log_m), grid)
    if not den > 0:
        raise ExtinctionError(f"proposal mixture vanished at x = {x}")
    return float(num / den)


def grid_for_ssm(ssm, n_points: int = 2001, half_width: float = 8.0) -> Grid1D:
    """A grid spanning every predictive/filtering/smoothed mass of an SSM.

    Anchored to the Kalman moments so downstream quadrature does not
    silently truncate probability mass.
    """
    trace = kalman_filter(ssm)
    stds = np.sqrt(np.concatenate([trace.pred_var, trace.filt_var, trace.smooth_var]))
    means = np.concatenate([trace.pred_mean, trace.filt_mean, trace.smooth_mean])
    width = half_width * float(stds.max())
    lo = float(means.min()) - width
    hi = float(means.max()) + width
    return Grid1D.regular(lo, hi, n_points)
