"""The two particle engines and their shared machinery.

``run_msmc`` propagates a cloud with mixture importance weights: the
weight of a new particle is the ratio of the weighted ancestor mixture of
``u * k`` densities to the weighted ancestor mixture of proposal
densities, an O(N^2) computation chunked over query particles.
``run_standard_smc`` runs the classical path-space filter on the same
schedule, weighting each particle against its own ancestor only.  Both
engines share one loop, one stream layout and one resampler, so they
coincide bit-for-bit whenever their weight formulas coincide
algebraically (bootstrap models, or N = 1).

Resampling is multinomial and happens at every step; the weighted
pre-resampling cloud of step n-1 is retained because the step-n mixture
sums run over those weights, not over the uniform resampled cloud.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ExtinctionError
from .model import (
    FilterTrace,
    MarginalModel,
    ParticleCloud,
    StepRecord,
)
from .numerics import _EXP_CLAMP, Grid1D, _shifted_exp_sum, ess, normalize_log_weights
from .streams import SeededStream

__all__ = [
    "EngineConfig",
    "multinomial_resample",
    "mixture_log_density",
    "compute_marginal_log_weights",
    "msmc_step",
    "run_msmc",
    "run_standard_smc",
    "check_conditional_expectation",
    "check_conditional_expectations",
]

PhiDict = dict[str, Callable[[np.ndarray], np.ndarray]]
InferentialFn = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EngineConfig:
    """Run parameters common to both engines."""

    n_particles: int
    resample_every_step: bool = True
    record_pre_and_post: bool = True
    chunk_size: int = 512

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if not self.resample_every_step:
            raise ConfigError(
                "only the every-step resampling schedule is supported; "
                "adaptive or skipped resampling is out of scope")


def multinomial_resample(weights: np.ndarray, stream: SeededStream) -> np.ndarray:
    """Draw N ancestor indices iid from the categorical given by ``weights``."""
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not np.isclose(total, 1.0, rtol=0.0, atol=1e-8):
        raise ValueError(f"weights must be normalised, sum = {total!r}")
    n = weights.size
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    u = stream.generator().random(n)
    ancestors = np.searchsorted(cumulative, u, side="right")
    return np.minimum(ancestors, n - 1)


def _row_logsumexp(matrix: np.ndarray, allow_empty: bool) -> np.ndarray:
    """Stabilised logsumexp along axis 1; -inf rows allowed or fatal."""
    m, s = _shifted_exp_sum(matrix, axis=1)
    if not allow_empty and not np.all(np.isfinite(m)):
        raise ExtinctionError(
            "a proposal mixture evaluated to zero for some particle")
    with np.errstate(divide="ignore"):
        out = m + np.log(s)
    return out


def _weighted_row_logsumexp(matrix: np.ndarray, weights: np.ndarray,
                            allow_empty: bool) -> np.ndarray:
    """log(exp(matrix) @ weights) per row, in place, strictly positive weights.

    Shifts by the plain row maximum and folds the weights in linearly;
    valid because weights <= 1 keeps the shifted products from
    overflowing, and no weight is small enough (they are normalised
    doubles) to push the leading term into underflow.  The einsum
    reduction has a fixed order independent of chunking and thread count.
    """
    m = np.max(matrix, axis=1)
    finite = np.isfinite(m)
    if not allow_empty and not np.all(finite):
        raise ExtinctionError(
            "a proposal mixture evaluated to zero for some particle")
    safe_m = np.where(finite, m, 0.0)
    matrix -= safe_m[:, None]
    np.maximum(matrix, _EXP_CLAMP, out=matrix)
    np.exp(matrix, out=matrix)
    s = np.einsum("cn,n->c", matrix, weights)
    with np.errstate(divide="ignore"):
        return m + np.log(s)


def mixture_log_density(weights: np.ndarray,
                        component_log_density,
                        centers: np.ndarray,
                        queries: np.ndarray,
                        chunk_size: int = 512,
                        allow_empty: bool = False,
                        pairwise=None) -> np.ndarray:
    """log sum_j weights_j * density(centers_j, query_i) for all queries i.

    ``weights`` are linear (normalised) mixture weights.  The computation
    is chunked over queries with a fixed reduction order over centers, so
    results do not depend on ``chunk_size``.  ``pairwise(centers, chunk)``
    may supply the (len(chunk), len(centers)) log-density matrix as a
    fresh writable array; otherwise ``component_log_density`` is
    broadcast.  Zero weights force the slower fully-shifted path, where
    they are folded into the matrix in log form.
    """
    weights = np.asarray(weights, dtype=float)
    all_positive = bool(np.all(weights > 0.0))
    if not all_positive:
        with np.errstate(divide="ignore"):
            log_weights = np.log(weights)
    n_queries = queries.shape[0]
    out = np.empty(n_queries)
    centers_b = centers[None, :, :]
    for lo in range(0, n_queries, chunk_size):
        chunk = queries[lo:lo + chunk_size]
        if pairwise is not None:
            matrix = pairwise(centers, chunk)
        else:
            matrix = np.asarray(
                component_log_density(centers_b, chunk[:, None, :]), dtype=float)
            if not matrix.flags.owndata or not matrix.flags.writeable:
                matrix = matrix.copy()
        if all_positive:
            out[lo:lo + chunk.shape[0]] = _weighted_row_logsumexp(
                matrix, weights, allow_empty)
        else:
            matrix += log_weights[None, :]
            out[lo:lo + chunk.shape[0]] = _row_logsumexp(matrix, allow_empty)
    return out


def compute_marginal_log_weights(prev: ParticleCloud,
                                 new_positions: np.ndarray,
                                 model: MarginalModel,
                                 n: int,
                                 chunk_size: int = 512) -> np.ndarray:
    """Log mixture importance weights of ``new_positions`` at step ``n``.

    For n >= 1 this is the log-ratio of the weighted ancestor mixture of
    ``u_n * k_n`` to the weighted ancestor mixture of proposal densities,
    with the sums taken over the *weighted* cloud ``prev``.  At n = 0
    there is no mixture and the weight is the elementwise density ratio
    ``u_0 * k_0 / m_0``.
    """
    step = model.step(n)
    if model.marginal_weight_override is not None:
        weights, _ = normalize_log_weights(prev.log_weights)
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        return np.asarray(model.marginal_weight_override(
            prev.positions, log_w, new_positions, n), dtype=float)

    if n == 0:
        dummy = np.zeros_like(new_positions)
        log_u = np.asarray(step.potential.log_u(dummy, new_positions), dtype=float)
        log_k = np.asarray(step.kernel.log_density(dummy, new_positions), dtype=float)
        log_m = np.asarray(step.proposal.log_density(dummy, new_positions), dtype=float)
        # grouped so algebraic cancellations (k = m) stay exact in floats
        return log_u + (log_k - log_m)

    weights, _ = normalize_log_weights(prev.log_weights)

    centers = prev.positions
    if model.potential_ignores_prev:
        log_num = mixture_log_density(
            weights, step.kernel.log_density, centers, new_positions,
            chunk_size, allow_empty=True,
            pairwise=step.kernel.pairwise_log_density)
        log_u_free = np.asarray(
            step.potential.log_u(np.zeros_like(new_positions), new_positions),
            dtype=float)
    else:
        def weighted_component(xp, x):
            return (np.asarray(step.kernel.log_density(xp, x), dtype=float)
                    + np.asarray(step.potential.log_u(xp, x), dtype=float))

        log_num = mixture_log_density(
            weights, weighted_component, centers, new_positions,
            chunk_size, allow_empty=True)
        log_u_free = None

    if model.proposal_ignores_prev:
        dummy = np.zeros_like(new_positions)
        log_den = np.asarray(
            step.proposal.log_density(dummy, new_positions), dtype=float)
        if np.any(np.isneginf(log_den)):
            raise ExtinctionError(
                "the proposal density vanished at a proposed particle")
    else:
        log_den = mixture_log_density(
            weights, step.proposal.log_density, centers, new_positions,
            chunk_size, allow_empty=False,
            pairwise=step.proposal.pairwise_log_density)

    # grouped so the bootstrap cancellation (kernel = proposal mixture)
    # yields log_u exactly, matching the per-ancestor engine bitwise
    if log_u_free is not None:
        return log_u_free + (log_num - log_den)
    return log_num - log_den


def _standard_log_weights(ancestors_positions: np.ndarray,
                          new_positions: np.ndarray,
                          model: MarginalModel, n: int) -> np.ndarray:
    """Per-ancestor path-space weights u_n * k_n / m_n, elementwise."""
    step = model.step(n)
    log_u = np.asarray(step.potential.log_u(ancestors_positions, new_positions), dtype=float)
    log_k = np.asarray(step.kernel.log_density(ancestors_positions, new_positions), dtype=float)
    log_m = np.asarray(step.proposal.log_density(ancestors_positions, new_positions), dtype=float)
    if np.any(np.isneginf(log_m)):
        raise ExtinctionError("the proposal density vanished at a proposed particle")
    return log_u + (log_k - log_m)


def _relative_variance(log_values: np.ndarray) -> float:
    """var(w) / mean(w)^2 of weights given in log form, scale-free."""
    m = log_values.max()
    if not np.isfinite(m):
        return float("nan")
    w = np.exp(log_values - m)
    mean = w.mean()
    return float(w.var() / mean**2)


def _record_step(n: int, new_positions: np.ndarray, log_g: np.ndarray,
                 cumulative_log_z: float, cfg: EngineConfig,
                 test_fns: PhiDict, stream: SeededStream,
                 inferential_log_weight: InferentialFn | None,
                 started: float):
    """Normalise, estimate, resample; shared tail of one engine step."""
    weights, log_mean = normalize_log_weights(log_g)
    cumulative_log_z += log_mean

    estimates_pre = {name: float(np.dot(weights, fn(new_positions)))
                     for name, fn in test_fns.items()}

    estimates_inferential: dict[str, float] = {}
    relvar = None
    if inferential_log_weight is not None:
        correction = np.asarray(inferential_log_weight(n, new_positions), dtype=float)
        combined = log_g + correction
        relvar = _relative_variance(combined)
        w_inf, _ = normalize_log_weights(combined)
        estimates_inferential = {name: float(np.dot(w_inf, fn(new_positions)))
                                 for name, fn in test_fns.items()}

    ancestors = multinomial_resample(weights, stream.child("resample", n))
    resampled_positions = new_positions[ancestors]

    estimates_post = {}
    if cfg.record_pre_and_post:
        estimates_post = {name: float(np.mean(fn(resampled_positions)))
                          for name, fn in test_fns.items()}

    record = StepRecord(
        step=n,
        estimates_pre=estimates_pre,
        estimates_post=estimates_post,
        ess=ess(weights),
        log_increment=float(log_mean),
        cumulative_log_z=float(cumulative_log_z),
        wall_time=time.perf_counter() - started,
        estimates_inferential=estimates_inferential,
        combined_weight_relvar=relvar,
    )
    with np.errstate(divide="ignore"):
        weighted = ParticleCloud(new_positions, np.log(weights), n, cumulative_log_z)
    uniform = ParticleCloud.uniform(resampled_positions, n, cumulative_log_z)
    return uniform, weighted, record


def msmc_step(uniform: ParticleCloud, weighted_prev: ParticleCloud,
              model: MarginalModel, n: int, cfg: EngineConfig,
              stream: SeededStream, test_fns: PhiDict,
              inferential_log_weight: InferentialFn | None = None):
    """One mutate/reweight/resample transition of the mixture-weight engine.

    ``uniform`` is the resampled cloud of step n-1; ``weighted_prev`` is
    the weighted cloud of step n-1 that the mixture sums require.
    Returns ``(uniform, weighted, record)`` for step n.
    """
    if n > model.horizon:
        raise IndexError(f"step {n} exceeds model horizon {model.horizon}")
    started = time.perf_counter()
    new_positions = model.step(n).proposal.sample(
        stream.child("mutate", n), uniform.positions)
    log_g = compute_marginal_log_weights(
        weighted_prev, new_positions, model, n, cfg.chunk_size)
    return _record_step(n, new_positions, log_g, uniform.cumulative_log_z,
                        cfg, test_fns, stream, inferential_log_weight, started)


def _initial_step(model: MarginalModel, cfg: EngineConfig,
                  stream: SeededStream, test_fns: PhiDict,
                  inferential_log_weight: InferentialFn | None):
    started = time.perf_counter()
    blank = np.zeros((cfg.n_particles, model.dim))
    positions = model.step(0).proposal.sample(stream.child("mutate", 0), blank)
    log_g = compute_marginal_log_weights(
        ParticleCloud.uniform(blank), positions, model, 0, cfg.chunk_size)
    return _record_step(0, positions, log_g, 0.0, cfg, test_fns, stream,
                        inferential_log_weight, started)


def run_msmc(model: MarginalModel, cfg: EngineConfig, test_fns: PhiDict,
             stream: SeededStream,
             inferential_log_weight: InferentialFn | None = None) -> FilterTrace:
    """Run the mixture-weight engine over the full model horizon."""
    trace = FilterTrace()
    uniform, weighted, record = _initial_step(
        model, cfg, stream, test_fns, inferential_log_weight)
    trace.records.append(record)
    for n in range(1, model.horizon + 1):
        uniform, weighted, record = msmc_step(
            uniform, weighted, model, n, cfg, stream, test_fns,
            inferential_log_weight)
        trace.records.append(record)
    return trace


def run_standard_smc(model: MarginalModel, cfg: EngineConfig, test_fns: PhiDict,
                     stream: SeededStream) -> FilterTrace:
    """Run the classical per-ancestor engine on the same schedule.

    Only time-marginal estimates are reported; no path is stored beyond
    each particle's current ancestor.
    """
    trace = FilterTrace()
    uniform, _, record = _initial_step(model, cfg, stream, test_fns, None)
    trace.records.append(record)
    for n in range(1, model.horizon + 1):
        started = time.perf_counter()
        ancestors_positions = uniform.positions
        new_positions = model.step(n).proposal.sample(
            stream.child("mutate", n), ancestors_positions)
        log_g = _standard_log_weights(ancestors_positions, new_positions, model, n)
        uniform, _, record = _record_step(
            n, new_positions, log_g, uniform.cumulative_log_z, cfg, test_fns,
            stream, None, started)
        trace.records.append(record)
    return trace


def check_conditional_expectations(fixed_prev: ParticleCloud,
                                   model: MarginalModel, n: int,
                                   phis: PhiDict, replicates: int,
                                   stream: SeededStream, grid: Grid1D,
                                   chunk_size: int = 512):
    """Monte Carlo check of the one-step conditional expectation identity.

    Freezes a weighted cloud at step n-1 and replicates the
    resample/mutate/reweight transition; the mean of the unnormalised
    estimate (1/N) sum_i G(X_i) phi(X_i) must match, over replications,
    the quadrature value sum_j W_j integral k_n(X_j, x) u_n(X_j, x)
    phi(x) dx.  All test functions share one set of replications.
    Returns ``{name: (mc_mean, mc_se, exact_value)}``.
    """
    if model.dim != 1:
        raise ValueError("the exact side requires a 1-D state space")
    if n < 1:
        raise ValueError("the identity concerns steps n >= 1")
    weights = fixed_prev.normalized_weights()
    step = model.step(n)

    xs_row = grid.points.reshape(1, -1, 1)
    prev_col = fixed_prev.positions[:, None, :]
    log_k = np.asarray(step.kernel.log_density(prev_col, xs_row), dtype=float)
    log_u = np.asarray(step.potential.log_u(prev_col, xs_row), dtype=float)
    kernel_times_potential = np.exp(log_k + log_u)
    names = list(phis)
    exact = {}
    for name in names:
        phi_grid = phis[name](grid.points.reshape(-1, 1))
        inner = kernel_times_potential @ (phi_grid * grid.weights)
        exact[name] = float(np.dot(weights, inner))

    values = np.empty((replicates, len(names)))
    for r in range(replicates):
        rep = stream.child("replicate", r)
        ancestors = multinomial_resample(weights, rep.child("resample"))
        moved = step.proposal.sample(rep.child("mutate"),
                                     fixed_prev.positions[ancestors])
        log_g = compute_marginal_log_weights(fixed_prev, moved, model, n, chunk_size)
        g = np.exp(log_g)
        for j, name in enumerate(names):
            values[r, j] = float(np.mean(g * phis[name](moved)))
    out = {}
    for j, name in enumerate(names):
        mc_mean = float(values[:, j].mean())
        mc_se = float(values[:, j].std(ddof=1) / np.sqrt(replicates))
        out[name] = (mc_mean, mc_se, exact[name])
    return out


def check_conditional_expectation(fixed_prev: ParticleCloud,
                                  model: MarginalModel, n: int,
                                  phi: Callable[[np.ndarray], np.ndarray],
                                  replicates: int, stream: SeededStream,
                                  grid: Grid1D,
                                  chunk_size: int = 512):
    """Single-test-function form of :func:`check_conditional_expectations`."""
    result = check_conditional_expectations(
        fixed_prev, model, n, {"phi": phi}, replicates, stream, grid, chunk_size)
    return result["phi"]
