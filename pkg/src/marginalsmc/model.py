"""Model interfaces and the particle-cloud data structures.

A :class:`MarginalModel` is a time-indexed bundle of three components per
step: a proposal kernel used to move particles, a transition kernel and a
nonnegative potential that together define the target recursion

    target_n(dx) ~ integral u_n(x', x) k_n(x', dx) target_{n-1}(dx'),

with ``target_0(dx) ~ u_0(x) k_0(dx)``.  All densities are understood with
respect to one dominating measure fixed by the model author (Lebesgue for
every model shipped in this package).  Time-0 components accept a dummy
ignored previous state so a single signature serves all steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IntractableDensityError
from .numerics import Grid1D, normalize_log_weights, trapezoid_integrate
from .streams import SeededStream

__all__ = [
    "DensityKernel",
    "Potential",
    "ModelStep",
    "MarginalModel",
    "ParticleCloud",
    "StepRecord",
    "FilterTrace",
    "weighted_estimate",
    "validate_model",
    "ValidationReport",
    "test_function",
    "TEST_FUNCTION_NAMES",
    "unavailable_log_density",
]

# Callables operate on state arrays of shape (..., dim) and broadcast over
# leading axes; log densities return shape (...), samplers return (N, dim).
LogDensityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
SamplerFn = Callable[[SeededStream, np.ndarray], np.ndarray]


def unavailable_log_density(name: str) -> LogDensityFn:
    """A log-density stub for kernels that exist only as samplers."""

    def _raise(x_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise IntractableDensityError(
            f"the density of {name!r} is intractable and must never be evaluated"
        )

    return _raise


@dataclass(frozen=True)
class DensityKernel:
    """A Markov kernel exposed as a log-density and a sampler.

    ``log_density(x_prev, x)`` evaluates the kernel density at ``x`` given
    ``x_prev`` (ignored by time-0 kernels).  ``sampler(stream, x_prev)``
    draws one new state per row of ``x_prev``.

    ``pairwise_log_density(centers, queries)``, when provided, returns the
    (len(queries), len(centers)) matrix of log densities as a fresh
    writable array; it exists so hot mixture loops can use an
    allocation-lean evaluation.  It must agree with ``log_density`` to
    rounding.
    """

    log_density: LogDensityFn
    sampler: SamplerFn
    pairwise_log_density: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def sample(self, stream: SeededStream, x_prev: np.ndarray) -> np.ndarray:
        out = np.asarray(self.sampler(stream, x_prev))
        if out.shape != x_prev.shape:
            raise ValueError(
                f"sampler returned shape {out.shape}, expected {x_prev.shape}"
            )
        return out


@dataclass(frozen=True)
class Potential:
    """Nonnegative reweighting function coupling consecutive states."""

    log_u: LogDensityFn
    upper_bound: float | None = None


@dataclass(frozen=True)
class ModelStep:
    """The (proposal, kernel, potential) triple for one time step."""

    proposal: DensityKernel
    kernel: DensityKernel
    potential: Potential


# Optional fast path replacing the generic mixture-ratio weight formula.
# Signature: (prev_positions, prev_weights, new_positions, step) -> log weights.
WeightOverrideFn = Callable[[np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class MarginalModel:
    """Immutable bundle defining one target sequence.

    Attributes
    ----------
    steps : tuple of ModelStep
        One triple per time index 0..horizon.
    dim : int
        State dimension.  The exact oracles require ``dim == 1``.
    potential_ignores_prev : bool
        True when every ``u_n(x', x)`` is constant in ``x'``; enables an
        algebraic shortcut in the mixture weights.
    proposal_ignores_prev : bool
        True when every proposal density is constant in ``x'``; the
        proposal mixture then collapses to a single density.
    marginal_weight_override : callable, optional
        Replaces the generic mixture-ratio weight computation, for models
        whose kernels contain an intractable simulator density that
        cancels analytically.
    """

    steps: tuple[ModelStep, ...]
    dim: int = 1
    potential_ignores_prev: bool = False
    proposal_ignores_prev: bool = False
    marginal_weight_override: WeightOverrideFn | None = None

    def __post_init__(self):
        if len(self.steps) == 0:
            raise ValueError("a model needs at least the time-0 step")
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def horizon(self) -> int:
        return len(self.steps) - 1

    def step(self, n: int) -> ModelStep:
        if not 0 <= n <= self.horizon:
            raise IndexError(f"step {n} outside horizon {self.horizon}")
        return self.steps[n]


@dataclass
class ParticleCloud:
    """N particle positions with log-weights; single-owner mutable state."""

    positions: np.ndarray
    log_weights: np.ndarray
    step_index: int = 0
    cumulative_log_z: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.positions.ndim != 2:
            raise ValueError("positions must have shape (N, dim)")
        if self.log_weights.shape != (self.positions.shape[0],):
            raise ValueError("log_weights must have shape (N,)")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def normalized_weights(self) -> np.ndarray:
        weights, _ = normalize_log_weights(self.log_weights)
        return weights

    @classmethod
    def uniform(cls, positions: np.ndarray, step_index: int = 0,
                cumulative_log_z: float = 0.0) -> "ParticleCloud":
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[0]
        return cls(positions, np.full(n, -np.log(n)), step_index, cumulative_log_z)


@dataclass
class StepRecord:
    """Per-step diagnostics and estimates of one filter run."""

    step: int
    estimates_pre: dict[str, float]
    estimates_post: dict[str, float]
    ess: float
    log_increment: float
    cumulative_log_z: float
    wall_time: float
    estimates_inferential: dict[str, float] = field(default_factory=dict)
    combined_weight_relvar: float | None = None


@dataclass
class FilterTrace:
    """The full record of a filter run, one :class:`StepRecord` per step."""

    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def cumulative_log_z(self) -> float:
        if not self.records:
            raise ValueError("empty trace")
        return self.records[-1].cumulative_log_z

    def series(self, which: str, name: str) -> np.ndarray:
        """Column of estimates: which in {'pre', 'post', 'inferential'}."""
        key = f"estimates_{which}"
        return np.array([getattr(r, key)[name] for r in self.records])


def weighted_estimate(cloud: ParticleCloud, phi: Callable[[np.ndarray], np.ndarray]) -> float:
    """Self-normalised estimate sum_i W_i phi(X_i)."""
    weights = cloud.normalized_weights()
    values = np.asarray(phi(cloud.positions), dtype=float)
    if values.shape != (cloud.n_particles,):
        raise ValueError("phi must map (N, dim) positions to (N,) values")
    return float(np.dot(weights, values))


# ---------------------------------------------------------------------------
# Test-function catalogue (first state coordinate for multivariate states).

def _phi_one(x: np.ndarray) -> np.ndarray:
    return np.ones(x.shape[0])


def _phi_identity(x: np.ndarray) -> np.ndarray:
    return x[:, 0]


def _phi_square(x: np.ndarray) -> np.ndarray:
    return x[:, 0] ** 2


def _phi_indicator(x: np.ndarray) -> np.ndarray:
    # smoothed indicator of {x > 1/2}, bounded in (0, 1)
    return 1.0 / (1.0 + np.exp(-(x[:, 0] - 0.5) / 0.25))


_TEST_FUNCTIONS = {
    "one": _phi_one,
    "identity": _phi_identity,
    "square": _phi_square,
    "indicator": _phi_indicator,
}

TEST_FUNCTION_NAMES = tuple(_TEST_FUNCTIONS)


def test_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return _TEST_FUNCTIONS[name]
    except KeyError:
        raise KeyError(
            f"unknown test function {name!r}; choose from {TEST_FUNCTION_NAMES}"
        ) from None


test_function.__test__ = False  # the name means phi, not a pytest case


# ---------------------------------------------------------------------------
# Model validation (report-only; 1-D models)

@dataclass
class CheckResult:
    name: str
    step: int
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok  " if c.passed else "FAIL"
            lines.append(f"[{status}] step {c.step:2d} {c.name}: worst={c.worst:.3e} {c.detail}")
        return "\n".join(lines)


def _probe_prev_states(grid: Grid1D) -> np.ndarray:
    qs = np.quantile(grid.points, [0.25, 0.5, 0.75])
    return qs.reshape(-1, 1)


def validate_model(model: MarginalModel, grid: Grid1D,
                   stream: SeededStream | None = None,
                   n_samples: int = 256) -> ValidationReport:
    """Spot-check a 1-D model against its structural assumptions.

    Checks, per step: kernel and proposal rows integrate to one on the
    grid; the weight ingredients u_n * k_n / m_n are positive and finite
    at positions sampled from the proposal; the density ratio k_n / m_n
    stays finite at positions sampled from the kernel; and the declared
    potential bound holds where one is declared.  Report-only.
    """
    if model.dim != 1:
        raise ValueError("validate_model requires a 1-D state space")
    if stream is None:
        stream = SeededStream(seed=314159)
    report = ValidationReport()
    xs = grid.points.reshape(-1, 1)
    prev_probes = _probe_prev_states(grid)

    for n in range(model.horizon + 1):
        step = model.step(n)
        # normalisation of kernel and proposal rows
        for label, kern in (("kernel", step.kernel), ("proposal", step.proposal)):
            worst = 0.0
            for xp in prev_probes:
                xp_row = np.broadcast_to(xp, (len(grid), 1))
                dens = np.exp(kern.log_density(xp_row, xs))
                worst = max(worst, abs(trapezoid_integrate(dens, grid) - 1.0))
            report.checks.append(CheckResult(
                f"{label}-normalization", n, worst < 1e-6, worst,
                "mass on grid vs 1"))

        # positivity of u * k / m where the proposal puts mass
        xp_rep = np.repeat(prev_probes, n_samples // len(prev_probes) + 1, axis=0)[:n_samples]
        drawn = step.proposal.sample(stream.child("validate", n), xp_rep)
        log_u = np.asarray(step.potential.log_u(xp_rep, drawn), dtype=float)
        log_k = np.asarray(step.kernel.log_density(xp_rep, drawn), dtype=float)
        log_m = np.asarray(step.proposal.log_density(xp_rep, drawn), dtype=float)
        log_ratio = log_u + log_k - log_m
        n_bad = int(np.sum(~np.isfinite(log_ratio) & ~(log_ratio == -np.inf)))
        n_zero = int(np.sum(log_ratio == -np.inf))
        report.checks.append(CheckResult(
            "weight-positivity", n, n_zero == 0 and n_bad == 0,
            float(n_zero + n_bad),
            f"{n_zero} zero-weight and {n_bad} non-finite draws of {n_samples}"))

        # boundedness: k-mass must not escape the proposal's support
        from_kernel = step.kernel.sample(stream.child("validate-k", n), xp_rep)
        log_m_at_k = np.asarray(step.proposal.log_density(xp_rep, from_kernel), dtype=float)
        n_escape = int(np.sum(np.isneginf(log_m_at_k)))
        report.checks.append(CheckResult(
            "density-ratio-bounded", n, n_escape == 0, float(n_escape),
            f"{n_escape} kernel draws of {n_samples} where the proposal density vanishes"))

        # declared potential bound
        if step.potential.upper_bound is not None:
            u_vals = np.exp(np.asarray(step.potential.log_u(xp_rep, drawn), dtype=float))
            worst = float(u_vals.max(initial=0.0))
            bound = step.potential.upper_bound
            report.checks.append(CheckResult(
                "potential-bound", n, worst <= bound * (1.0 + 1e-9), worst,
                f"declared bound {bound:g}"))

        # declared previous-state-free structure (steps past 0; time 0
        # ignores the previous state by convention)
        if n >= 1:
            shifted = xp_rep + 1.5
            if model.potential_ignores_prev:
                gap = _prev_shift_gap(step.potential.log_u, xp_rep, shifted, drawn)
                report.checks.append(CheckResult(
                    "potential-prev-free-tag", n, gap == 0.0, gap,
                    "tagged potentials may not vary with the previous state"))
            if model.proposal_ignores_prev:
                gap = _prev_shift_gap(step.proposal.log_density, xp_rep, shifted, drawn)
                report.checks.append(CheckResult(
                    "proposal-prev-free-tag", n, gap == 0.0, gap,
                    "tagged proposals may not vary with the previous state"))
    return report


def _prev_shift_gap(log_fn, x_prev, x_prev_shifted, x) -> float:
    """Largest change of log_fn under a previous-state shift; 0 when free."""
    a = np.asarray(log_fn(x_prev, x), dtype=float)
    b = np.asarray(log_fn(x_prev_shifted, x), dtype=float)
    both_zero = np.isneginf(a) & np.isneginf(b)
    with np.errstate(invalid="ignore"):
        diff = np.where(both_zero, 0.0, np.abs(a - b))
    if np.any(np.isnan(diff)):
        return float("inf")
    return float(diff.max())
