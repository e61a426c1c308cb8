"""Named filter constructions and their model presets.

Every algorithm here is one choice of (proposal, kernel, potential)
triples plugged into the shared engine:

* marginal particle filter: kernel = state transition, potential = the
  observation likelihood, proposal free;
* bootstrap filter: the marginal filter with proposal = transition;
* independent filter: proposal depends on the current observation only;
* auxiliary marginal filter: the potential carries a predictive
  likelihood twist, undone afterwards with inferential weights;
* likelihood-free posterior sampler: state = (parameter, pseudo-data),
  with the simulator density cancelled analytically in the weights.

All presets fix Lebesgue measure as the dominating measure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .engine import mixture_log_density
from .errors import ConfigError
from .model import (
    DensityKernel,
    MarginalModel,
    ModelStep,
    Potential,
    unavailable_log_density,
)
from .oracles import gaussian_logpdf
from .streams import SeededStream

__all__ = [
    "LinearGaussianSSM",
    "simulate_lgssm",
    "fixture_lgssm",
    "AuxApprox",
    "AbcProblem",
    "make_mpf",
    "make_bpf",
    "make_ipf",
    "make_mapf",
    "make_abc",
    "proposal_kernels",
    "aux_approx",
    "build_filter_model",
    "gaussian_abc_toy",
    "abc_gaussian_posterior",
    "FILTER_KINDS",
    "PROPOSAL_KINDS",
]

FILTER_KINDS = ("mpf", "bpf", "ipf", "mapf")
PROPOSAL_KINDS = ("bootstrap", "locally_optimal", "prior_scaled", "observation")


@dataclass(frozen=True)
class LinearGaussianSSM:
    """Scalar linear-Gaussian state-space model.

    State: x_0 ~ N(m0, s0^2), x_n = a x_{n-1} + N(0, sigma_x^2).
    Observations y_n = c x_n + N(0, sigma_y^2) for n = 1..T; time 0
    carries no observation.
    """

    a: float
    sigma_x: float
    c: float
    sigma_y: float
    m0: float
    s0: float
    ys: tuple[float, ...]

    def __post_init__(self):
        if min(self.sigma_x, self.sigma_y, self.s0) <= 0:
            raise ValueError("sigma_x, sigma_y and s0 must be positive")
        object.__setattr__(self, "ys", tuple(float(y) for y in self.ys))

    @property
    def horizon(self) -> int:
        return len(self.ys)

    def truncated(self, horizon: int) -> "LinearGaussianSSM":
        if not 0 <= horizon <= self.horizon:
            raise ValueError("truncation horizon out of range")
        return replace(self, ys=self.ys[:horizon])

    def predictive_likelihood_params(self, x_prev: np.ndarray):
        """Mean and variance of y_n given x_{n-1} (exact one-step predictive)."""
        mean = self.c * self.a * np.asarray(x_prev)
        var = self.c**2 * self.sigma_x**2 + self.sigma_y**2
        return mean, var


def simulate_lgssm(a, sigma_x, c, sigma_y, m0, s0, horizon, stream: SeededStream):
    """Draw one latent path x_0..x_T and observations y_1..y_T."""
    gen = stream.generator()
    xs = np.empty(horizon + 1)
    xs[0] = m0 + s0 * gen.standard_normal()
    for n in range(1, horizon + 1):
        xs[n] = a * xs[n - 1] + sigma_x * gen.standard_normal()
    ys = c * xs[1:] + sigma_y * gen.standard_normal(horizon)
    return xs, ys


# Canonical desk-scale fixture: observations drawn once via
# simulate_lgssm(0.9, 1, 1, 1, 0, 1, 10, SeededStream(424243).child("fixture"))
# and frozen here so every acceptance number is reproducible.
_FIXTURE_YS = (
    0.5024539192471633,
    1.2508256304184675,
    0.2538007229162739,
    0.7448509266197726,
    5.337255342425359,
    4.121268300360355,
    3.4144251997045085,
    5.071040303187082,
    4.429715014562377,
    6.410719832048936,
)


def fixture_lgssm() -> LinearGaussianSSM:
    """The canonical a=0.9, unit-noise model with T=10 frozen observations."""
    return LinearGaussianSSM(a=0.9, sigma_x=1.0, c=1.0, sigma_y=1.0,
                             m0=0.0, s0=1.0, ys=_FIXTURE_YS)


# ---------------------------------------------------------------------------
# Gaussian kernel builders


def _gaussian_kernel(mean_fn: Callable[[np.ndarray], np.ndarray], var: float) -> DensityKernel:
    sd = float(np.sqrt(var))
    log_norm_terms = float(np.log(2.0 * np.pi)) + float(np.log(var))

    def log_density(x_prev, x):
        return gaussian_logpdf(x[..., 0], mean_fn(x_prev[..., 0]), var)

    def sampler(stream: SeededStream, x_prev):
        gen = stream.generator()
        noise = gen.standard_normal(x_prev.shape[0])
        mean = np.broadcast_to(mean_fn(x_prev[:, 0]), (x_prev.shape[0],))
        return (mean + sd * noise)[:, None]

    def pairwise_log_density(centers, queries):
        # allocation-lean (queries, centers) matrix for the hot mixture
        # loop; the operation order mirrors gaussian_logpdf bit for bit
        mean = np.asarray(mean_fn(centers[:, 0]), dtype=float)
        out = np.subtract(queries[:, 0][:, None], mean[None, :])
        np.multiply(out, out, out=out)
        out /= var
        out += log_norm_terms
        out *= -0.5
        return out

    return DensityKernel(log_density, sampler, pairwise_log_density)


def _initial_kernel(mean: float, var: float) -> DensityKernel:
    return _gaussian_kernel(lambda xp: np.full_like(xp, mean, dtype=float), var)


def _transition_kernel(ssm: LinearGaussianSSM) -> DensityKernel:
    return _gaussian_kernel(lambda xp: ssm.a * xp, ssm.sigma_x**2)


def _likelihood_potential(ssm: LinearGaussianSSM, y: float) -> Potential:
    var = ssm.sigma_y**2

    def log_u(x_prev, x):
        return gaussian_logpdf(y, ssm.c * x[..., 0], var)

    return Potential(log_u, upper_bound=1.0 / np.sqrt(2 * np.pi * var))


def _unit_potential() -> Potential:
    def log_u(x_prev, x):
        return np.zeros(np.broadcast_shapes(x_prev[..., 0].shape, x[..., 0].shape))

    return Potential(log_u, upper_bound=1.0)


def proposal_kernels(ssm: LinearGaussianSSM, kind: str) -> list[DensityKernel]:
    """Per-step proposal kernels q_0..q_T for a named proposal family.

    ``bootstrap``          q_n = transition (and q_0 = prior);
    ``locally_optimal``    q_n(x | x', y_n) proportional to f * g, the
                           conjugate closed form;
    ``prior_scaled:k``     transition with standard deviation inflated by
                           k (useful to make weight noise, hence finite-N
                           bias, visible in rate studies);
    ``observation``        q_n built from y_n alone (previous-state free).
    Time 0 has no observation, so every family proposes from the prior
    there (scaled for ``prior_scaled``).
    """
    name, _, arg = kind.partition(":")
    if name not in PROPOSAL_KINDS:
        raise ConfigError(f"unknown proposal kind {kind!r}")
    kernels: list[DensityKernel] = []
    if name == "bootstrap":
        kernels.append(_initial_kernel(ssm.m0, ssm.s0**2))
        for _ in range(ssm.horizon):
            kernels.append(_transition_kernel(ssm))
    elif name == "locally_optimal":
        kernels.append(_initial_kernel(ssm.m0, ssm.s0**2))
        qx, ry = ssm.sigma_x**2, ssm.sigma_y**2
        post_var = qx * ry / (ry + ssm.c**2 * qx)
        for y in ssm.ys:
            def mean_fn(xp, y=y):
                return post_var * (ssm.a * xp / qx + ssm.c * y / ry)
            kernels.append(_gaussian_kernel(mean_fn, post_var))
    elif name == "prior_scaled":
        scale = float(arg) if arg else 2.0
        if scale <= 0:
            raise ConfigError("prior_scaled needs a positive scale")
        kernels.append(_initial_kernel(ssm.m0, (scale * ssm.s0) ** 2))
        for _ in range(ssm.horizon):
            kernels.append(_gaussian_kernel(lambda xp: ssm.a * xp,
                                            (scale * ssm.sigma_x) ** 2))
    elif name == "observation":
        kernels.append(_initial_kernel(ssm.m0, ssm.s0**2))
        var = ssm.sigma_y**2 / ssm.c**2 + ssm.sigma_x**2
        for y in ssm.ys:
            kernels.append(_initial_kernel(y / ssm.c, var))
    return kernels


# ---------------------------------------------------------------------------
# Filter constructors


def make_mpf(ssm: LinearGaussianSSM, proposals: list[DensityKernel] | str = "locally_optimal") -> MarginalModel:
    """Marginal particle filter targeting the filtering distributions."""
    if isinstance(proposals, str):
        proposals = proposal_kernels(ssm, proposals)
    if len(proposals) != ssm.horizon + 1:
        raise ValueError("need one proposal kernel per step 0..T")
    steps = [ModelStep(proposals[0], _initial_kernel(ssm.m0, ssm.s0**2), _unit_potential())]
    for n, y in enumerate(ssm.ys, start=1):
        steps.append(ModelStep(proposals[n], _transition_kernel(ssm),
                               _likelihood_potential(ssm, y)))
    return MarginalModel(tuple(steps), dim=1, potential_ignores_prev=True)


def make_bpf(ssm: LinearGaussianSSM) -> MarginalModel:
    """Bootstrap filter: the marginal filter with proposal = transition."""
    return make_mpf(ssm, proposal_kernels(ssm, "bootstrap"))


def make_ipf(ssm: LinearGaussianSSM,
             observation_proposals: list[DensityKernel] | None = None) -> MarginalModel:
    """Independent filter: proposals read the observation, not the past.

    The proposal mixture then collapses to a single density, which the
    engine exploits.
    """
    if observation_proposals is None:
        observation_proposals = proposal_kernels(ssm, "observation")
    model = make_mpf(ssm, observation_proposals)
    return replace(model, proposal_ignores_prev=True)


@dataclass(frozen=True)
class AuxApprox:
    """A predictive-likelihood approximation p~(y_next | x).

    ``log_p_tilde(y_next, x)`` must be finite wherever particles land;
    any positive approximation is accepted, exact or not.  ``is_unit``
    marks the trivial approximation p~ = 1, whose twist cancels
    identically; constructors then drop it instead of multiplying and
    dividing by one.
    """

    log_p_tilde: Callable[[float, np.ndarray], np.ndarray]
    is_unit: bool = False


def aux_approx(ssm: LinearGaussianSSM, kind: str) -> AuxApprox:
    """Named predictive approximations: ``exact``, ``unit``, ``inflated:k``."""
    name, _, arg = kind.partition(":")
    if name == "exact":
        var = ssm.c**2 * ssm.sigma_x**2 + ssm.sigma_y**2

        def log_p(y, x):
            return gaussian_logpdf(y, ssm.c * ssm.a * x, var)
    elif name == "unit":
        def log_p(y, x):
            return np.zeros_like(np.asarray(x, dtype=float))

        return AuxApprox(log_p, is_unit=True)
    elif name == "inflated":
        lam = float(arg) if arg else 2.0
        if lam <= 0:
            raise ConfigError("inflated predictive needs a positive factor")
        var = lam * (ssm.c**2 * ssm.sigma_x**2 + ssm.sigma_y**2)

        def log_p(y, x):
            return gaussian_logpdf(y, ssm.c * ssm.a * x, var)
    else:
        raise ConfigError(f"unknown predictive approximation {kind!r}")
    return AuxApprox(log_p)


def make_mapf(ssm: LinearGaussianSSM,
              proposals: list[DensityKernel] | str = "locally_optimal",
              aux: AuxApprox | str = "exact"):
    """Auxiliary marginal filter plus its inferential correction.

    The engine targets the twisted sequence proportional to
    p~(y_{n+1} | x_n) p(x_n | y_{1:n}); the returned correction
    ``inferential_log_weight(n, positions)`` removes the twist so that
    corrected estimates target the filtering distribution itself.  The
    final step has no next observation and carries no twist.
    """
    if isinstance(proposals, str):
        proposals = proposal_kernels(ssm, proposals)
    if isinstance(aux, str):
        aux = aux_approx(ssm, aux)
    if len(proposals) != ssm.horizon + 1:
        raise ValueError("need one proposal kernel per step 0..T")
    horizon = ssm.horizon
    ys = ssm.ys

    if aux.is_unit:
        # the twist cancels identically: this *is* the plain marginal
        # filter, with a constant correction
        model = make_mpf(ssm, proposals)

        def unit_log_weight(n: int, positions: np.ndarray) -> np.ndarray:
            return np.zeros(positions.shape[0])

        return model, unit_log_weight

    def twisted_potential(n: int) -> Potential:
        if n == 0:
            if horizon == 0:
                return _unit_potential()

            def log_u0(x_prev, x):
                return aux.log_p_tilde(ys[0], x[..., 0])

            return Potential(log_u0)

        y_now = ys[n - 1]
        var_y = ssm.sigma_y**2

        if n < horizon:
            y_next = ys[n]

            def log_u(x_prev, x, y_now=y_now, y_next=y_next):
                return (gaussian_logpdf(y_now, ssm.c * x[..., 0], var_y)
                        + aux.log_p_tilde(y_next, x[..., 0])
                        - aux.log_p_tilde(y_now, x_prev[..., 0]))
        else:
            def log_u(x_prev, x, y_now=y_now):
                return (gaussian_logpdf(y_now, ssm.c * x[..., 0], var_y)
                        - aux.log_p_tilde(y_now, x_prev[..., 0]))

        return Potential(log_u)

    steps = [ModelStep(proposals[0], _initial_kernel(ssm.m0, ssm.s0**2),
                       twisted_potential(0))]
    for n in range(1, horizon + 1):
        steps.append(ModelStep(proposals[n], _transition_kernel(ssm),
                               twisted_potential(n)))
    model = MarginalModel(tuple(steps), dim=1)

    def inferential_log_weight(n: int, positions: np.ndarray) -> np.ndarray:
        if n >= horizon:
            return np.zeros(positions.shape[0])
        return -np.asarray(aux.log_p_tilde(ys[n], positions[:, 0]), dtype=float)

    return model, inferential_log_weight


# ---------------------------------------------------------------------------
# Likelihood-free posterior sampling


@dataclass(frozen=True)
class AbcProblem:
    """A likelihood-free inference problem over (parameter, pseudo-data).

    The simulator is available only as a sampler; its density never
    enters any computation.  ``log_distance_kernel(eps, y)`` scores how
    close simulated data is to the observed data at tolerance ``eps``.
    """

    log_prior: Callable[[np.ndarray], np.ndarray]
    prior_sampler: Callable[[SeededStream, int], np.ndarray]
    simulator: Callable[[SeededStream, np.ndarray], np.ndarray]
    log_distance_kernel: Callable[[float, np.ndarray], np.ndarray]
    proposal_log_density: Callable[[np.ndarray, np.ndarray], np.ndarray]
    proposal_sampler: Callable[[SeededStream, np.ndarray], np.ndarray]
    epsilons: tuple[float, ...]
    y_obs: float

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if len(eps) == 0:
            raise ValueError("the tolerance schedule must be nonempty")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("the tolerance schedule must be strictly decreasing")
        object.__setattr__(self, "epsilons", eps)


def make_abc(problem: AbcProblem) -> MarginalModel:
    """Tolerance-ladder posterior sampler as a marginal-weight model.

    State is (theta, y).  The generic mixture weight would require the
    simulator density, which cancels between the update numerator and
    the proposal mixture; the cancelled form

        log w = log kernel_eps(y) + log prior(theta)
                - log sum_j W_j q(theta | theta_j)

    is installed as the model's weight override, and the kernels carry
    density stubs that refuse evaluation.
    """

    def refresh_sampler(stream: SeededStream, x_prev: np.ndarray) -> np.ndarray:
        theta = problem.prior_sampler(stream.child("theta"), x_prev.shape[0])
        y = problem.simulator(stream.child("sim"), theta)
        return np.column_stack([theta, y])

    def move_sampler(stream: SeededStream, x_prev: np.ndarray) -> np.ndarray:
        theta = problem.proposal_sampler(stream.child("theta"), x_prev[:, 0])
        y = problem.simulator(stream.child("sim"), theta)
        return np.column_stack([theta, y])

    refresh = DensityKernel(unavailable_log_density("prior x simulator"), refresh_sampler)
    move = DensityKernel(unavailable_log_density("proposal x simulator"), move_sampler)

    def potential(eps: float) -> Potential:
        def log_u(x_prev, x):
            return problem.log_distance_kernel(eps, x[..., 1])

        return Potential(log_u)

    steps = [ModelStep(refresh, refresh, potential(problem.epsilons[0]))]
    for eps in problem.epsilons[1:]:
        steps.append(ModelStep(move, refresh, potential(eps)))

    def weight_override(prev_positions, prev_log_weights, new_positions, n):
        eps = problem.epsilons[n]
        theta, y = new_positions[:, 0], new_positions[:, 1]
        log_kernel = np.asarray(problem.log_distance_kernel(eps, y), dtype=float)
        if n == 0:
            return log_kernel

        def component(xp, x):
            return problem.proposal_log_density(xp[..., 0], x[..., 0])

        log_mix = mixture_log_density(np.exp(prev_log_weights), component,
                                      prev_positions, new_positions)
        return log_kernel + np.asarray(problem.log_prior(theta), dtype=float) - log_mix

    return MarginalModel(tuple(steps), dim=2, potential_ignores_prev=True,
                         marginal_weight_override=weight_override)


def gaussian_abc_toy(y_obs: float = 1.0,
                     epsilons: tuple[float, ...] | None = None,
                     proposal_std: float = 1.0) -> AbcProblem:
    """Conjugate toy: theta ~ N(0,1), y | theta ~ N(theta, 1), Gaussian kernel.

    The pseudo-posterior at tolerance eps is available in closed form
    (see :func:`abc_gaussian_posterior`), which makes this the one
    likelihood-free problem whose answers can be checked exactly.
    """
    if epsilons is None:
        epsilons = tuple(2.0 * 0.75**n for n in range(10))
    tau2 = proposal_std**2

    return AbcProblem(
        log_prior=lambda theta: gaussian_logpdf(theta, 0.0, 1.0),
        prior_sampler=lambda stream, n: stream.generator().standard_normal(n),
        simulator=lambda stream, theta: theta + stream.generator().standard_normal(theta.shape[0]),
        log_distance_kernel=lambda eps, y: gaussian_logpdf(y_obs, y, eps**2),
        proposal_log_density=lambda tp, t: gaussian_logpdf(t, tp, tau2),
        proposal_sampler=lambda stream, tp: tp + proposal_std * stream.generator().standard_normal(tp.shape[0]),
        epsilons=epsilons,
        y_obs=y_obs,
    )


def abc_gaussian_posterior(y_obs: float, eps: float) -> tuple[float, float]:
    """Mean and variance of the toy pseudo-posterior at tolerance eps."""
    return y_obs / (2.0 + eps**2), (1.0 + eps**2) / (2.0 + eps**2)


# ---------------------------------------------------------------------------
# Factory used by replicate workers and the CLI


def build_filter_model(ssm: LinearGaussianSSM, filter_kind: str,
                       proposal_kind: str, aux_kind: str | None = None):
    """Build (model, inferential_log_weight_or_None) from preset names."""
    if filter_kind == "mpf":
        return make_mpf(ssm, proposal_kind), None
    if filter_kind == "bpf":
        return make_bpf(ssm), None
    if filter_kind == "ipf":
        if proposal_kind.partition(":")[0] != "observation":
            raise ConfigError("the independent filter requires an observation proposal")
        return make_ipf(ssm), None
    if filter_kind == "mapf":
        return make_mapf(ssm, proposal_kind, aux_kind or "exact")
    raise ConfigError(f"unknown filter kind {filter_kind!r}")
