"""Embarrassingly parallel replicate runs with per-replicate streams.

A job names a filter configuration by preset strings (so it pickles
cleanly into worker processes); each replicate rebuilds the model and
runs it under its own substream.  Results are returned in replicate
order and are bit-identical for any worker count, including 1.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineConfig, run_msmc, run_standard_smc
from .errors import ConfigError
from .filters import LinearGaussianSSM, build_filter_model, gaussian_abc_toy, make_abc
from .model import test_function
from .streams import SeededStream

__all__ = ["FilterReplicateJob", "AbcReplicateJob", "run_replicates"]

ESTIMATORS = ("pre", "post", "inferential", "logz")


@dataclass(frozen=True)
class FilterReplicateJob:
    """One filter run family on a linear-Gaussian model."""

    ssm: LinearGaussianSSM
    algorithm: str = "marginal"        # "marginal" or "standard"
    filter_kind: str = "mpf"
    proposal: str = "locally_optimal"
    aux: str | None = None
    n_particles: int = 256
    chunk_size: int = 512
    phi_names: tuple[str, ...] = ("identity",)
    estimator: str = "pre"
    step: int | None = None            # None = final step

    def __post_init__(self):
        if self.algorithm not in ("marginal", "standard"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "inferential" and self.filter_kind != "mapf":
            raise ConfigError("inferential estimates exist only for mapf")

    def run_one(self, stream: SeededStream) -> np.ndarray:
        model, inferential = build_filter_model(
            self.ssm, self.filter_kind, self.proposal, self.aux)
        cfg = EngineConfig(self.n_particles, chunk_size=self.chunk_size)
        phis = {name: test_function(name) for name in self.phi_names}
        if self.algorithm == "marginal":
            trace = run_msmc(model, cfg, phis, stream,
                             inferential_log_weight=inferential)
        else:
            trace = run_standard_smc(model, cfg, phis, stream)
        record = trace.records[self.step if self.step is not None else -1]
        if self.estimator == "logz":
            return np.array([record.cumulative_log_z])
        values = getattr(record, f"estimates_{self.estimator}")
        return np.array([values[name] for name in self.phi_names])

    @property
    def width(self) -> int:
        return 1 if self.estimator == "logz" else len(self.phi_names)


@dataclass(frozen=True)
class AbcReplicateJob:
    """Replicates of the conjugate likelihood-free toy problem."""

    y_obs: float = 1.0
    epsilons: tuple[float, ...] = field(
        default_factory=lambda: tuple(2.0 * 0.75**n for n in range(10)))
    proposal_std: float = 1.0
    n_particles: int = 1024
    chunk_size: int = 512

    def run_one(self, stream: SeededStream) -> np.ndarray:
        problem = gaussian_abc_toy(self.y_obs, self.epsilons, self.proposal_std)
        model = make_abc(problem)
        cfg = EngineConfig(self.n_particles, chunk_size=self.chunk_size)
        phis = {"theta": lambda p: p[:, 0], "theta2": lambda p: p[:, 0] ** 2}
        trace = run_msmc(model, cfg, phis, stream)
        rec = trace.records[-1]
        mean = rec.estimates_pre["theta"]
        var = rec.estimates_pre["theta2"] - mean**2
        return np.array([mean, var])

    @property
    def width(self) -> int:
        return 2


def _run_block(job, base_stream: SeededStream, indices, label: str) -> np.ndarray:
    out = np.empty((len(indices), job.width))
    for row, r in enumerate(indices):
        out[row] = job.run_one(base_stream.child(label, int(r)))
    return out


def run_replicates(job, base_stream: SeededStream, n_replicates: int,
                   threads: int = 1, label: str = "replicate") -> np.ndarray:
    """Run ``n_replicates`` independent copies of ``job``.

    Replicate r always uses ``base_stream.child(label, r)``, so results
    do not depend on ``threads``; two jobs given the same base stream
    and label see pairwise-coupled randomness.
    """
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    indices = np.arange(n_replicates)
    if threads <= 1:
        return _run_block(job, base_stream, indices, label)
    blocks = np.array_split(indices, min(threads * 4, n_replicates))
    out = np.empty((n_replicates, job.width))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [(block, pool.submit(_run_block, job, base_stream, block, label))
                   for block in blocks if len(block)]
        for block, fut in futures:
            out[block] = fut.result()
    return out
