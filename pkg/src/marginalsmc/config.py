"""Experiment configuration files and CSV output.

The configuration format is a flat sectioned key/value file (INI).  The
seed and particle counts carry no defaults: runs must be reproducible
from the file alone, never from wall-clock state.  CSV outputs are
comma-separated with 17-significant-digit floats and ``#`` header
comments recording the tool version, the configuration hash and the
effective seed.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .filters import LinearGaussianSSM, fixture_lgssm
from .model import TEST_FUNCTION_NAMES

__all__ = ["ExperimentConfig", "load_config", "write_csv", "format_value"]

EXPERIMENT_KINDS = ("simulate", "filter", "convergence", "variance", "abc",
                    "condexp", "logz")


@dataclass
class ExperimentConfig:
    """Parsed, validated experiment description."""

    kind: str
    seed: int
    out: str
    threads: int = 1
    config_hash: str = "unhashed"

    # model
    model_preset: str = "fixture"
    a: float = 0.9
    sigma_x: float = 1.0
    c: float = 1.0
    sigma_y: float = 1.0
    m0: float = 0.0
    s0: float = 1.0
    horizon: int | None = None
    observations_path: str | None = None

    # filter
    filter_kind: str = "mpf"
    algorithm: str = "marginal"
    proposal: str = "locally_optimal"
    aux: str | None = None
    estimator: str = "pre"

    # run
    n_list: tuple[int, ...] = ()
    replicates: int = 1
    phi: str = "identity"
    grid_points: int = 2001
    chunk_size: int = 512
    step: int | None = None

    # abc
    y_obs: float = 1.0
    epsilon0: float = 2.0
    epsilon_decay: float = 0.75
    stages: int = 10
    proposal_std: float = 1.0

    # condexp
    warmup_steps: int = 2
    check_step: int = 3
    cloud_size: int = 64

    def ssm(self) -> LinearGaussianSSM:
        """Build the linear-Gaussian model this experiment runs on."""
        if self.model_preset == "fixture":
            ssm = fixture_lgssm()
        elif self.model_preset == "custom":
            if self.observations_path is None:
                raise ConfigError("custom models need observations = <csv path>")
            ys = read_observations(self.observations_path)
            ssm = LinearGaussianSSM(self.a, self.sigma_x, self.c, self.sigma_y,
                                    self.m0, self.s0, ys)
        else:
            raise ConfigError(f"unknown model preset {self.model_preset!r}")
        if self.horizon is not None:
            ssm = ssm.truncated(self.horizon)
        return ssm


def _get(parser: configparser.ConfigParser, section: str, key: str,
         cast, required: bool = False, default=None):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    if required:
        raise ConfigError(f"missing required option [{section}] {key}")
    return default


def _parse_int_list(raw: str) -> tuple[int, ...]:
    values = tuple(int(part) for part in raw.replace(",", " ").split())
    if not values or any(v < 1 for v in values):
        raise ValueError("need a nonempty list of positive integers")
    return values


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate one experiment file."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text.decode("utf-8"))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None

    kind = _get(parser, "experiment", "kind", str, required=True)
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; "
                          f"choose from {EXPERIMENT_KINDS}")
    cfg = ExperimentConfig(
        kind=kind,
        seed=_get(parser, "experiment", "seed", int, required=True),
        out=_get(parser, "experiment", "out", str, required=True),
        threads=_get(parser, "experiment", "threads", int, default=1),
        config_hash=hashlib.sha256(text).hexdigest()[:12],
        model_preset=_get(parser, "model", "preset", str, default="fixture"),
        a=_get(parser, "model", "a", float, default=0.9),
        sigma_x=_get(parser, "model", "sigma_x", float, default=1.0),
        c=_get(parser, "model", "c", float, default=1.0),
        sigma_y=_get(parser, "model", "sigma_y", float, default=1.0),
        m0=_get(parser, "model", "m0", float, default=0.0),
        s0=_get(parser, "model", "s0", float, default=1.0),
        horizon=_get(parser, "model", "horizon", int),
        observations_path=_get(parser, "model", "observations", str),
        filter_kind=_get(parser, "filter", "kind", str, default="mpf"),
        algorithm=_get(parser, "filter", "algorithm", str, default="marginal"),
        proposal=_get(parser, "filter", "proposal", str, default="locally_optimal"),
        aux=_get(parser, "filter", "aux", str),
        estimator=_get(parser, "filter", "estimator", str, default="pre"),
        n_list=_get(parser, "run", "n_list", _parse_int_list, default=()),
        replicates=_get(parser, "run", "replicates", int, default=1),
        phi=_get(parser, "run", "phi", str, default="identity"),
        grid_points=_get(parser, "run", "grid_points", int, default=2001),
        chunk_size=_get(parser, "run", "chunk_size", int, default=512),
        step=_get(parser, "run", "step", int),
        y_obs=_get(parser, "abc", "y_obs", float, default=1.0),
        epsilon0=_get(parser, "abc", "epsilon0", float, default=2.0),
        epsilon_decay=_get(parser, "abc", "decay", float, default=0.75),
        stages=_get(parser, "abc", "stages", int, default=10),
        proposal_std=_get(parser, "abc", "proposal_std", float, default=1.0),
        warmup_steps=_get(parser, "condexp", "warmup_steps", int, default=2),
        check_step=_get(parser, "condexp", "check_step", int, default=3),
        cloud_size=_get(parser, "condexp", "cloud_size", int, default=64),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.kind != "simulate" and not cfg.n_list:
        raise ConfigError("missing required option [run] n_list "
                          "(particle counts have no default)")
    if cfg.replicates < 1:
        raise ConfigError("[run] replicates must be >= 1")
    if cfg.threads < 1:
        raise ConfigError("[experiment] threads must be >= 1")
    if cfg.phi not in TEST_FUNCTION_NAMES:
        raise ConfigError(f"[run] phi must be one of {TEST_FUNCTION_NAMES}")
    if cfg.kind == "simulate" and cfg.horizon is None:
        raise ConfigError("simulate needs [model] horizon")
    if cfg.algorithm not in ("marginal", "standard"):
        raise ConfigError("[filter] algorithm must be marginal or standard")
    if cfg.estimator not in ("pre", "post", "inferential"):
        raise ConfigError("[filter] estimator must be pre, post or inferential")
    if not 0.0 < cfg.epsilon_decay < 1.0:
        raise ConfigError("[abc] decay must lie in (0, 1)")
    if cfg.stages < 1:
        raise ConfigError("[abc] stages must be >= 1")


def read_observations(path: str | Path) -> tuple[float, ...]:
    """Read the y column of a simulation CSV (skipping the x0 row)."""
    ys = []
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if "y" not in header:
                    raise ConfigError(f"{path}: no y column")
                continue
            cells = line.split(",")
            y = cells[header.index("y")]
            if y != "":
                ys.append(float(y))
    if not ys:
        raise ConfigError(f"{path}: no observations found")
    return tuple(ys)


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    if value is None:
        return ""
    return str(value)


def write_csv(path: str | Path, comments: list[str], fieldnames: list[str],
              rows: list[dict]) -> None:
    """Write rows with ``#`` header comments and full-precision floats."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise ConfigError(f"output directory {path.parent} does not exist")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        fh.write(",".join(fieldnames) + "\n")
        for row in rows:
            fh.write(",".join(format_value(row.get(name)) for name in fieldnames) + "\n")
