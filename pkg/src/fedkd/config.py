"""Experiment configuration: flat ``key = value`` files plus environment overrides.

Every key has a default (the desk-scale setting), unknown keys are rejected,
and ``FEDKD_<KEY>`` environment variables override file values, e.g.
``FEDKD_ROUNDS=3``. Lines starting with ``#`` or ``;`` are comments.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields, replace
from importlib import resources

from . import nn
from .baselines import ALGORITHMS, DEFAULT_MU, BaselineConfig
from .exceptions import ConfigError
from .protocol import RoundConfig

ENV_PREFIX = "FEDKD_"
PARTITIONS = ("iid", "dirichlet")
# keys that do not change what an experiment computes, only where/which replicate
_UNHASHED = ("seed", "out")


@dataclass(frozen=True)
class ExperimentConfig:
    """All run settings.

    Protocol: ``rounds``, ``n_clients``, ``participation``, ``e1``/``e2``
    (minibatch steps per round on the public set / private shard),
    ``lr1``/``lr2``, ``lam`` (distillation weight), ``batch_size`` (0 means
    full batch), ``optimizer`` (adam or sgd), ``public_ce``.
    Model: ``architecture`` (compact or full), ``shared_layers``
    (comma-separated names), ``heterogeneous`` (odd clients use the wider
    variant; only the hybrid protocol and FedMD accept this).
    Data: generated from ``n_train``/``hotspot_rate``/``n_test``/
    ``test_hotspot_rate`` unless ``data_dir`` holds public.lhd, private.lhd
    and test.lhd; ``public_fraction`` of the training pool becomes the public
    set; ``partition`` is iid or dirichlet with concentration ``alpha``.
    Diagnostics: ``diag_pairs`` sampled pairs over ``diag_samples`` clips.
    """

    algorithm: str = "fedkd-hybrid"
    seed: int = 0
    out: str = "out"
    rounds: int = 10
    n_clients: int = 8
    participation: float = 1.0
    e1: int = 20
    e2: int = 10
    lr1: float = 1e-3
    lr2: float = 1e-3
    lam: float = 0.5
    batch_size: int = 64
    optimizer: str = "adam"
    public_ce: bool = True
    mu: float = DEFAULT_MU
    architecture: str = "compact"
    shared_layers: str = "Conv1,FC2,FC3"
    heterogeneous: bool = False
    data_dir: str = ""
    n_train: int = 2000
    hotspot_rate: float = 0.0658
    n_test: int = 4000
    test_hotspot_rate: float = 0.018
    public_fraction: float = 0.5
    partition: str = "dirichlet"
    alpha: float = 0.5
    check_invariants: bool = False
    diag_pairs: int = 2
    diag_samples: int = 64

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}; got {self.algorithm!r}")
        if self.optimizer not in (nn.ADAM, nn.SGD):
            raise ConfigError(f"optimizer must be adam or sgd; got {self.optimizer!r}")
        if self.architecture not in nn.ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {sorted(nn.ARCHITECTURES)}; got {self.architecture!r}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition must be iid or dirichlet; got {self.partition!r}")
        if self.partition == "dirichlet" and self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if not 0.0 < self.public_fraction < 1.0:
            raise ConfigError("public_fraction must lie strictly between 0 and 1")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0 (0 = full batch)")
        if self.diag_pairs < 2 or self.diag_samples < 1:
            raise ConfigError("diag_pairs must be >= 2 and diag_samples >= 1")
        try:
            self.round_config()
            self.baseline_config()
            nn.ARCHITECTURES[self.architecture](self.shared)
        except (ValueError, ConfigError) as e:
            raise ConfigError(str(e)) from None

    @property
    def shared(self):
        return frozenset(s.strip() for s in self.shared_layers.split(",") if s.strip())

    def round_config(self, **overrides):
        kw = dict(rounds=self.rounds, n_clients=self.n_clients, participation=self.participation,
                  e1=self.e1, e2=self.e2, lr1=self.lr1, lr2=self.lr2, lam=self.lam,
                  batch_size=self.batch_size or None, optimizer=self.optimizer, seed=self.seed,
                  public_ce=self.public_ce, check_invariants=self.check_invariants)
        kw.update(overrides)
        return RoundConfig(**kw)

    def baseline_config(self):
        return BaselineConfig(self.algorithm, self.mu)

    def canonical_text(self, include_all=False):
        """One ``key = value`` line per field, sorted by key, values in canonical form."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in _UNHASHED and not include_all:
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self):
        """SHA-256 of the canonical text without ``seed`` and ``out``.

        Runs that differ only by seed share a hash, which is how ``compare``
        groups replicates.
        """
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def with_overrides(self, **kw):
        try:
            return replace(self, **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name, raw, typ):
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {typ})") from None


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config(text, source="<string>"):
    """Parse ``key = value`` text into a dict of typed values."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {' '.join(str(e).split())}") from None
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in _TYPES:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _convert(key, raw, _TYPES[key])
    return values


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r} from environment variable {name}")
        values[key] = _convert(key, raw, _TYPES[key])
    return values


def load_config(path=None, environ=None, **overrides):
    """Defaults, then the file at ``path``, then ``FEDKD_*`` variables, then ``overrides``."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        values.update(parse_config(text, str(path)))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return ExperimentConfig(**values)


def builtin_config(name):
    """Text of a shipped config (``desk`` or ``full``)."""
    try:
        return resources.files("fedkd.configs").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no built-in config named {name!r}") from None


def builtin_path(name):
    return resources.files("fedkd.configs").joinpath(f"{name}.cfg")
