"""Simulation configuration: a flat dataclass stored as sectioned key=value text."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, fields

from .baselines import METHODS
from .errors import ConfigError
from .learner import Architecture, Hyperparams
from .partition import SynthSpec
from .protocol import MODES, ProtocolParams
from .worldsim import WorldConfig

SCHEMES = ("iid", "dirichlet", "shards")


@dataclass(frozen=True)
class SimConfig:
    # [world]
    n_areas: int = 2
    side: float = 30.0
    void_frac: float = 0.25
    step_length: float = 1.0
    comm_radius_mobile: float = 3.0
    # [data]
    scheme: str = "dirichlet"
    alpha: float = 0.1
    n_superclasses: int = 2
    n_subclasses: int = 5
    samples_per_subclass: int = 500
    n_features: int = 8
    sigma: float = 0.4
    pitch: float = 1.0
    test_frac: float = 0.2
    n_local: int = 40
    n_general: int = 40
    # [learner]
    arch: str = "logistic"
    hidden: int = 32
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 1
    l2: float = 0.0
    pretrain_patience: int = 3
    pretrain_cap: int = 200
    # [protocol]
    fresh_alpha: float = 0.5
    fresh_beta: float = 1.0
    window: int = 20
    transfer_steps: int = 3
    train_steps: int = 1
    delay_d: int = 0
    # [sim]
    method: str = "mlmule"
    mode: str = "fixed_training"
    n_mules: int = 20
    p_cross: float = 0.1
    total_steps: int = 5000
    eval_every: int = 100
    exchanges_per_round: int = 20
    patience_rounds: int = 10
    seed: int = 0
    trace: str = ""
    trace_users: int = 60
    trace_visits: float = 6.0
    trace_dwell: float = 25.0
    trace_lifetime: float = 0.35

    def __post_init__(self):
        validate(self)

    # --- views used by the other modules ---------------------------------

    def world_config(self) -> WorldConfig:
        return WorldConfig(self.n_areas, self.side, self.void_frac, self.step_length,
                           self.comm_radius_mobile, self.seed)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.n_superclasses, self.n_subclasses, self.samples_per_subclass,
                         self.n_features, self.sigma, self.pitch)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.batch_size, self.epochs, self.l2)

    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(self.fresh_alpha, self.fresh_beta, self.window, self.transfer_steps,
                              self.train_steps, self.delay_d)

    def architecture(self) -> Architecture:
        k = self.n_superclasses * self.n_subclasses
        return Architecture(self.arch, self.n_features, k, self.hidden if self.arch == "mlp" else 0)

    @property
    def mobility_label(self) -> str:
        return "trace" if self.trace else repr(float(self.p_cross))

    def with_overrides(self, **kw) -> SimConfig:
        return dataclasses.replace(self, **kw)


SECTIONS = {
    "world": ("n_areas", "side", "void_frac", "step_length", "comm_radius_mobile"),
    "data": ("scheme", "alpha", "n_superclasses", "n_subclasses", "samples_per_subclass", "n_features",
             "sigma", "pitch", "test_frac", "n_local", "n_general"),
    "learner": ("arch", "hidden", "learning_rate", "batch_size", "epochs", "l2", "pretrain_patience",
                "pretrain_cap"),
    "protocol": ("fresh_alpha", "fresh_beta", "window", "transfer_steps", "train_steps", "delay_d"),
    "sim": ("method", "mode", "n_mules", "p_cross", "total_steps", "eval_every", "exchanges_per_round",
            "patience_rounds", "seed", "trace", "trace_users", "trace_visits", "trace_dwell",
            "trace_lifetime"),
}
_TYPES = {f.name: f.type for f in fields(SimConfig)}
assert sorted(k for ks in SECTIONS.values() for k in ks) == sorted(_TYPES)


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}", key=key)


def validate(c: SimConfig) -> None:
    for name in ("n_areas", "n_superclasses", "n_subclasses", "samples_per_subclass", "batch_size",
                 "n_mules", "total_steps", "eval_every", "exchanges_per_round", "patience_rounds",
                 "window", "transfer_steps", "pretrain_patience", "pretrain_cap"):
        _check(getattr(c, name) >= 1, name, "must be >= 1")
    for name in ("epochs", "train_steps", "delay_d", "n_local", "n_general", "seed", "trace_users"):
        _check(getattr(c, name) >= 0, name, "must be >= 0")
    for name in ("p_cross", "fresh_alpha"):
        _check(0.0 <= getattr(c, name) <= 1.0, name, "must lie in [0, 1]")
    _check(c.side > 0, "side", "must be positive")
    _check(0.0 <= c.void_frac < 1.0, "void_frac", "must lie in [0, 1)")
    _check(c.step_length > 0, "step_length", "must be positive")
    _check(c.comm_radius_mobile >= 0, "comm_radius_mobile", "must be non-negative")
    _check(c.scheme in SCHEMES, "scheme", f"must be one of {SCHEMES}")
    _check(c.alpha > 0, "alpha", "must be positive")
    _check(c.n_features >= 2, "n_features", "must be >= 2")
    _check(c.sigma > 0, "sigma", "must be positive")
    _check(0.0 < c.test_frac < 1.0, "test_frac", "must lie in (0, 1)")
    _check(c.arch in ("logistic", "mlp"), "arch", "must be logistic or mlp")
    _check(c.hidden >= 1, "hidden", "must be >= 1")
    _check(c.learning_rate > 0, "learning_rate", "must be positive")
    _check(c.l2 >= 0, "l2", "must be non-negative")
    _check(c.fresh_beta >= 0, "fresh_beta", "must be non-negative")
    _check(c.method in METHODS, "method", f"must be one of {METHODS}")
    _check(c.mode in MODES, "mode", f"must be one of {MODES}")
    if c.mode == "mobile_training":
        _check(c.scheme == "shards", "scheme", "mobile_training needs the shards partition")
    if c.method in ("gossip", "oppcl"):
        _check(c.mode == "mobile_training", "method", f"{c.method} runs only in mobile_training mode")
    if c.trace:
        _check(c.method in ("mlmule", "fedavg", "local"), "method",
               "trace replay has no positions, so device-to-device methods are unavailable")


def _convert(key: str, raw: str):
    typ = _TYPES[key]
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}", key=key) from None


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, raw = item.split("=", 1)
        key = key.strip().split(".")[-1]
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        out[key] = _convert(key, raw)
    return out


def loads(text: str, overrides=None) -> SimConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", key=section)
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", key=key)
            values[key] = _convert(key, raw)
    values.update(parse_overrides(overrides))
    return SimConfig(**values)


def load(path, overrides=None) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), overrides)


def dumps(c: SimConfig) -> str:
    buf = io.StringIO()
    for section, keys in SECTIONS.items():
        buf.write(f"[{section}]\n")
        for key in keys:
            v = getattr(c, key)
            buf.write(f"{key} = {v!r}\n" if isinstance(v, float) else f"{key} = {v}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(c: SimConfig, exclude=("seed",)) -> str:
    """Digest of the canonical form; key order in the source file is irrelevant."""
    canon = "\n".join(f"{k}={getattr(c, k)!r}" for k in sorted(_TYPES) if k not in exclude)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
