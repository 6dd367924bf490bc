"""Experiment configuration: dataclass schema, JSON loading, strict validation.

Unknown keys are rejected with a diagnostic naming the offending key, so a
typo in a config file never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


@dataclass(frozen=True)
class ModelSettings:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"


@dataclass(frozen=True)
class DataSettings:
    n: int = 4000
    d: int = 20
    classes: int = 4
    separation: float = 3.0
    noise_std: float = 1.0
    partition: str = "dirichlet"
    alpha: float = 0.3
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class AggregatorSettings:
    strategy: str = "robust"
    krum_f: int = 1
    multi_krum_m: int = 5
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    filter_c: float = 2.0
    staleness_tau: int = 3
    staleness_rho: float = 0.5


@dataclass(frozen=True)
class PrivacySettings:
    enabled: bool = False
    epsilon_total: float = 2.0
    delta: float = 1e-5
    gamma: tuple[float, ...] = ()  # per-client contribution weights; empty = all 1.0


@dataclass(frozen=True)
class MpcSettings:
    enabled: bool = False
    shares: int = 3


@dataclass(frozen=True)
class CommsSettings:
    enabled: bool = False
    sparsify: bool = True
    k_fraction: float = 0.1
    delta_encoding: bool = True
    quant_bits: int | None = 8
    entropy_coding: bool = True


@dataclass(frozen=True)
class AttackSettings:
    active: bool = False
    mode: str = "sign_flip"  # sign_flip | norm_boost | label_flip
    malicious: tuple[int, ...] = ()  # explicit client ids
    count: int = 0  # alternative: the lowest `count` client ids
    factor: float = 10.0


@dataclass(frozen=True)
class LinkSettings:
    edges: int = 2
    uplink_bandwidth: float = 65536.0
    uplink_latency: float = 0.005
    cloud_bandwidth: float = 10485760.0
    cloud_latency: float = 0.005


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 30
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.1
    clip: float | None = None
    clients: int = 10
    participation: float = 0.8
    mode: str = "sync"
    async_max_lag: int = 2
    target_accuracy: float | None = None
    model: ModelSettings = field(default_factory=ModelSettings)
    data: DataSettings = field(default_factory=DataSettings)
    aggregator: AggregatorSettings = field(default_factory=AggregatorSettings)
    privacy: PrivacySettings = field(default_factory=PrivacySettings)
    mpc: MpcSettings = field(default_factory=MpcSettings)
    comms: CommsSettings = field(default_factory=CommsSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    links: LinkSettings = field(default_factory=LinkSettings)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "model": ModelSettings,
    "data": DataSettings,
    "aggregator": AggregatorSettings,
    "privacy": PrivacySettings,
    "mpc": MpcSettings,
    "comms": CommsSettings,
    "attack": AttackSettings,
    "links": LinkSettings,
}

_TUPLE_FIELDS = {"hidden", "lambdas", "gamma", "malicious"}


def _coerce(key: str, name: str, value: Any) -> Any:
    if name in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, "expected a list")
        return tuple(value)
    if isinstance(value, list):
        raise ConfigError(key, "unexpected list value")
    return value


def _build_section(cls, payload: Any, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(prefix, "expected an object")
    allowed = set(cls.__dataclass_fields__)
    kwargs = {}
    for name, value in payload.items():
        full = f"{prefix}.{name}"
        if name not in allowed:
            raise ConfigError(full, "unknown key")
        kwargs[name] = _coerce(full, name, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def from_dict(payload: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = set(ExperimentConfig.__dataclass_fields__)
    kwargs: dict[str, Any] = {}
    for name, value in payload.items():
        if name not in allowed:
            raise ConfigError(name, "unknown key")
        if name in _SECTIONS:
            kwargs[name] = _build_section(_SECTIONS[name], value, name)
        else:
            kwargs[name] = _coerce(name, name, value)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def check(cond: bool, key: str, message: str) -> None:
        if not cond:
            raise ConfigError(key, message)

    check(cfg.rounds >= 0, "rounds", "must be >= 0")
    check(cfg.local_epochs >= 0, "local_epochs", "must be >= 0")
    check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    check(cfg.learning_rate >= 0, "learning_rate", "must be >= 0")
    check(cfg.clip is None or cfg.clip > 0, "clip", "must be positive when set")
    check(cfg.clients >= 1, "clients", "must be >= 1")
    check(0.0 <= cfg.participation <= 1.0, "participation", "must lie in [0, 1]")
    check(cfg.mode in ("sync", "async"), "mode", "must be 'sync' or 'async'")
    check(cfg.async_max_lag >= 0, "async_max_lag", "must be >= 0")
    check(
        cfg.target_accuracy is None or 0.0 < cfg.target_accuracy <= 1.0,
        "target_accuracy",
        "must lie in (0, 1]",
    )
    check(all(h >= 1 for h in cfg.model.hidden), "model.hidden", "dims must be >= 1")
    check(
        cfg.model.activation in ("relu", "tanh", "identity"),
        "model.activation",
        "unknown activation",
    )
    check(cfg.data.partition in ("iid", "dirichlet"), "data.partition", "unknown kind")
    check(cfg.data.alpha > 0, "data.alpha", "must be positive")
    check(
        0.0 < cfg.data.holdout_fraction < 1.0,
        "data.holdout_fraction",
        "must lie in (0, 1)",
    )
    check(
        cfg.aggregator.strategy in ("fedavg", "weighted", "robust"),
        "aggregator.strategy",
        "unknown strategy",
    )
    check(cfg.aggregator.krum_f >= 0, "aggregator.krum_f", "must be >= 0")
    check(cfg.aggregator.multi_krum_m >= 1, "aggregator.multi_krum_m", "must be >= 1")
    check(
        0.0 < cfg.aggregator.staleness_rho <= 1.0,
        "aggregator.staleness_rho",
        "must lie in (0, 1]",
    )
    check(len(cfg.aggregator.lambdas) == 3, "aggregator.lambdas", "need 3 entries")
    check(cfg.privacy.epsilon_total > 0, "privacy.epsilon_total", "must be positive")
    check(0.0 < cfg.privacy.delta < 1.0, "privacy.delta", "must lie in (0, 1)")
    if cfg.privacy.enabled:
        check(cfg.clip is not None, "privacy.enabled", "requires a clip bound (sensitivity)")
        check(
            not cfg.privacy.gamma or len(cfg.privacy.gamma) == cfg.clients,
            "privacy.gamma",
            "must list one weight per client",
        )
        check(
            all(g > 0 for g in cfg.privacy.gamma),
            "privacy.gamma",
            "weights must be positive",
        )
    check(cfg.mpc.shares >= 1, "mpc.shares", "must be >= 1")
    check(
        not (cfg.mpc.enabled and cfg.comms.enabled),
        "mpc.enabled",
        "mpc and comms compression are mutually exclusive",
    )
    check(0.0 < cfg.comms.k_fraction <= 1.0, "comms.k_fraction", "must lie in (0, 1]")
    check(
        cfg.comms.quant_bits is None or 2 <= cfg.comms.quant_bits <= 15,
        "comms.quant_bits",
        "must lie in [2, 15] or be null",
    )
    check(
        not (cfg.comms.entropy_coding and cfg.comms.quant_bits is None),
        "comms.entropy_coding",
        "requires quant_bits",
    )
    check(
        cfg.attack.mode in ("sign_flip", "norm_boost", "label_flip"),
        "attack.mode",
        "unknown attack mode",
    )
    check(cfg.attack.count >= 0, "attack.count", "must be >= 0")
    check(cfg.attack.factor > 0, "attack.factor", "must be positive")
    if cfg.attack.active:
        ids = resolve_malicious(cfg)
        check(bool(ids), "attack.malicious", "active attack needs malicious clients")
        check(
            all(0 <= i < cfg.clients for i in ids),
            "attack.malicious",
            "ids must name existing clients",
        )
    check(cfg.links.edges >= 1, "links.edges", "must be >= 1")
    check(cfg.links.uplink_bandwidth > 0, "links.uplink_bandwidth", "must be positive")
    check(cfg.links.cloud_bandwidth > 0, "links.cloud_bandwidth", "must be positive")
    check(cfg.links.uplink_latency >= 0, "links.uplink_latency", "must be >= 0")
    check(cfg.links.cloud_latency >= 0, "links.cloud_latency", "must be >= 0")


def resolve_malicious(cfg: ExperimentConfig) -> tuple[int, ...]:
    if cfg.attack.malicious:
        return tuple(sorted(set(int(i) for i in cfg.attack.malicious)))
    return tuple(range(cfg.attack.count))


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return from_dict(payload)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()
