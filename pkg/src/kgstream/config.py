"""Configuration file handling.

The file is YAML with optional sections; anything left out keeps its default.
Durations are given as strings such as ``"10 ms"`` or ``"12 hour"`` or as bare
integers in milliseconds and are stored in milliseconds.
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .broker import OverflowPolicy
from .errors import ConfigError
from .storage import DEFAULT_BACKENDS, BackendKind
from .units import parse_duration

CONFIG_ENV = "KGSTREAM_CONFIG"
POLICIES = tuple(p.value for p in OverflowPolicy)


@dataclass(frozen=True)
class BrokerConfig:
    queue_size: int = 10000
    policy: str = "block"
    retain: int = 1000
    max_payload_bytes: int = 65536
    delivery_workers: int = 4


@dataclass(frozen=True)
class PipelineConfig:
    lateness: int = 0
    bundle_size: int = 10
    bundle_time: int = 10


@dataclass(frozen=True)
class MonitoringConfig:
    revalidate_interval: int = 1000
    feed_queue_size: int = 10000


@dataclass(frozen=True)
class GatewayConfig:
    access_ttl: int = 15 * 60_000
    refresh_ttl: int = 12 * 3_600_000
    login_limit: int = 10


@dataclass(frozen=True)
class StorageConfig:
    partition: int = 3_600_000
    retention: int = 30 * 86_400_000
    backends: tuple[dict, ...] = tuple(dict(b) for b in DEFAULT_BACKENDS)


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 10
    results_dir: Path = Path("bench-results")


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    timeout: int = 0


@dataclass(frozen=True)
class Config:
    data_dir: Path = Path(".kgstream")
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    monitoring: MonitoringConfig = field(default_factory=MonitoringConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    storage: StorageConfig = field(default_factory=StorageConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    server: ServerConfig = field(default_factory=ServerConfig)

    @property
    def graph_file(self) -> Path:
        return self.data_dir / "graph.nt"

    @property
    def inferred_file(self) -> Path:
        return self.data_dir / "inferred.nt"

    @property
    def credentials_file(self) -> Path:
        return self.data_dir / "credentials.yaml"

    @property
    def pipelines_dir(self) -> Path:
        return self.data_dir / "pipelines"

    @property
    def storage_dir(self) -> Path:
        return self.data_dir / "storage"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"data_dir": str(self.data_dir)}
        for f in fields(self):
            if f.name == "data_dir":
                continue
            section = getattr(self, f.name)
            out[f.name] = {
                s.name: str(v) if isinstance(v, Path) else ([dict(b) for b in v] if isinstance(v, tuple) else v)
                for s in fields(section)
                for v in [getattr(section, s.name)]
            }
        return out


SECTIONS = {
    "broker": BrokerConfig,
    "pipeline": PipelineConfig,
    "monitoring": MonitoringConfig,
    "gateway": GatewayConfig,
    "storage": StorageConfig,
    "bench": BenchConfig,
    "server": ServerConfig,
}

# keys parsed as durations, per section
DURATIONS = {
    "pipeline": {"lateness", "bundle_time"},
    "monitoring": {"revalidate_interval"},
    "gateway": {"access_ttl", "refresh_ttl"},
    "storage": {"partition", "retention"},
    "server": {"timeout"},
}

# keys that must be strictly positive; the rest only non-negative
POSITIVE = {
    "broker": {"queue_size", "max_payload_bytes", "delivery_workers"},
    "pipeline": {"bundle_size"},
    "monitoring": {"revalidate_interval", "feed_queue_size"},
    "gateway": {"access_ttl", "refresh_ttl", "login_limit"},
    "storage": {"partition", "retention"},
    "bench": {"repetitions"},
}


def _section(name: str, cls, data: Any):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"'{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    values = {}
    for key, value in data.items():
        if key in DURATIONS.get(name, ()):
            try:
                value = parse_duration(value)
            except ValueError as e:
                raise ConfigError(f"{name}.{key}: {e}") from e
        elif isinstance(getattr(cls(), key), int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
        if isinstance(value, int):
            if value < 0 or (value == 0 and key in POSITIVE.get(name, ())):
                raise ConfigError(f"{name}.{key} must be {'positive' if key in POSITIVE.get(name, ()) else 'non-negative'}, got {value}")
        values[key] = value
    return cls(**values)


def _check_backends(backends: Any) -> tuple[dict, ...]:
    if not isinstance(backends, list) or not backends:
        raise ConfigError("storage.backends must be a non-empty list of {id, kind}")
    kinds = {k.value for k in BackendKind}
    seen = set()
    out = []
    for item in backends:
        if not isinstance(item, Mapping) or set(item) != {"id", "kind"}:
            raise ConfigError("each storage backend needs exactly 'id' and 'kind'")
        if item["kind"] not in kinds:
            raise ConfigError(f"unknown backend kind {item['kind']!r}, expected one of {', '.join(sorted(kinds))}")
        if item["id"] in seen:
            raise ConfigError(f"backend id {item['id']} is declared twice")
        seen.add(item["id"])
        out.append({"id": str(item["id"]), "kind": str(item["kind"])})
    return tuple(out)


def parse_config(data: Mapping | None) -> Config:
    """Validate a parsed config document."""
    data = dict(data or {})
    unknown = set(data) - set(SECTIONS) - {"data_dir"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name)
        if name == "storage" and isinstance(raw, Mapping) and "backends" in raw:
            raw = dict(raw)
            backends = _check_backends(raw.pop("backends"))
            sections[name] = replace(_section(name, cls, raw), backends=backends)
        elif name == "bench" and isinstance(raw, Mapping) and "results_dir" in raw:
            raw = dict(raw)
            results_dir = Path(str(raw.pop("results_dir")))
            sections[name] = replace(_section(name, cls, raw), results_dir=results_dir)
        elif name == "server" and isinstance(raw, Mapping) and "host" in raw:
            raw = dict(raw)
            host = str(raw.pop("host"))
            sections[name] = replace(_section(name, cls, raw), host=host)
        else:
            sections[name] = _section(name, cls, raw)

    broker = sections["broker"]
    if broker.policy not in POLICIES:
        raise ConfigError(f"unknown broker policy {broker.policy!r}, expected one of {', '.join(POLICIES)}")
    gateway = sections["gateway"]
    if gateway.access_ttl >= gateway.refresh_ttl:
        raise ConfigError("gateway.access_ttl must be shorter than gateway.refresh_ttl")

    data_dir = Path(str(data["data_dir"])) if data.get("data_dir") is not None else Path(".kgstream")
    return Config(data_dir=data_dir, **sections)


def load_config(path: str | Path | None = None) -> Config:
    """Load the config named by ``path``, else by ``$KGSTREAM_CONFIG``, else defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if path is None:
        logging.debug("No config file given, using defaults.")
        return Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: the config document must be a mapping")
    config = parse_config(data)
    logging.info(f"Loaded config from {path}.")
    return config
