from pathlib import Path

import pytest

from kgstream.config import CONFIG_ENV, Config, load_config, parse_config
from kgstream.errors import ConfigError


def test_defaults():
    config = parse_config(None)
    assert config == Config()
    assert config.broker.policy == "block"
    assert config.pipeline.bundle_size == 10
    assert config.graph_file == Path(".kgstream") / "graph.nt"
    assert [b["kind"] for b in config.storage.backends] == ["columnar-file", "row-log", "document-log"]


def test_durations_and_sections():
    config = parse_config(
        {
            "data_dir": "/srv/kg",
            "broker": {"policy": "drop-oldest", "queue_size": 64},
            "pipeline": {"lateness": "2 s", "bundle_time": 25},
            "gateway": {"access_ttl": "5 min", "refresh_ttl": "1 day"},
            "storage": {"partition": "1h", "backends": [{"id": "ts", "kind": "columnar-file"}]},
            "bench": {"results_dir": "out", "repetitions": 3},
            "server": {"host": "0.0.0.0", "timeout": "30s"},
        }
    )
    assert config.data_dir == Path("/srv/kg")
    assert config.storage_dir == Path("/srv/kg/storage")
    assert config.broker.queue_size == 64
    assert config.pipeline.lateness == 2000
    assert config.pipeline.bundle_time == 25
    assert config.gateway.access_ttl == 300_000
    assert config.gateway.refresh_ttl == 86_400_000
    assert config.storage.backends == ({"id": "ts", "kind": "columnar-file"},)
    assert config.bench.results_dir == Path("out")
    assert config.server == type(config.server)(host="0.0.0.0", timeout=30_000)


def test_to_dict_parses_back():
    config = parse_config({"pipeline": {"lateness": "1 min"}, "storage": {"retention": "7d"}})
    assert parse_config(config.to_dict()) == config


@pytest.mark.parametrize(
    "document,message",
    [
        ({"brokers": {}}, "unknown config key"),
        ({"broker": []}, "must be a mapping"),
        ({"broker": {"queue": 1}}, "unknown key"),
        ({"broker": {"queue_size": 0}}, "must be positive"),
        ({"broker": {"retain": -1}}, "non-negative"),
        ({"broker": {"queue_size": "big"}}, "must be an integer"),
        ({"broker": {"policy": "lossy"}}, "unknown broker policy"),
        ({"pipeline": {"lateness": "soon"}}, "pipeline.lateness"),
        ({"gateway": {"access_ttl": "2h", "refresh_ttl": "1h"}}, "shorter"),
        ({"storage": {"backends": []}}, "non-empty"),
        ({"storage": {"backends": [{"id": "a"}]}}, "exactly"),
        ({"storage": {"backends": [{"id": "a", "kind": "tape"}]}}, "unknown backend kind"),
        ({"storage": {"backends": [{"id": "a", "kind": "row-log"}, {"id": "a", "kind": "row-log"}]}}, "twice"),
    ],
)
def test_invalid_documents(document, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(document)


def test_load_config(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    assert load_config() == Config()

    path = tmp_path / "kgstream.yaml"
    path.write_text("broker:\n  retain: 10\n")
    assert load_config(path).broker.retain == 10
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert load_config().broker.retain == 10

    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    path.write_text("- a list\n")
    with pytest.raises(ConfigError, match="must be a mapping"):
        load_config(path)
    path.write_text("broker: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)
