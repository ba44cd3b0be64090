from pathlib import Path

import pytest

from kgstream.formats import load_document, load_rules
from kgstream.graphs import Fixture, build_all, fixture_from_document, register_derived_stream
from kgstream.kg import GraphStore
from kgstream.units import parse_timestamp

DATA = Path(__file__).parent / "data"
PLANT = DATA / "plant.yaml"


def at(clock: str) -> int:
    """Epoch ms of a time of day on the day of the plant collaboration."""
    return parse_timestamp(f"2024-03-04T{clock}")


def build_store(fixture: Fixture, materialize: bool = True) -> GraphStore:
    store = GraphStore()
    load_rules().install(store)
    for triples in build_all(fixture).values():
        store.insert(triples)
    for spec in fixture.pipelines:
        register_derived_stream(spec, store)
    if materialize:
        store.materialize()
    return store


@pytest.fixture
def plant_fixture() -> Fixture:
    return fixture_from_document(load_document(PLANT))


@pytest.fixture
def plant_store(plant_fixture) -> GraphStore:
    return build_store(plant_fixture)
