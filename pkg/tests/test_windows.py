import pytest

from kgstream.pipeline import WindowConfig, WindowKind
from kgstream.windows import Accumulator, KeyState, Window, aggregate_fire, aggregate_value, window_assign


def test_tumbling():
    config = WindowConfig(WindowKind.TUMBLING, duration=1000)
    assert window_assign(0, config, KeyState()) == [Window(0, 1000)]
    assert window_assign(999, config, KeyState()) == [Window(0, 1000)]
    assert window_assign(1000, config, KeyState()) == [Window(1000, 2000)]
    assert window_assign(-1, config, KeyState()) == [Window(-1000, 0)]


def test_hopping_windows_come_in_start_order():
    config = WindowConfig(WindowKind.HOPPING, duration=1000, hop=250)
    windows = window_assign(1100, config, KeyState())
    assert windows == [Window(250, 1250), Window(500, 1500), Window(750, 1750), Window(1000, 2000)]
    assert all(w.start <= 1100 < w.end for w in windows)


def test_sessions_merge_when_an_event_bridges_them():
    config = WindowConfig(WindowKind.SESSION, gap=100)
    state = KeyState()
    first = window_assign(0, config, state)[0]
    state.windows[first] = Accumulator()
    state.windows[first].add(0, 1.0)
    second = window_assign(150, config, state)[0]
    state.windows[second] = Accumulator()
    state.windows[second].add(150, 2.0)
    assert (first, second) == (Window(0, 100), Window(150, 250))

    bridge = window_assign(90, config, state)[0]
    assert bridge == Window(0, 250)
    assert state.sessions == [Window(0, 250)]
    assert state.windows[bridge].count == 2
    assert state.windows[bridge].values == [1.0, 2.0]


def test_count_windows_are_positional():
    config = WindowConfig(WindowKind.COUNT, size=3)
    state = KeyState()
    buckets = [window_assign(t, config, state)[0] for t in (50, 10, 30, 20, 40, 60, 70)]
    assert buckets[:3] == [Window(0, 3)] * 3
    assert buckets[3:6] == [Window(3, 6)] * 3
    assert buckets[6] == Window(6, 9)


@pytest.mark.parametrize(
    "function,expected",
    [("sum", 6.0), ("avg", 2.0), ("min", 1.0), ("max", 3.0), ("count", 3)],
)
def test_aggregate_values(function, expected):
    acc = Accumulator()
    for t, v in enumerate([1.0, 2.0, 3.0]):
        acc.add(t, v)
    assert aggregate_value(acc, function) == expected


def test_aggregate_fire():
    acc = Accumulator()
    acc.add(120, 1.0 / 3)
    acc.add(80, 2.0 / 3)
    out = aggregate_fire(Window(0, 1000), acc, "sum", key="m1", keyed=True, value_field="total", round_digits=3)
    assert out == {"window_start": 0, "window_end": 1000, "key": "m1", "count": 2, "total": 1.0}
    positional = aggregate_fire(Window(0, 2), acc, "count", positional=True)
    assert positional == {"window_start": 80, "window_end": 120, "count": 2, "value": 2}
    assert aggregate_fire(Window(0, 1), Accumulator(), "count") is None
