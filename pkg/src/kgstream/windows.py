"""Window assignment and aggregation state.

Time windows are closed-open ``[start, end)`` intervals in event-time
milliseconds. Count windows are numbered positionally per key: the n-th event
of a key falls in bucket ``n // size``, represented as the interval
``[bucket * size, bucket * size + size)`` over event ordinals.
"""
import math
from dataclasses import dataclass, field
from typing import Any

from .pipeline import WindowConfig, WindowKind


@dataclass(frozen=True, order=True)
class Window:
    start: int
    end: int


class Accumulator:
    """Running state of one window."""

    __slots__ = ("count", "values", "minimum", "maximum", "first_time", "last_time", "first_seq")

    def __init__(self, first_seq: int = 0):
        self.count = 0
        self.values: list[float] = []
        self.minimum: Any = None
        self.maximum: Any = None
        self.first_time: int | None = None
        self.last_time: int | None = None
        self.first_seq = first_seq

    def add(self, event_time: int, value: Any = None) -> None:
        self.count += 1
        if value is not None:
            self.values.append(value)
            if self.minimum is None or value < self.minimum:
                self.minimum = value
            if self.maximum is None or value > self.maximum:
                self.maximum = value
        if self.first_time is None or event_time < self.first_time:
            self.first_time = event_time
        if self.last_time is None or event_time > self.last_time:
            self.last_time = event_time

    def merge(self, other: "Accumulator") -> None:
        self.count += other.count
        self.values += other.values
        if other.minimum is not None and (self.minimum is None or other.minimum < self.minimum):
            self.minimum = other.minimum
        if other.maximum is not None and (self.maximum is None or other.maximum > self.maximum):
            self.maximum = other.maximum
        for t in (other.first_time, other.last_time):
            if t is None:
                continue
            if self.first_time is None or t < self.first_time:
                self.first_time = t
            if self.last_time is None or t > self.last_time:
                self.last_time = t
        self.first_seq = min(self.first_seq, other.first_seq)


@dataclass
class KeyState:
    """Per-key window state: open windows, the count-window ordinal and the
    open sessions."""

    windows: dict[Window, Accumulator] = field(default_factory=dict)
    count: int = 0
    sessions: list[Window] = field(default_factory=list)


def window_assign(event_time: int, config: WindowConfig, state: KeyState) -> list[Window]:
    """Windows an event at ``event_time`` belongs to, in start order.

    Session and count assignment update ``state``: sessions the event bridges
    are merged (accumulators included) and the count ordinal advances.
    """
    t = event_time
    if config.kind is WindowKind.TUMBLING:
        d = config.duration
        start = (t // d) * d
        return [Window(start, start + d)]
    if config.kind is WindowKind.HOPPING:
        d, hop = config.duration, config.hop
        out = []
        start = (t // hop) * hop
        while start > t - d:
            out.append(Window(start, start + d))
            start -= hop
        return out[::-1]
    if config.kind is WindowKind.SESSION:
        return [_assign_session(t, config.gap, state)]
    bucket = state.count // config.size
    state.count += 1
    return [Window(bucket * config.size, bucket * config.size + config.size)]


def session_candidate(event_time: int, gap: int, state: KeyState) -> Window:
    """The session an event would land in, without touching ``state``."""
    start, end = event_time, event_time + gap
    for s in state.sessions:
        if _touches(s, event_time, gap):
            start, end = min(start, s.start), max(end, s.end)
    return Window(start, end)


def _touches(session: Window, t: int, gap: int) -> bool:
    # session bounds are [first event, last event + gap)
    return session.start - gap < t < session.end


def _assign_session(t: int, gap: int, state: KeyState) -> Window:
    merged = [s for s in state.sessions if _touches(s, t, gap)]
    window = session_candidate(t, gap, state)
    if merged:
        acc = None
        for s in merged:
            state.sessions.remove(s)
            old = state.windows.pop(s, None)
            if old is None:
                continue
            if acc is None:
                acc = old
            else:
                acc.merge(old)
        if acc is not None:
            state.windows[window] = acc
    state.sessions.append(window)
    state.sessions.sort()
    return window


def close_session(state: KeyState, window: Window) -> None:
    if window in state.sessions:
        state.sessions.remove(window)


def aggregate_value(acc: Accumulator, function: str, round_digits: int | None = None) -> Any:
    if function == "count":
        return acc.count
    if function == "sum":
        value = math.fsum(acc.values)
    elif function == "avg":
        value = math.fsum(acc.values) / len(acc.values) if acc.values else None
    elif function == "min":
        value = acc.minimum
    elif function == "max":
        value = acc.maximum
    else:
        raise ValueError(f"unknown aggregate function {function}")
    if value is not None and round_digits is not None:
        value = round(value, round_digits)
    return value


def aggregate_fire(
    window: Window,
    acc: Accumulator,
    function: str,
    key: Any = None,
    keyed: bool = False,
    value_field: str = "value",
    round_digits: int | None = None,
    positional: bool = False,
) -> dict | None:
    """The output document of a closed window, or None for an empty one.

    Count windows report the event times of their first and last events as
    bounds.
    """
    if acc.count == 0:
        return None
    if positional:
        out: dict[str, Any] = {"window_start": acc.first_time, "window_end": acc.last_time}
    else:
        out = {"window_start": window.start, "window_end": window.end}
    if keyed:
        out["key"] = key
    out["count"] = acc.count
    out[value_field] = aggregate_value(acc, function, round_digits)
    return out
