import re
from datetime import datetime, timezone

import pint

ureg = pint.UnitRegistry()

_SHORTHAND = re.compile(r"^\s*(?P<value>[-+]?\d+(\.\d+)?)\s*(?P<unit>ms|s|m|min|h|d)\s*$")
_SHORTHAND_UNITS = {
    "ms": "millisecond",
    "s": "second",
    "m": "minute",
    "min": "minute",
    "h": "hour",
    "d": "day",
}


def parse_duration(value: str | int | float | None, default: int | None = None) -> int | None:
    """Parse a duration into whole milliseconds.

    Parameters
    ----------
    value : str | int | float | None
        Either a number (already in milliseconds) or a string such as
        ``"10 ms"``, ``"1h"``, ``"15 min"`` or ``"2.5 seconds"``.
    default : int | None, optional
        Returned when ``value`` is None.

    Returns
    -------
    int | None
        The duration in milliseconds.

    Raises
    ------
    ValueError
        If the string is not a time quantity.
    """
    if value is None:
        return default
    if isinstance(value, bool):
        raise ValueError(f"Not a duration: {value!r}")
    if isinstance(value, (int, float)):
        return int(value)
    text = str(value).strip()
    if text.lstrip("+-").isdigit():
        return int(text)
    matched = _SHORTHAND.match(text)
    if matched is not None:
        text = f"{matched.group('value')} {_SHORTHAND_UNITS[matched.group('unit')]}"
    try:
        quantity = ureg.Quantity(text)
    except Exception as e:
        raise ValueError(f"Not a duration: {value!r}") from e
    if not isinstance(quantity, pint.Quantity) or quantity.dimensionality != ureg.second.dimensionality:
        raise ValueError(f"Not a duration: {value!r}")
    return int(round(quantity.to(ureg.millisecond).magnitude))


def parse_timestamp(value: str | int | float | datetime | None, default: int | None = None) -> int | None:
    """Parse an epoch-milliseconds integer or an ISO-8601 date-time (UTC when naive)."""
    if value is None:
        return default
    if isinstance(value, datetime):
        moment = value
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    else:
        text = str(value).strip()
        if text.lstrip("+-").isdigit():
            return int(text)
        try:
            moment = datetime.fromisoformat(text)
        except ValueError as e:
            raise ValueError(f"Not a timestamp: {value!r}") from e
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp() * 1000)
