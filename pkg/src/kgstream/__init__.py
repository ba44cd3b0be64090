"""Knowledge-graph driven management of industrial data streams."""

__version__ = "0.1.0"
