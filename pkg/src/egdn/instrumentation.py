"""Probe counter for index lookups.

Incremental operators promise work proportional to the deltas they see
and emit, not to slot sizes.  Every hash-index probe in a hot path ticks
this counter so tests can pin that bound down as an exact number.
"""


class ProbeCounter:
    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def probe(self) -> None:
        self.count += 1

    def reset(self) -> int:
        """Zero the counter and return the previous value."""
        previous = self.count
        self.count = 0
        return previous


PROBES = ProbeCounter()
