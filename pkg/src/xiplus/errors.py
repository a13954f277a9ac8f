"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
failures to the documented process exit status without string matching.
"""


class XiPlusError(Exception):
    exit_code = 2


class ConfigError(XiPlusError, ValueError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(XiPlusError, ValueError):
    """Malformed, missing or inconsistent input data."""

    exit_code = 2


class ShapeError(DataError):
    """Array dimensions do not agree."""


class MissingCentroidError(DataError, KeyError):
    def __init__(self, speaker):
        self.speaker = speaker
        super().__init__(f"no centroid for speaker {speaker!r}")

    def __str__(self):
        return self.args[0]


class StaleCacheError(XiPlusError, RuntimeError):
    """A backward pass was handed a cache from a different forward call."""

    exit_code = 3


class NumericalError(XiPlusError, ArithmeticError):
    """Non-finite values, failed factorizations and similar."""

    exit_code = 3


class DivergenceError(NumericalError):
    pass
