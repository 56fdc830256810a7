"""Exception types shared across stages.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``OSError`` -> 2,
``DivergenceError`` -> 3.
"""


class MdkdError(Exception):
    pass


class ConfigError(MdkdError, ValueError):
    """Invalid configuration, missing upstream artifact or inconsistent inputs."""


class AlignmentError(ConfigError):
    """Source and target files of a parallel corpus have different line counts."""


class FingerprintMismatch(ConfigError):
    """Two artifacts were built against different vocabularies."""


class DivergenceError(MdkdError):
    """A loss or gradient became non-finite."""
