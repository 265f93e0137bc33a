"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
FormatError -> 2, NumericalError -> 3.  Everything else is a bug.
"""


class ZslVitError(Exception):
    """Base class for errors raised deliberately by this package."""


class ConfigError(ZslVitError):
    """Invalid configuration value or unusable argument combination."""


class DimensionError(ZslVitError):
    """Tensor shape mismatch.  Message names both offending shapes."""


class ContractError(ZslVitError):
    """An API precondition was violated by the caller."""


class FormatError(ZslVitError):
    """Malformed file on disk.  Message carries file (and line) context."""


class NumericalError(ZslVitError):
    """NaN/Inf gradients, divergence, or a failed gradient check."""
