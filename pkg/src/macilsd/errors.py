"""Exception hierarchy shared across the package."""


class MacilError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(MacilError):
    """A binary feature file or checkpoint is malformed."""


class ManifestError(MacilError):
    """A manifest violates its invariants (duplicate id, T mismatch, ...)."""


class ConfigError(MacilError):
    """A configuration value is invalid or infeasible."""


class ContractViolation(MacilError):
    """A caller broke an operation precondition (shape/range mismatch)."""


class DegenerateInputError(MacilError):
    """A numerically degenerate input (e.g. zero-norm embedding) in strict mode."""


class UndefinedMetricError(MacilError):
    """A metric is undefined for the given inputs (e.g. AP with no positives)."""
