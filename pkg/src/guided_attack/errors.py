"""Exception hierarchy shared by every stage of the pipeline."""


class GuidedAttackError(Exception):
    """Base class; the CLI turns these into a machine-readable error line."""

    kind = "error"


class SpecError(GuidedAttackError, ValueError):
    kind = "spec"


class ShapeError(GuidedAttackError, ValueError):
    kind = "shape"


class InputError(GuidedAttackError, ValueError):
    kind = "input"


class NumericError(GuidedAttackError, ArithmeticError):
    kind = "numeric"


class FormatError(GuidedAttackError, ValueError):
    kind = "format"


class UsageError(GuidedAttackError, RuntimeError):
    kind = "usage"


class ConfigError(GuidedAttackError, ValueError):
    kind = "config"


class DependencyError(GuidedAttackError, FileNotFoundError):
    kind = "dependency"
