"""Exception hierarchy.

Errors fall in two families that the CLI maps to exit codes: bad inputs
(``InputError``, exit 2) and numerical failures (``NumericalError``, exit 3).
"""


class SkewMixError(Exception):
    """Base class for all package errors."""


class InputError(SkewMixError, ValueError):
    """Malformed, missing or out-of-range user input."""


class NumericalError(SkewMixError, ArithmeticError):
    """A computation left its valid numerical domain."""


class ParameterDomainError(NumericalError):
    """Distribution parameters violate their invariants (e.g. non-SPD dispersion)."""


class DegenerateSkewnessError(ParameterDomainError):
    """xi' Sigma^-1 xi >= 1; the component is collapsing onto a half-line."""


class DegenerateDispersionError(ParameterDomainError):
    """A conditional (Schur complement) variance is not positive."""


class NotSplittableError(InputError):
    """Conditional quantities were requested for a one-dimensional distribution."""


class InitializationError(NumericalError):
    """k-means initialization could not produce K non-empty clusters."""


class ComponentCollapseError(NumericalError):
    """A mixture component's effective size dropped below the collapse threshold."""

    def __init__(self, component, weight, threshold):
        self.component = component
        self.weight = weight
        self.threshold = threshold
        super().__init__(
            f"component {component} collapsed: effective count {weight:.4g} "
            f"< {threshold:.4g}"
        )


class PartitionSizeError(InputError):
    """A training partition has too few voxels for the requested model."""


class EmptyRegionError(InputError):
    """An evaluation region contains no voxels."""


class DegenerateTestError(InputError):
    """The signed-rank test has no non-zero differences."""


class TableFormatError(InputError):
    """A voxel table file does not follow the CSV contract."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelFileError(InputError):
    """A model file is malformed or has an unsupported format version."""
