"""Exception and warning types shared across the package."""


class IrregridError(Exception):
    """Base class for all package errors.

    ``code`` is a stable machine-parseable identifier used by the CLI
    error reporting (one line per failure, ``error:<code>: message``).
    """

    @property
    def code(self) -> str:
        return type(self).__name__


class OutOfDomain(IrregridError):
    """A query point lies outside the space or time coverage of a stack."""


class MaskedRegion(IrregridError):
    """An interpolation touches a masked (missing) grid cell."""


class CoverageMismatch(IrregridError):
    """Two gridded products do not cover each other as required."""


class SingularSystem(IrregridError):
    """A linear system is numerically singular."""


class InsufficientData(IrregridError):
    """Too few usable observations to fit the requested model."""


class DimensionMismatch(IrregridError):
    """Vector or matrix shapes are inconsistent."""


class DegenerateInput(IrregridError):
    """Training data carries no signal (for example, all-zero samples)."""


class HarvestTooSmall(IrregridError):
    """The operator harvest produced fewer samples than required."""


class UncoveredNode(IrregridError):
    """A grid node is not covered by any reconstruction tile."""


class IoError(IrregridError):
    """A file could not be read or written."""


class RankDeficientWarning(UserWarning):
    """Training samples did not span the requested number of directions."""
