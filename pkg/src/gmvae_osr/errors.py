"""Exception hierarchy shared by every module in the package."""


class GmvaeError(Exception):
    """Base class for all package errors."""


class DimensionError(GmvaeError, ValueError):
    """Array shapes do not agree."""


class DomainError(GmvaeError, ValueError):
    """A value lies outside the domain of an operation."""


class ContractError(GmvaeError, ValueError):
    """A caller violated a documented precondition."""


class FormatError(GmvaeError, ValueError):
    """A file does not follow the expected on-disk format."""


class FitError(GmvaeError, RuntimeError):
    """An iterative estimator failed to converge."""


class DivergenceError(GmvaeError, RuntimeError):
    """Training produced a non-finite loss."""
