"""Exception hierarchy shared by every module."""


class BundleError(Exception):
    """Base class for all library errors."""


class DomainError(BundleError, ValueError):
    """An argument lies outside the domain of the operation."""


class SizeError(BundleError):
    """An enumeration or exact-solve size guard was exceeded."""


class ParseError(BundleError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class EstimationError(BundleError):
    """Raised when the likelihood cannot be evaluated or data is empty."""


class BudgetExceeded(BundleError):
    """An exact solver ran out of its node or time budget."""


class PreconditionError(BundleError, ValueError):
    """Model parameters violate the assumption an operation relies on."""
