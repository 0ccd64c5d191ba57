"""
Module contains the exceptions raised by SiteWizard.

Every exception that signals bad input inherits :class:`ValidationError`
(and therefore :class:`ValueError`), which the command line maps to exit code 1.
"""
from typing import Iterable, List, Optional, Tuple

from .doc import doc_category


__all__ = (
    "SiteWizError",
    "ValidationError",
    "SchemaError",
    "UnseenSiteError",
    "StratificationError",
    "SingularDesignError",
    "ConvergenceError",
    "ModelFormatError",
    "DegenerateStatisticError",
    "CvStepError",
)


Issue = Tuple[Optional[int], Optional[str], str]


@doc_category("Exceptions")
class SiteWizError(Exception):
    """
    Base class of all SiteWizard exceptions.
    """


@doc_category("Exceptions")
class ValidationError(SiteWizError, ValueError):
    """
    Raised when input data or parameters violate a precondition.

    Parameters
    ------------
    message: str
        Human readable description.
    issues: Optional[Iterable[tuple[int | None, str | None, str]]]
        Individual problems as ``(row, column, message)`` triplets.
        Rows are 0-based data row indices (the header is not counted).
    """
    def __init__(self, message: str, issues: Optional[Iterable[Issue]] = None) -> None:
        self.issues: List[Issue] = list(issues or [])
        if self.issues:
            shown = "; ".join(self._format_issue(issue) for issue in self.issues[:10])
            more = len(self.issues) - 10
            message = f"{message} ({shown}{f'; ... {more} more' if more > 0 else ''})"

        super().__init__(message)

    @staticmethod
    def _format_issue(issue: Issue) -> str:
        row, column, text = issue
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")

        return f"{', '.join(where)}: {text}" if where else text


@doc_category("Exceptions")
class SchemaError(ValidationError):
    """
    Raised when columns are missing, duplicated or do not match a fitted model.
    """


@doc_category("Exceptions")
class UnseenSiteError(ValidationError):
    """
    Raised when data from a site that was not present at fit time is transformed.
    """
    def __init__(self, sites: Iterable[str]) -> None:
        self.sites = sorted(set(map(str, sites)))
        super().__init__(f"Site(s) not seen during fit: {', '.join(self.sites)}")


@doc_category("Exceptions")
class StratificationError(ValidationError):
    """
    Raised when a stratum is too small for the requested split or fold count.
    """


@doc_category("Exceptions")
class SingularDesignError(SiteWizError, ArithmeticError):
    """
    Raised when a design matrix is rank deficient.
    """


@doc_category("Exceptions")
class ConvergenceError(SiteWizError, ArithmeticError):
    """
    Raised when an iterative estimate does not converge within its iteration cap.
    """


@doc_category("Exceptions")
class ModelFormatError(ValidationError):
    """
    Raised when a serialized model or grid file is corrupt, truncated
    or was written by an unsupported format version.
    """


@doc_category("Exceptions")
class DegenerateStatisticError(ValidationError):
    """
    Raised when a statistic is undefined for the given data
    (zero variance, all differences zero, empty groups ...).
    """


@doc_category("Exceptions")
class CvStepError(SiteWizError):
    """
    Wraps an exception raised while fitting or applying a pipeline inside cross-validation.

    Parameters
    ------------
    repetition: int
        0-based repetition index.
    fold: int
        0-based fold index.
    error: Exception
        The original exception (also available as ``__cause__``).
    """
    def __init__(self, repetition: int, fold: int, error: Exception) -> None:
        self.repetition = repetition
        self.fold = fold
        self.error = error
        super().__init__(f"Repetition {repetition}, fold {fold}: {type(error).__name__}: {error}")
