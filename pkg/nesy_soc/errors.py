"""Exception hierarchy shared by every module of the package."""

from typing import Iterable, List, Optional


class NesySocError(Exception):
    """Base class for every error raised on purpose by nesy_soc."""


class ConfigError(NesySocError, ValueError):
    """Invalid or missing configuration."""


class FlowDataError(NesySocError, ValueError):
    """Unreadable flow CSV, bad schema, unknown label or bad split request."""


class FuzzyDomainError(NesySocError, ValueError):
    """Empty quantifier domain or truth value outside [0, 1]."""


class NumericalError(NesySocError, ArithmeticError):
    """NaN met during a forward or backward pass."""


class ModelError(NesySocError, ValueError):
    """Bad layer dimensions, shape mismatch or unreadable checkpoint."""


class LtlSyntaxError(NesySocError, ValueError):
    """Formula text that does not follow the LTL_f grammar."""

    def __init__(self, message: str, offset: int, expected: Iterable[str] = ()):
        self.offset = offset
        self.expected = sorted(set(expected))
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class InputFileError(NesySocError, ValueError):
    """A line of a trace, rule, plan, table or config file could not be read."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class RecognitionError(NesySocError, ValueError):
    """Inconsistent rules or an unsearchable recognition request."""


class ExtractionError(NesySocError, ValueError):
    """CTI report could not be turned into a plan pattern."""


class UnmappedSentenceError(ExtractionError):
    """No keyword-table phrase occurs in a sentence."""

    def __init__(self, sentence: str, tried: List[str], partial: Optional[List[str]] = None):
        self.sentence = sentence
        self.tried = list(tried)
        self.partial = list(partial or [])
        super().__init__(
            f"unmapped sentence {sentence!r}; tried phrases: {', '.join(self.tried)}"
            + (f"; mapped so far: {', '.join(self.partial)}" if self.partial else "")
        )


class MalformedReplyError(ExtractionError):
    """Completion reply without usable PATTERN/SYMBOLS lines."""


class DisallowedPatternError(ExtractionError):
    """Completion reply names a pattern outside ALLOWED_PATTERNS."""


class PlanConflictError(ExtractionError):
    """Consecutive pairwise extractions disagree on their shared sentence."""


class TransportError(NesySocError, ConnectionError):
    """The remote completion endpoint could not be reached or answered badly."""
