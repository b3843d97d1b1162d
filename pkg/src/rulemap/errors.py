"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RulemapError(Exception):
    """Base class for all package errors."""


class ConfigError(RulemapError, ValueError):
    pass


class OutOfFrame(RulemapError, ValueError):
    pass


class EmptyExtent(RulemapError, ValueError):
    pass


class ExtentMismatch(RulemapError, ValueError):
    pass


class EmptyUnion(RulemapError, ValueError):
    pass


class UnknownRuleKey(RulemapError, KeyError):
    pass


class MalformedSequence(RulemapError):
    """Token sequence violates the lane/rule grammar.

    ``index`` is the position of the first offending token (``len(tokens)``
    when the sequence ended early) and ``expected`` the token kinds that
    would have been accepted there.
    """

    def __init__(self, index: int, expected, found=None, message: str | None = None):
        self.index = index
        self.expected = tuple(sorted(expected))
        self.found = found
        if message is None:
            message = f"at token {index}: expected one of {', '.join(self.expected)}"
            if found is not None:
                message += f", found {found}"
        super().__init__(message)


class TrajectoryTooShort(RulemapError, ValueError):
    pass


class PlanMismatch(RulemapError, ValueError):
    pass


class BadScenario(RulemapError, ValueError):
    pass


class MissingPair(RulemapError, KeyError):
    pass


class ModelFailure(RulemapError):
    """A segment model could not produce output for a request."""


class AdapterTimeout(ModelFailure):
    pass


class ProcessExit(ModelFailure):
    pass


class ProtocolViolation(ModelFailure):
    pass
