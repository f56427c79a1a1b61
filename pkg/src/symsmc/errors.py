"""Exception types shared across the package.

Contract violations (shapes, unknown ops, cross-tape mixing) raise
:class:`ContractError`; numeric domain problems (log of a non-positive
value, overflow to non-finite) raise :class:`DomainError`.  The symbolic
and inference layers add their own, more specific failures below.
"""


class ContractError(ValueError):
    """An operation was called in a way its contract forbids."""


class DomainError(ValueError):
    """A numeric operation left its defined domain (e.g. log of <= 0)."""


class UnsupportedDomainError(ValueError):
    """A schema declares a variable the exact engine cannot enumerate."""


class ImpossibleEvidenceError(RuntimeError):
    """All assignments have zero likelihood under the observed value.

    Carries the offending previous state and observation so oracle
    callers can report exactly which instance was contradictory.
    """

    def __init__(self, message, prev_state=None, observed=None):
        super().__init__(message)
        self.prev_state = prev_state
        self.observed = observed


class EnumerationCapError(RuntimeError):
    """Joint enumeration would exceed the configured support cap."""


class DegenerateFilterError(RuntimeError):
    """Every particle weight collapsed to zero; the filter is dead."""


class ConfigError(ValueError):
    """A run configuration file is malformed or has unknown keys."""
