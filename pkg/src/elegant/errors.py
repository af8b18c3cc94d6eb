"""Exception taxonomy shared across the engine."""

from __future__ import annotations


class ElegantError(Exception):
    """Base class for all engine errors."""


class ValidationError(ElegantError):
    """A domain invariant or precondition was violated."""


class ConflictError(ValidationError):
    """Two inputs claim the same identity (e.g. duplicate subject ids)."""


class SubjectNotFoundError(ElegantError):
    """No detected entity satisfies the subject selection signal."""


class SchemaError(ValidationError):
    """A persisted file or payload does not match its declared schema."""


class BackendError(ElegantError):
    """A model backend call failed."""


class TransportError(BackendError):
    """Network-level failure that persisted through the retry budget."""


class ProtocolError(BackendError):
    """The backend answered, but the payload violates the wire contract."""


class EmptyResponseError(ProtocolError):
    """A completion backend returned an empty text."""


class MissingFixtureError(BackendError):
    """Strict mock playback saw a request with no recorded fixture."""


class UndefinedCosineError(ValidationError):
    """Cosine similarity requested against a zero vector."""


class EmptyGraphError(ElegantError):
    """A per-graph statistic was requested for a graph with no relations."""


class CannotCalibrateError(ElegantError):
    """Dataset mean prediction length is undefined (all graphs empty)."""


class UndefinedMetricError(ElegantError):
    """A recall value was requested for an instance with no ground truths."""
