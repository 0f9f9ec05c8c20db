"""Exception types shared across the harness."""


class HarnessError(Exception):
    """Base class for all harness errors."""


# --- prompt templates ---

class OptionsTooFew(HarnessError):
    """Multiple-choice formatting needs at least two options."""


class MissingInstruction(HarnessError):
    """instruct-qa rendering requires a task instruction on the context."""


class EmptyCaption(HarnessError):
    """Caption wrapping requires a non-empty caption."""


class AlreadyWrapped(HarnessError):
    """A prompt may carry at most one Context: prefix."""


class ExemplarFieldMissing(HarnessError):
    """An exemplar lacks the field its few-shot setting requires."""


# --- exemplar selection ---

class DimMismatch(HarnessError):
    """Vectors of different dimensionality cannot be compared."""


class ZeroVector(HarnessError):
    """Cosine similarity is undefined for all-zero vectors."""


class EmbeddingUnavailable(HarnessError):
    """The embedding provider could not produce a vector."""


# --- captions ---

class FusionEmpty(HarnessError):
    """Caption fusion produced an empty description."""


class CaptionAlreadySet(HarnessError):
    """A prompt context may carry at most one caption."""


# --- chain of thought ---

class EmptyVote(HarnessError):
    """Majority voting requires at least one answer."""


# --- datasets ---

class LoadError(HarnessError):
    """A dataset record failed validation; message names the offender."""


class ConversionInvalid(HarnessError):
    """Statement-to-question conversion did not yield a question."""


class QuadIncomplete(HarnessError):
    """Winoground quad construction is missing converted questions."""


# --- backends ---

class BackendError(HarnessError):
    """A backend call failed. ``kind`` is transport, request or protocol."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class ReplayMiss(HarnessError):
    """The replay store has no entry for the request digest."""

    def __init__(self, digest: str):
        super().__init__(f"no recorded response for digest {digest}")
        self.digest = digest


class UnknownPreset(HarnessError):
    """No generation preset is defined for the given tag."""


# --- runner ---

class CompareMismatch(HarnessError):
    """Two reports cover different datasets or sample sets."""
