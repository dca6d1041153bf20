"""Exception taxonomy shared across the pipeline."""


class PasgError(Exception):
    """Base class for all pipeline errors."""


# --- mask / view ingestion ---

class EmptyMask(PasgError):
    """Mask contains no foreground pixels."""


class MissingView(PasgError):
    """View set directory is missing one or more required views."""


class DimensionMismatch(PasgError):
    """Images within one view set (or one response) disagree on pixel size."""


class CorruptFile(PasgError):
    """A view file exists but cannot be decoded."""


# --- keypoint geometry ---

class ContourTooShort(PasgError):
    """Contour has too few points for the requested window."""


class DegenerateMask(PasgError):
    """Mask covariance is rank-deficient (single pixel / exact collinearity)."""


class NoDepth(PasgError):
    """Keypoint sits over a depth hole; caller drops the point."""


class DegenerateAxis(PasgError):
    """Top/bottom centroids coincide; principal axis undefined."""


# --- annotation serialization / parsing ---

class ParseError(PasgError):
    """Response or annotation file is not parseable.

    Carries the byte offset and, when known, the field path of the failure.
    """

    def __init__(self, message, offset=None, path=None):
        super().__init__(message)
        self.offset = offset
        self.path = path


class SchemaError(PasgError):
    """Well-formed JSON with an unknown record class or top-level key."""


class MalformedEntry(PasgError):
    """A single correspondence entry violates the entry schema."""

    def __init__(self, message, index=None, reason=None):
        super().__init__(message)
        self.index = index
        self.reason = reason or message


class NoStructuredBlock(PasgError):
    """Identify response contains no key_primitives block."""


# --- providers ---

class ProviderUnavailable(PasgError):
    """Transport retries exhausted or remote service down."""


class ProviderTimeout(PasgError):
    """Single request exceeded the configured timeout."""


class AuthFailure(PasgError):
    """Credentials rejected; never retried."""


class UnknownGranularity(PasgError):
    """Requested granularity level is not served by this provider."""


# --- benchmark ---

class InsufficientDistractors(PasgError):
    """Object is too sparse to build the required distractor set."""


class EmptyPool(PasgError):
    """No items available to split."""


class UnknownItemId(PasgError):
    """Prediction file references an item id absent from the split part."""


# --- orchestration ---

class CorruptManifest(PasgError):
    """Run manifest exists but cannot be interpreted."""
