"""Error types shared across the toolkit.

Every error raised on purpose derives from GistError so callers (and the CLI
exit-code mapping) can tell deliberate validation failures from bugs.
"""

from __future__ import annotations


class GistError(Exception):
    """Base class for all toolkit errors."""


# ---------------------------------------------------------------------------
# matrix files


class MatrixFormatError(GistError):
    """The bytes on disk do not form a valid matrix file."""


class BadMagic(MatrixFormatError):
    pass


class TruncatedPayload(MatrixFormatError):
    pass


class NonFiniteValue(MatrixFormatError):
    pass


# ---------------------------------------------------------------------------
# workspace


class ManifestParseError(GistError):
    pass


class MissingArtifact(GistError):
    pass


class ShapeMismatch(GistError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


# ---------------------------------------------------------------------------
# similarity metrics


class DegenerateMatrix(GistError):
    """A feature matrix is identically zero after centering."""


class RowMismatch(GistError):
    """Two matrices that must share rows do not."""


class OutOfRange(GistError):
    pass


class SelfComparison(GistError):
    pass


# ---------------------------------------------------------------------------
# properties


class EmptyObjective(GistError):
    """The objective profile is empty so the overlap denominator is zero."""


class NoFaults(GistError):
    pass


class RankTooLow(GistError):
    """Requested more reduced dimensions than the data has rank.

    Never raised by reduce_dims itself (it pads and warns); available for
    callers that want the strict behavior.
    """


class TooFewClusters(GistError):
    pass


class MixedRuns(GistError):
    """Profiles from different clustering runs or band specs were combined."""


# ---------------------------------------------------------------------------
# stats


class TooFewSamples(GistError):
    pass


class AllTied(GistError):
    pass


# ---------------------------------------------------------------------------
# pipeline


class TooFewModels(GistError):
    pass


class NoUsableProxy(GistError):
    """No metric passed the correlation check. A status, not a crash."""


class NotEnoughTypes(GistError):
    pass
