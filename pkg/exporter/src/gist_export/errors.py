"""Errors raised on purpose while exporting.

Everything subclasses ExportError so callers (and the CLI) can catch export
problems in one clause and let real bugs propagate.
"""


class ExportError(Exception):
    pass


class DataFormatError(ExportError):
    """A model artifact or dataset file could not be understood."""


class LayerNotFound(ExportError):
    """The layer selector matched no module in the model."""


class SelectorAmbiguous(ExportError):
    """The selector did not resolve to exactly one feature vector per input."""


class BatchShapeDrift(ExportError):
    """A later batch produced a different feature or logit width than the first."""


class LabelLengthMismatch(ExportError):
    """A label vector and its inputs disagree on length."""


class WorkspaceConflict(ExportError):
    """The export contradicts something the target workspace already holds."""
