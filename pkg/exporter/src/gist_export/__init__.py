"""Bridge trained torch classifiers into the matrix workspace format.

export_model dumps one model's train-time features (from a chosen layer),
logits and labels; export_testset adds per-model eval matrices for a test
set; verify_roundtrip audits everything written against recorded checksums.
"""
from .capture import CONVENTIONS, FeatureTap
from .errors import (
    BatchShapeDrift,
    DataFormatError,
    ExportError,
    LabelLengthMismatch,
    LayerNotFound,
    SelectorAmbiguous,
    WorkspaceConflict,
)
from .export import (
    ExportSpec,
    FileCheck,
    RoundtripReport,
    export_model,
    export_testset,
    verify_roundtrip,
)
from .wire import read_matrix, write_matrix

__version__ = "0.1.0"

__all__ = [
    "BatchShapeDrift",
    "CONVENTIONS",
    "DataFormatError",
    "ExportError",
    "ExportSpec",
    "FeatureTap",
    "FileCheck",
    "LabelLengthMismatch",
    "LayerNotFound",
    "RoundtripReport",
    "SelectorAmbiguous",
    "WorkspaceConflict",
    "export_model",
    "export_testset",
    "read_matrix",
    "verify_roundtrip",
    "write_matrix",
    "__version__",
]
