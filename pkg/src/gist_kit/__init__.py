"""gist-kit: pick reference test sets for a model by representational similarity.

Offline, the toolkit checks which similarity metrics actually predict
test-set transfer properties on a zoo of reference models; online, it ranks
reference test sets for a new model under test and combines them. Everything
operates on exported activation/logit/label matrices, so no training
framework is required at analysis time.
"""

from __future__ import annotations

from . import errors
from .matrixio import read_matrix, write_matrix
from .pipeline import (
    PROPERTIES,
    EfficiencyInput,
    OfflineOptions,
    OfflineReport,
    SelectionPlan,
    Strategy,
    Thresholds,
    TopKReport,
    check_correlation,
    efficiency_index,
    eligible_references,
    fault_dendrogram,
    offline_validate,
    online_select,
    property_scores,
    rank_heatmap,
    similarity_scores,
    top_k_eval,
)
from .properties import (
    BandSpec,
    ClusterConfig,
    coverage_profile,
    fault_type_profiles,
    fit_bands,
    kmnc_overlap,
)
from .similarity import (
    FUNCTIONAL,
    METRICS,
    REPRESENTATIONAL,
    MetricConfig,
    ScoreCache,
    oriented,
    pairwise_similarity,
)
from .stats import kendall_tau_b
from .synth import PLANTED_METRICS, SynthConfig, generate_benchmark, plant_description
from .workspace import Workspace, fault_mask, load_workspace, predictions_of, write_workspace

__version__ = "0.1.0"

__all__ = [
    "BandSpec",
    "ClusterConfig",
    "EfficiencyInput",
    "FUNCTIONAL",
    "METRICS",
    "MetricConfig",
    "OfflineOptions",
    "OfflineReport",
    "PLANTED_METRICS",
    "PROPERTIES",
    "REPRESENTATIONAL",
    "ScoreCache",
    "SelectionPlan",
    "Strategy",
    "SynthConfig",
    "Thresholds",
    "TopKReport",
    "Workspace",
    "__version__",
    "check_correlation",
    "coverage_profile",
    "efficiency_index",
    "eligible_references",
    "errors",
    "fault_dendrogram",
    "fault_mask",
    "fault_type_profiles",
    "fit_bands",
    "generate_benchmark",
    "kendall_tau_b",
    "kmnc_overlap",
    "load_workspace",
    "offline_validate",
    "online_select",
    "oriented",
    "pairwise_similarity",
    "plant_description",
    "predictions_of",
    "property_scores",
    "rank_heatmap",
    "read_matrix",
    "similarity_scores",
    "top_k_eval",
    "write_matrix",
    "write_workspace",
]
