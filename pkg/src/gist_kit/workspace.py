"""Workspace loading: manifest.json plus the matrix files it points at.

A workspace directory holds one manifest and a pile of GMX1/CSV matrices:

    {
      "num_classes": 10,
      "options": {...},                        optional
      "models": [
        {"id": "vgg16-s0", "model_type": "vgg16", "seed": 0,
         "role": "reference",                  or "under_test"
         "train_features": "...", "train_logits": "...",
         "train_labels": "...", "train_accuracy": 0.98,   optional
         "eval": {"ts-a": {"features": "...", "logits": "..."}, ...}}
      ],
      "testsets": [
        {"id": "ts-a", "origin_model": "vgg16-s0", "labels": "..."}
      ]
    }

All paths are relative to the workspace root. Shape consistency across files
is checked eagerly at load time (headers only); payloads are read lazily and
cached on first use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    LengthMismatch,
    ManifestParseError,
    MissingArtifact,
    ShapeMismatch,
)
from .matrixio import peek_shape, read_matrix

ROLES = ("reference", "under_test")


@dataclass
class ModelEntry:
    id: str
    model_type: str
    seed: int
    role: str
    train_features: str
    train_logits: str
    train_labels: str
    train_accuracy: float | None = None
    eval: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass
class TestSetEntry:
    id: str
    origin_model: str
    labels: str
    size: int = 0


class Workspace:
    """Parsed manifest plus lazily loaded, cached matrices."""

    def __init__(self, root, num_classes, models, testsets, options=None, arrays=None):
        self.root = Path(root) if root is not None else None
        self.num_classes = num_classes
        self.models: dict[str, ModelEntry] = {m.id: m for m in models}
        self.testsets: dict[str, TestSetEntry] = {t.id: t for t in testsets}
        self.options: dict = dict(options or {})
        self._arrays: dict[str, np.ndarray] = dict(arrays or {})

    # -- metadata -----------------------------------------------------------

    def model_ids(self) -> list[str]:
        return list(self.models)

    def reference_models(self) -> list[str]:
        return [m.id for m in self.models.values() if m.role == "reference"]

    def testset_of(self, model_id: str) -> str:
        """The test set a reference model owns (generated on it)."""
        for ts in self.testsets.values():
            if ts.origin_model == model_id:
                return ts.id
        raise MissingArtifact(f"model {model_id!r} owns no test set")

    # -- matrices -----------------------------------------------------------

    def _load(self, key: str):
        if key not in self._arrays:
            if self.root is None:
                raise MissingArtifact(f"in-memory workspace has no matrix {key!r}")
            self._arrays[key] = read_matrix(self.root / key)
        return self._arrays[key]

    def train_features(self, model_id: str) -> np.ndarray:
        return self._load(self.models[model_id].train_features)

    def train_logits(self, model_id: str) -> np.ndarray:
        return self._load(self.models[model_id].train_logits)

    def train_labels(self, model_id: str) -> np.ndarray:
        return _as_labels(self._load(self.models[model_id].train_labels))

    def eval_features(self, model_id: str, testset_id: str) -> np.ndarray:
        return self._load(self._eval_entry(model_id, testset_id)["features"])

    def eval_logits(self, model_id: str, testset_id: str) -> np.ndarray:
        return self._load(self._eval_entry(model_id, testset_id)["logits"])

    def testset_labels(self, testset_id: str) -> np.ndarray:
        return _as_labels(self._load(self.testsets[testset_id].labels))

    def _eval_entry(self, model_id: str, testset_id: str) -> dict[str, str]:
        entry = self.models[model_id].eval.get(testset_id)
        if entry is None:
            raise MissingArtifact(
                f"model {model_id!r} has no eval entry for test set {testset_id!r}"
            )
        return entry

    def train_accuracy(self, model_id: str) -> float:
        """Manifest value when present, else computed from train logits."""
        entry = self.models[model_id]
        if entry.train_accuracy is not None:
            return float(entry.train_accuracy)
        preds = predictions_of(self, model_id)
        labels = self.train_labels(model_id).ravel()
        return float(np.mean(preds == labels))


def _as_labels(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f":
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise ManifestParseError("label matrix holds non-integer values")
        arr = rounded.astype(np.int64)
    return arr.astype(np.int64).ravel()


# ---------------------------------------------------------------------------
# loading and validation


def load_workspace(root) -> Workspace:
    """Parse manifest.json under `root` and eagerly cross-check every shape.

    Raises ManifestParseError for malformed or rule-breaking manifests,
    MissingArtifact for files that are not there, and ShapeMismatch /
    LengthMismatch when the matrix headers disagree with each other.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not root.is_dir():
        raise MissingArtifact(f"workspace root {root} is not a directory")
    if not manifest_path.is_file():
        raise MissingArtifact(f"{manifest_path} does not exist")
    try:
        raw = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"{manifest_path}: {exc}") from exc

    models, testsets, num_classes, options = _parse_manifest(raw, manifest_path)
    ws = Workspace(root, num_classes, models, testsets, options)
    _check_consistency(ws)
    return ws


def _parse_manifest(raw, manifest_path):
    def fail(msg):
        raise ManifestParseError(f"{manifest_path}: {msg}")

    if not isinstance(raw, dict):
        fail("top level must be an object")
    num_classes = raw.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 2:
        fail("num_classes must be an integer >= 2")
    options = raw.get("options", {})
    if not isinstance(options, dict):
        fail("options must be an object")

    models = []
    seen = set()
    for i, m in enumerate(raw.get("models", [])):
        ctx = f"models[{i}]"
        for key in ("id", "model_type", "seed", "role", "train_features", "train_logits", "train_labels"):
            if key not in m:
                fail(f"{ctx} is missing {key!r}")
        if m["role"] not in ROLES:
            fail(f"{ctx}: unknown role {m['role']!r}")
        if m["id"] in seen:
            fail(f"duplicate model id {m['id']!r}")
        seen.add(m["id"])
        acc = m.get("train_accuracy")
        if acc is not None and not (isinstance(acc, (int, float)) and 0.0 <= acc <= 1.0):
            fail(f"{ctx}: train_accuracy must lie in [0, 1]")
        eval_map = m.get("eval", {})
        if not isinstance(eval_map, dict):
            fail(f"{ctx}: eval must be an object")
        for tsid, entry in eval_map.items():
            if not isinstance(entry, dict) or "features" not in entry or "logits" not in entry:
                fail(f"{ctx}: eval[{tsid!r}] needs features and logits paths")
        models.append(
            ModelEntry(
                id=m["id"],
                model_type=m["model_type"],
                seed=int(m["seed"]),
                role=m["role"],
                train_features=m["train_features"],
                train_logits=m["train_logits"],
                train_labels=m["train_labels"],
                train_accuracy=acc,
                eval=eval_map,
            )
        )
    if len(models) < 2:
        fail("a workspace needs at least 2 models")

    testsets = []
    seen_ts = set()
    model_ids = {m.id for m in models}
    for i, t in enumerate(raw.get("testsets", [])):
        ctx = f"testsets[{i}]"
        for key in ("id", "origin_model", "labels"):
            if key not in t:
                fail(f"{ctx} is missing {key!r}")
        if t["id"] in seen_ts:
            fail(f"duplicate test set id {t['id']!r}")
        seen_ts.add(t["id"])
        if t["origin_model"] not in model_ids:
            fail(f"{ctx}: origin_model {t['origin_model']!r} is not a model id")
        testsets.append(TestSetEntry(id=t["id"], origin_model=t["origin_model"], labels=t["labels"]))

    owners = [t.origin_model for t in testsets]
    for m in models:
        if m.role == "reference" and owners.count(m.id) != 1:
            fail(f"reference model {m.id!r} must own exactly one test set, owns {owners.count(m.id)}")
    for t in testsets:
        for m in models:
            if m.id == t.origin_model and m.role != "reference":
                fail(f"test set {t.id!r} originates from non-reference model {m.id!r}")
    for m in models:
        for tsid in m.eval:
            if tsid not in seen_ts:
                fail(f"model {m.id!r} evals unknown test set {tsid!r}")
    return models, testsets, num_classes, options


def _check_consistency(ws: Workspace) -> None:
    root = ws.root

    def shape_of(rel):
        path = root / rel
        if not path.is_file():
            raise MissingArtifact(f"{path} does not exist")
        return peek_shape(path)

    label_len = {}
    for ts in ws.testsets.values():
        rows, cols = shape_of(ts.labels)
        if cols != 1:
            raise ShapeMismatch(f"{root / ts.labels}: labels must have one column, has {cols}")
        label_len[ts.id] = rows
        ts.size = rows
        labels = ws.testset_labels(ts.id)
        if labels.size and (labels.min() < 0 or labels.max() >= ws.num_classes):
            raise ManifestParseError(
                f"test set {ts.id!r}: label values must lie in [0, {ws.num_classes})"
            )

    train_rows = None
    for m in ws.models.values():
        fr, fd = shape_of(m.train_features)
        lr, lc = shape_of(m.train_logits)
        yr, yc = shape_of(m.train_labels)
        if yc != 1:
            raise ShapeMismatch(f"{root / m.train_labels}: labels must have one column, has {yc}")
        if not (fr == lr == yr):
            raise LengthMismatch(
                f"model {m.id!r}: train features/logits/labels disagree on rows "
                f"({fr}/{lr}/{yr})"
            )
        if lc != ws.num_classes:
            raise ShapeMismatch(
                f"model {m.id!r}: train logits have {lc} columns, num_classes is {ws.num_classes}"
            )
        if train_rows is None:
            train_rows = fr
        elif fr != train_rows:
            raise LengthMismatch(
                f"model {m.id!r}: {fr} train rows, other models have {train_rows} "
                "(all models must share train inputs)"
            )
        labels = ws.train_labels(m.id)
        if labels.size and (labels.min() < 0 or labels.max() >= ws.num_classes):
            raise ManifestParseError(
                f"model {m.id!r}: train label values must lie in [0, {ws.num_classes})"
            )
        for tsid, entry in m.eval.items():
            efr, efd = shape_of(entry["features"])
            elr, elc = shape_of(entry["logits"])
            if efr != label_len[tsid]:
                raise ShapeMismatch(
                    f"model {m.id!r} eval {tsid!r}: features have {efr} rows, "
                    f"test set has {label_len[tsid]} labels"
                )
            if elr != label_len[tsid]:
                raise ShapeMismatch(
                    f"model {m.id!r} eval {tsid!r}: logits have {elr} rows, "
                    f"test set has {label_len[tsid]} labels"
                )
            if elc != ws.num_classes:
                raise ShapeMismatch(
                    f"model {m.id!r} eval {tsid!r}: logits have {elc} columns, "
                    f"num_classes is {ws.num_classes}"
                )
            if efd != fd:
                raise ShapeMismatch(
                    f"model {m.id!r} eval {tsid!r}: features have {efd} columns, "
                    f"train features have {fd} (same layer, same width)"
                )


# ---------------------------------------------------------------------------
# derived per-model views


def predictions_of(ws: Workspace, model_id: str, testset_id: str | None = None) -> np.ndarray:
    """Predicted class per row: argmax over logit columns, ties to the lowest
    index. Train logits by default, a test set's eval logits when named."""
    if testset_id is None:
        logits = ws.train_logits(model_id)
    else:
        logits = ws.eval_logits(model_id, testset_id)
    return np.argmax(logits, axis=1).astype(np.int64)


def fault_mask(ws: Workspace, model_id: str, testset_id: str) -> np.ndarray:
    """Boolean row mask of the test set's fault-inducing inputs on a model:
    rows where the predicted class differs from the stored label."""
    preds = predictions_of(ws, model_id, testset_id)
    labels = ws.testset_labels(testset_id)
    if preds.shape[0] != labels.shape[0]:
        raise LengthMismatch(
            f"model {model_id!r} eval {testset_id!r}: {preds.shape[0]} predictions "
            f"vs {labels.shape[0]} labels"
        )
    return preds != labels


# ---------------------------------------------------------------------------
# writing (used by the synthetic benchmark and handy for fixtures)


def write_workspace(root, num_classes, model_specs, testset_specs, arrays, options=None) -> None:
    """Materialize a workspace: write every array in `arrays` (keyed by
    relative path) via the matrix writer and emit a deterministic manifest.

    model_specs / testset_specs are manifest-shaped dicts already holding the
    relative paths used as keys in `arrays`.
    """
    from .matrixio import write_matrix

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rel, arr in arrays.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_matrix(path, arr)
    manifest = {"num_classes": num_classes, "models": model_specs, "testsets": testset_specs}
    if options:
        manifest["options"] = options
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
