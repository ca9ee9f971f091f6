"""Export trained torch classifiers into an on-disk matrix workspace.

Layout written under the output root:

    manifest.json                            model + test set registry
    checksums.json                           sha256 per matrix file
    export_state.json                        artifact paths for re-evaluation
    models/<id>/train_features.gmx           float32 (n, d)
    models/<id>/train_logits.gmx             float32 (n, C)
    models/<id>/train_labels.gmx             int64   (n, 1)
    models/<id>/eval_<testset>_features.gmx  float32 (m, d)
    models/<id>/eval_<testset>_logits.gmx    float32 (m, C)
    testsets/<id>/labels.gmx                 int64   (m, 1)
    testsets/<id>/inputs.npz                 raw inputs, kept for later models

Downstream analysis reads float32, so activations computed in any other
precision are cast on the way out; the recorded checksums are taken after
that cast, which makes the cast the documented lossy boundary.

manifest.json, checksums.json and export_state.json are replaced through a
temp file + rename, so a crash mid-export never leaves them half-written.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .capture import CONVENTIONS, FeatureTap
from .errors import (
    BatchShapeDrift,
    DataFormatError,
    ExportError,
    LabelLengthMismatch,
    WorkspaceConflict,
)
from .wire import inspect_bytes, peek_shape, read_matrix, write_matrix

ROLES = ("reference", "under_test")

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class ExportSpec:
    """One model's export instructions.

    `artifact` is a path to a module saved whole with torch.save, or an
    in-memory nn.Module.  `data` points at the training inputs/labels
    (.npz or .pt with arrays named "inputs" and "labels").
    """

    artifact: object
    data: object
    layer: str
    out: object
    model_id: str
    model_type: str
    seed: int
    role: str = "reference"
    cls_position: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if not _ID_RE.match(self.model_id or ""):
            raise ExportError(
                f"model id {self.model_id!r} must be letters, digits, '.', '_' or '-'"
            )
        if self.role not in ROLES:
            raise ExportError(f"role must be one of {ROLES}, not {self.role!r}")
        if not isinstance(self.layer, str) or not self.layer:
            raise ExportError("layer selector must be a non-empty string")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, not {self.batch_size}")


# ---------------------------------------------------------------------------
# artifact and dataset loading


def _load_model(artifact) -> nn.Module:
    if isinstance(artifact, nn.Module):
        return artifact.eval()
    path = Path(artifact)
    if not path.is_file():
        raise DataFormatError(f"model artifact {path} does not exist")
    try:
        model = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataFormatError(f"{path}: not a loadable torch module ({exc})") from exc
    if isinstance(model, torch.jit.ScriptModule):
        # scripted modules refuse post-hoc activation hooks
        raise DataFormatError(
            f"{path}: TorchScript archives cannot expose intermediate "
            "activations; save the module itself with torch.save"
        )
    if not isinstance(model, nn.Module):
        raise DataFormatError(
            f"{path}: loaded a {type(model).__name__}, expected a torch module"
        )
    return model.eval()


def _load_pairs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an inputs/labels dataset file (.npz or .pt) into numpy arrays."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"dataset {path} does not exist")
    if path.suffix == ".npz":
        with np.load(path) as bundle:
            if "inputs" not in bundle or "labels" not in bundle:
                raise DataFormatError(
                    f"{path}: needs arrays named 'inputs' and 'labels', "
                    f"has {sorted(bundle.files)}"
                )
            return np.asarray(bundle["inputs"]), np.asarray(bundle["labels"])
    if path.suffix in (".pt", ".pth"):
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        if (
            not isinstance(blob, dict)
            or not torch.is_tensor(blob.get("inputs"))
            or not torch.is_tensor(blob.get("labels"))
        ):
            raise DataFormatError(
                f"{path}: needs a dict holding 'inputs' and 'labels' tensors"
            )
        return blob["inputs"].cpu().numpy(), blob["labels"].cpu().numpy()
    raise DataFormatError(
        f"{path}: unsupported dataset format {path.suffix!r} (use .npz or .pt)"
    )


def _as_label_vector(raw, n_inputs: int, what: str) -> np.ndarray:
    arr = np.asarray(raw)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DataFormatError(f"{what}: labels must be a vector, got shape {arr.shape}")
    if arr.shape[0] != n_inputs:
        raise LabelLengthMismatch(f"{what}: {arr.shape[0]} labels for {n_inputs} inputs")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise DataFormatError(f"{what}: labels must be integers")
        arr = rounded
    if arr.size and int(arr.min()) < 0:
        raise DataFormatError(f"{what}: negative label {int(arr.min())}")
    return arr.astype(np.int64)


def _to_tensor(inputs) -> torch.Tensor:
    arr = np.asarray(inputs)
    if arr.ndim < 1 or arr.shape[0] < 1:
        raise DataFormatError("dataset has no rows")
    if np.issubdtype(arr.dtype, np.integer):
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.int64))
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def _model_float_dtype(model) -> torch.dtype:
    for p in model.parameters():
        if p.is_floating_point():
            return p.dtype
    return torch.float32


def _run_model(model, tap: FeatureTap, inputs, batch_size: int):
    """Batched forward passes; float32 (n, d) features and (n, C) logits.

    Floating inputs are fed in the model's own parameter dtype (half and
    double models exist); everything is cast to float32 on the way out.
    """
    tensor = _to_tensor(inputs)
    if tensor.is_floating_point():
        tensor = tensor.to(_model_float_dtype(model))
    feats, logits = [], []
    fd = ld = None
    for start in range(0, tensor.shape[0], batch_size):
        batch = tensor[start : start + batch_size]
        f, l = tap.run(batch)
        f = f.to(torch.float32).cpu().numpy()
        l = l.to(torch.float32).cpu().numpy()
        if fd is None:
            fd, ld = f.shape[1], l.shape[1]
        elif f.shape[1] != fd:
            raise BatchShapeDrift(
                f"features were {fd} wide, the batch at row {start} "
                f"produced {f.shape[1]}"
            )
        elif l.shape[1] != ld:
            raise BatchShapeDrift(
                f"logits were {ld} wide, the batch at row {start} "
                f"produced {l.shape[1]}"
            )
        feats.append(f)
        logits.append(l)
    return np.concatenate(feats), np.concatenate(logits)


# ---------------------------------------------------------------------------
# workspace bookkeeping (manifest, checksums, artifact state)


def _read_json(path: Path, default):
    if not path.is_file():
        return default
    try:
        return json.loads(path.read_text())
    except ValueError as exc:
        raise DataFormatError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _read_manifest(root: Path):
    raw = _read_json(root / "manifest.json", None)
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise DataFormatError(f"{root / 'manifest.json'}: top level must be an object")
    raw.setdefault("models", [])
    raw.setdefault("testsets", [])
    return raw


def _upsert(entries: list, entry: dict) -> None:
    entries[:] = [e for e in entries if e.get("id") != entry["id"]] + [entry]
    entries.sort(key=lambda e: e.get("id", ""))


def _merge_checksums(root: Path, new: dict) -> None:
    sidecar = _read_json(root / "checksums.json", {"version": 1, "sha256": {}})
    sidecar.setdefault("sha256", {}).update(new)
    _write_json(root / "checksums.json", sidecar)


def _record_state(root: Path, spec: ExportSpec) -> None:
    if isinstance(spec.artifact, (str, Path)):
        artifact = str(Path(spec.artifact).resolve())
    else:
        artifact = None
    state = _read_json(root / "export_state.json", {"version": 1, "models": {}})
    state.setdefault("models", {})[spec.model_id] = {
        "artifact": artifact,
        "layer": spec.layer,
        "cls_position": spec.cls_position,
        "batch_size": spec.batch_size,
        "model_type": spec.model_type,
        "seed": spec.seed,
        "role": spec.role,
    }
    _write_json(root / "export_state.json", state)


def _peek_cols(root: Path, rel: str):
    """Column count of an already-written matrix, or None if unreadable."""
    try:
        return peek_shape(root / rel)[1]
    except (DataFormatError, OSError):
        return None


def _peek_rows(root: Path, rel: str):
    try:
        return peek_shape(root / rel)[0]
    except (DataFormatError, OSError):
        return None


# ---------------------------------------------------------------------------
# the three operations


def export_model(spec: ExportSpec) -> dict:
    """Run the training data through the model and write its workspace entry.

    Writes train features/logits/labels, then folds the model into
    manifest.json.  Returns the manifest entry that was stored.
    """
    if spec.data is None:
        raise ExportError("spec.data must point to the training dataset")
    model = _load_model(spec.artifact)
    raw_inputs, raw_labels = _load_pairs(spec.data)
    labels = _as_label_vector(raw_labels, len(raw_inputs), str(spec.data))
    tap = FeatureTap(model, spec.layer, spec.cls_position)
    feats, logits = _run_model(model, tap, raw_inputs, spec.batch_size)
    num_classes = logits.shape[1]
    if num_classes < 2:
        raise DataFormatError(
            f"model emits {num_classes} logit column(s); a classifier needs >= 2"
        )
    if labels.size and int(labels.max()) >= num_classes:
        raise WorkspaceConflict(
            f"label {int(labels.max())} is out of range for {num_classes} logit columns"
        )

    root = Path(spec.out)
    manifest = _read_manifest(root)
    old_entry = None
    if manifest is not None:
        if manifest.get("num_classes") != num_classes:
            raise WorkspaceConflict(
                f"model emits {num_classes} logit columns, workspace expects "
                f"{manifest.get('num_classes')}"
            )
        for m in manifest["models"]:
            if m["id"] == spec.model_id:
                old_entry = m
            else:
                rows = _peek_rows(root, m["train_features"])
                if rows is not None and rows != feats.shape[0]:
                    raise WorkspaceConflict(
                        f"{spec.model_id} has {feats.shape[0]} train rows, "
                        f"{m['id']} has {rows}; all models must share the "
                        "training inputs"
                    )
        if old_entry is not None and old_entry.get("eval"):
            for tsid, ev in old_entry["eval"].items():
                cols = _peek_cols(root, ev["features"])
                if cols is not None and cols != feats.shape[1]:
                    raise WorkspaceConflict(
                        f"re-export changed the feature width from {cols} to "
                        f"{feats.shape[1]} while eval matrices for {tsid!r} "
                        "exist; re-export those too"
                    )
        if spec.role != "reference":
            owned = [
                t["id"]
                for t in manifest["testsets"]
                if t.get("origin_model") == spec.model_id
            ]
            if owned:
                raise WorkspaceConflict(
                    f"{spec.model_id} originated test set(s) {owned} and must "
                    "stay a reference model"
                )

    base = f"models/{spec.model_id}"
    rel = {
        "train_features": f"{base}/train_features.gmx",
        "train_logits": f"{base}/train_logits.gmx",
        "train_labels": f"{base}/train_labels.gmx",
    }
    sums = {
        rel["train_features"]: write_matrix(root / rel["train_features"], feats),
        rel["train_logits"]: write_matrix(root / rel["train_logits"], logits),
        rel["train_labels"]: write_matrix(root / rel["train_labels"], labels.reshape(-1, 1)),
    }
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    entry = {
        "id": spec.model_id,
        "model_type": spec.model_type,
        "seed": int(spec.seed),
        "role": spec.role,
        "train_accuracy": accuracy,
        "eval": dict(old_entry["eval"]) if old_entry and old_entry.get("eval") else {},
        **rel,
    }
    if manifest is None:
        manifest = {"num_classes": num_classes, "models": [], "testsets": []}
    _upsert(manifest["models"], entry)
    _write_json(root / "manifest.json", manifest)
    _merge_checksums(root, sums)
    _record_state(root, spec)
    return entry


def export_testset(
    spec: ExportSpec,
    testset_id: str,
    inputs,
    labels,
    origin_model: str | None = None,
) -> dict:
    """Evaluate spec's model on one test set and write its eval matrices.

    The label vector (and a stash of the raw inputs) is stored once per test
    set; calling this again with other models only adds their eval entries.
    `origin_model` names the model whose generation produced the test set and
    defaults to the exporting model itself.
    """
    if not _ID_RE.match(testset_id or ""):
        raise ExportError(
            f"test set id {testset_id!r} must be letters, digits, '.', '_' or '-'"
        )
    inputs = np.asarray(inputs)
    if inputs.ndim < 1 or inputs.shape[0] < 1:
        raise DataFormatError(f"test set {testset_id!r} has no inputs")
    y = _as_label_vector(labels, inputs.shape[0], f"test set {testset_id!r}")
    origin = origin_model if origin_model is not None else spec.model_id

    root = Path(spec.out)
    manifest = _read_manifest(root)
    if manifest is None:
        raise WorkspaceConflict(
            f"{root} has no manifest yet; export the origin model first"
        )
    models = {m["id"]: m for m in manifest["models"]}
    if spec.model_id not in models:
        raise WorkspaceConflict(
            f"model {spec.model_id!r} is not in the workspace; export it first"
        )
    if origin not in models:
        raise WorkspaceConflict(
            f"origin model {origin!r} is not in the workspace; export it first"
        )
    if models[origin]["role"] != "reference":
        raise WorkspaceConflict(
            f"origin model {origin!r} has role {models[origin]['role']!r}; "
            "test sets can only originate from reference models"
        )
    num_classes = manifest["num_classes"]
    if y.size and int(y.max()) >= num_classes:
        raise WorkspaceConflict(
            f"test set {testset_id!r}: label {int(y.max())} is out of range "
            f"for {num_classes} classes"
        )

    ts_base = f"testsets/{testset_id}"
    labels_rel = f"{ts_base}/labels.gmx"
    existing_ts = next(
        (t for t in manifest["testsets"] if t["id"] == testset_id), None
    )
    if existing_ts is not None:
        if existing_ts["origin_model"] != origin:
            raise WorkspaceConflict(
                f"test set {testset_id!r} already originates from "
                f"{existing_ts['origin_model']!r}, not {origin!r}"
            )
        stored = read_matrix(root / existing_ts["labels"])[:, 0]
        if stored.shape[0] != y.shape[0]:
            raise LabelLengthMismatch(
                f"test set {testset_id!r} is registered with {stored.shape[0]} "
                f"labels, got {y.shape[0]}"
            )
        if not np.array_equal(stored, y):
            raise WorkspaceConflict(
                f"test set {testset_id!r}: labels differ from the ones already stored"
            )
        labels_rel = existing_ts["labels"]
        stash = root / ts_base / "inputs.npz"
        if stash.is_file():
            with np.load(stash) as bundle:
                if not np.array_equal(np.asarray(bundle["inputs"]), inputs):
                    raise WorkspaceConflict(
                        f"test set {testset_id!r}: inputs differ from the stored ones"
                    )

    model = _load_model(spec.artifact)
    tap = FeatureTap(model, spec.layer, spec.cls_position)
    feats, logits = _run_model(model, tap, inputs, spec.batch_size)
    if logits.shape[1] != num_classes:
        raise WorkspaceConflict(
            f"model {spec.model_id!r} emits {logits.shape[1]} logit columns "
            f"on {testset_id!r}, workspace expects {num_classes}"
        )
    train_cols = _peek_cols(root, models[spec.model_id]["train_features"])
    if train_cols is not None and feats.shape[1] != train_cols:
        raise WorkspaceConflict(
            f"model {spec.model_id!r}: eval features are {feats.shape[1]} wide, "
            f"train features are {train_cols}; use the same layer selector"
        )

    sums = {}
    if existing_ts is None:
        sums[labels_rel] = write_matrix(root / labels_rel, y.reshape(-1, 1))
        _stash_inputs(root / ts_base / "inputs.npz", inputs)
    ev_rel = {
        "features": f"models/{spec.model_id}/eval_{testset_id}_features.gmx",
        "logits": f"models/{spec.model_id}/eval_{testset_id}_logits.gmx",
    }
    sums[ev_rel["features"]] = write_matrix(root / ev_rel["features"], feats)
    sums[ev_rel["logits"]] = write_matrix(root / ev_rel["logits"], logits)

    ts_entry = {"id": testset_id, "origin_model": origin, "labels": labels_rel}
    _upsert(manifest["testsets"], ts_entry)
    models[spec.model_id].setdefault("eval", {})[testset_id] = ev_rel
    _write_json(root / "manifest.json", manifest)
    _merge_checksums(root, sums)
    return {"testset": ts_entry, "eval": ev_rel}


def _stash_inputs(path: Path, inputs: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, inputs=inputs)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# round-trip verification


@dataclass(frozen=True)
class FileCheck:
    """Audit outcome for one matrix file (path is root-relative)."""

    path: str
    status: str
    detail: str = ""


@dataclass(frozen=True)
class RoundtripReport:
    root: str
    checks: tuple

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.checks)

    @property
    def mismatches(self) -> tuple:
        return tuple(c for c in self.checks if c.status != "ok")


def _manifest_matrix_paths(manifest) -> list:
    if not isinstance(manifest, dict):
        return []
    paths = []
    for m in manifest.get("models", []):
        if not isinstance(m, dict):
            continue
        for key in ("train_features", "train_logits", "train_labels"):
            if isinstance(m.get(key), str):
                paths.append(m[key])
        for ev in (m.get("eval") or {}).values():
            if isinstance(ev, dict):
                for key in ("features", "logits"):
                    if isinstance(ev.get(key), str):
                        paths.append(ev[key])
    for t in manifest.get("testsets", []):
        if isinstance(t, dict) and isinstance(t.get("labels"), str):
            paths.append(t["labels"])
    return paths


def verify_roundtrip(root) -> RoundtripReport:
    """Re-read every matrix the workspace references and audit its bytes.

    Each file referenced by the manifest or recorded in the checksum sidecar
    gets one check: "ok", or "missing" / "truncated" / "bad-header" /
    "checksum" / "unrecorded" / "unreadable".  Problems are reported, never
    raised, so a damaged workspace still yields a full listing.
    """
    root = Path(root)
    checks = []
    try:
        manifest = _read_manifest(root)
    except DataFormatError as exc:
        manifest = None
        checks.append(FileCheck("manifest.json", "unreadable", str(exc)))
    try:
        recorded = _read_json(root / "checksums.json", {"sha256": {}}).get("sha256", {})
    except DataFormatError as exc:
        recorded = {}
        checks.append(FileCheck("checksums.json", "unreadable", str(exc)))

    for rel in sorted(set(_manifest_matrix_paths(manifest)) | set(recorded)):
        path = root / rel
        if not path.is_file():
            checks.append(FileCheck(rel, "missing"))
            continue
        if rel not in recorded:
            checks.append(
                FileCheck(rel, "unrecorded", "matrix on disk but never checksummed")
            )
            continue
        try:
            blob = path.read_bytes()
        except OSError as exc:
            checks.append(FileCheck(rel, "unreadable", str(exc)))
            continue
        status, detail = inspect_bytes(blob)
        if status != "ok":
            checks.append(FileCheck(rel, status, detail))
            continue
        if hashlib.sha256(blob).hexdigest() != recorded[rel]:
            checks.append(
                FileCheck(rel, "checksum", "contents changed since export")
            )
            continue
        checks.append(FileCheck(rel, "ok"))
    return RoundtripReport(root=str(root), checks=tuple(checks))
