"""Command line front end.

    gist-export model --artifact net.pt --data train.npz --id resnet_a \\
        --type resnet --seed 0 --layer penultimate-pool --out WORKSPACE
    gist-export testset --id ts_resnet_a --origin resnet_a --data ts.npz --out WORKSPACE
    gist-export verify WORKSPACE

`model` exports one trained classifier and then back-fills eval matrices for
every test set already registered in the workspace.  `testset` registers a
test set and evaluates every previously exported model on it, so the two
commands can run in any order and the workspace converges to full coverage.

Exit codes: 0 on success, 1 for export problems (bad layer, conflicting
data, failed verification), 2 for operating-system errors.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .capture import CONVENTIONS
from .errors import ExportError
from .export import (
    ROLES,
    ExportSpec,
    _load_pairs,
    _read_json,
    export_model,
    export_testset,
    verify_roundtrip,
)
from .wire import read_matrix


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="gist-export",
        description="Dump trained torch classifiers into a matrix workspace.",
    )
    sub = top.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="export one model's train matrices")
    model.add_argument("--artifact", required=True, help="module saved with torch.save")
    model.add_argument("--data", required=True, help=".npz or .pt with inputs/labels")
    model.add_argument("--id", required=True, dest="model_id", help="model id")
    model.add_argument("--type", required=True, dest="model_type", help="architecture family")
    model.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    model.add_argument(
        "--layer",
        required=True,
        help=f"module name or one of {', '.join(CONVENTIONS)}",
    )
    model.add_argument(
        "--cls-position",
        type=int,
        default=0,
        help="sequence position for cls-token (default 0, use -1 for end)",
    )
    model.add_argument("--role", choices=ROLES, default="reference")
    model.add_argument("--batch-size", type=int, default=64)
    model.add_argument("--out", required=True, help="workspace root")

    testset = sub.add_parser("testset", help="register a test set and evaluate models")
    testset.add_argument("--id", required=True, dest="testset_id", help="test set id")
    testset.add_argument("--origin", required=True, help="id of the model it was generated on")
    testset.add_argument("--data", required=True, help=".npz or .pt with inputs/labels")
    testset.add_argument("--out", required=True, help="workspace root")

    verify = sub.add_parser("verify", help="audit every exported matrix file")
    verify.add_argument("root", help="workspace root")
    return top


def _spec_from_state(model_id: str, recorded: dict, out) -> ExportSpec | None:
    artifact = recorded.get("artifact")
    if not artifact:
        return None
    return ExportSpec(
        artifact=artifact,
        data=None,
        layer=recorded["layer"],
        out=out,
        model_id=model_id,
        model_type=recorded.get("model_type", ""),
        seed=recorded.get("seed", 0),
        role=recorded.get("role", "reference"),
        cls_position=recorded.get("cls_position", 0),
        batch_size=recorded.get("batch_size", 64),
    )


def _stashed_testsets(root: Path) -> list:
    """Test sets that keep their raw inputs next to the labels."""
    manifest = _read_json(root / "manifest.json", {}) or {}
    out = []
    for entry in manifest.get("testsets", []):
        tsid = entry.get("id")
        stash = root / "testsets" / str(tsid) / "inputs.npz"
        if tsid and stash.is_file():
            out.append((tsid, entry["origin_model"], entry["labels"], stash))
    return out


def _cmd_model(args) -> int:
    spec = ExportSpec(
        artifact=args.artifact,
        data=args.data,
        layer=args.layer,
        out=args.out,
        model_id=args.model_id,
        model_type=args.model_type,
        seed=args.seed,
        role=args.role,
        cls_position=args.cls_position,
        batch_size=args.batch_size,
    )
    entry = export_model(spec)
    print(f"model {spec.model_id}: train matrices written, accuracy {entry['train_accuracy']:.4f}")
    root = Path(args.out)
    for tsid, origin, labels_rel, stash in _stashed_testsets(root):
        with np.load(stash) as bundle:
            inputs = np.asarray(bundle["inputs"])
        labels = read_matrix(root / labels_rel)[:, 0]
        export_testset(spec, tsid, inputs, labels, origin_model=origin)
        print(f"model {spec.model_id} evaluated on {tsid}")
    return 0


def _cmd_testset(args) -> int:
    root = Path(args.out)
    inputs, labels = _load_pairs(args.data)
    state = _read_json(root / "export_state.json", {"models": {}}).get("models", {})
    specs = []
    for model_id in sorted(state):
        spec = _spec_from_state(model_id, state[model_id], args.out)
        if spec is None:
            print(
                f"note: model {model_id} has no recorded artifact path; "
                "re-run `gist-export model` to evaluate it",
                file=sys.stderr,
            )
            continue
        specs.append(spec)
    if not specs:
        raise ExportError(
            f"{root} records no model artifacts; run `gist-export model` first"
        )
    for spec in specs:
        export_testset(spec, args.testset_id, inputs, labels, origin_model=args.origin)
        print(f"model {spec.model_id} evaluated on {args.testset_id}")
    return 0


def _cmd_verify(args) -> int:
    report = verify_roundtrip(args.root)
    for check in report.mismatches:
        detail = f" ({check.detail})" if check.detail else ""
        print(f"FLAG {check.path}: {check.status}{detail}")
    if report.ok:
        print(f"all {len(report.checks)} files verified")
        return 0
    print(f"checked {len(report.checks)} files, {len(report.mismatches)} flagged")
    return 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"model": _cmd_model, "testset": _cmd_testset, "verify": _cmd_verify}
    try:
        return handler[args.command](args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
