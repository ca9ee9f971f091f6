"""Shared fixture helpers: tiny on-disk workspaces built from random arrays."""

import numpy as np
import pytest

from gist_kit.workspace import load_workspace, write_workspace


def build_workspace(
    root,
    n_models=3,
    n_train=20,
    d=4,
    num_classes=3,
    n_test=10,
    seed=0,
    model_types=None,
    roles=None,
    train_accuracy=None,
    logit_maker=None,
):
    """Write a small but fully consistent workspace and return its root.

    Every reference model owns one test set; every model evals every test
    set. Arrays are random unless logit_maker(rng, rows, num_classes, model
    index) is given.
    """
    rng = np.random.default_rng(seed)
    if model_types is None:
        model_types = [f"type{i}" for i in range(n_models)]
    if roles is None:
        roles = ["reference"] * n_models
    ids = [f"m{i}" for i in range(n_models)]

    def logits(rows, i):
        if logit_maker is not None:
            return logit_maker(rng, rows, num_classes, i)
        return rng.normal(size=(rows, num_classes)).astype(np.float32)

    arrays = {}
    model_specs = []
    testset_specs = []
    ts_ids = [f"ts{i}" for i, role in enumerate(roles) if role == "reference"]
    ts_owner = [ids[i] for i, role in enumerate(roles) if role == "reference"]
    for tsid, owner in zip(ts_ids, ts_owner):
        arrays[f"{tsid}_labels.gmx"] = rng.integers(0, num_classes, size=(n_test, 1))
        testset_specs.append(
            {"id": tsid, "origin_model": owner, "labels": f"{tsid}_labels.gmx"}
        )

    for i, mid in enumerate(ids):
        arrays[f"{mid}_train_f.gmx"] = rng.normal(size=(n_train, d)).astype(np.float32)
        arrays[f"{mid}_train_l.gmx"] = logits(n_train, i)
        arrays[f"{mid}_train_y.gmx"] = rng.integers(0, num_classes, size=(n_train, 1))
        eval_map = {}
        for tsid in ts_ids:
            arrays[f"{mid}_{tsid}_f.gmx"] = rng.normal(size=(n_test, d)).astype(np.float32)
            arrays[f"{mid}_{tsid}_l.gmx"] = logits(n_test, i)
            eval_map[tsid] = {"features": f"{mid}_{tsid}_f.gmx", "logits": f"{mid}_{tsid}_l.gmx"}
        spec = {
            "id": mid,
            "model_type": model_types[i],
            "seed": i,
            "role": roles[i],
            "train_features": f"{mid}_train_f.gmx",
            "train_logits": f"{mid}_train_l.gmx",
            "train_labels": f"{mid}_train_y.gmx",
            "eval": eval_map,
        }
        if train_accuracy is not None:
            spec["train_accuracy"] = train_accuracy[i]
        model_specs.append(spec)

    write_workspace(root, num_classes, model_specs, testset_specs, arrays)
    return root


@pytest.fixture
def tiny_ws(tmp_path):
    build_workspace(tmp_path / "ws")
    return load_workspace(tmp_path / "ws")
