"""Acceptance: an exported toy workspace is accepted end to end.

A workspace built purely through the command line flow must (1) pass the
analysis toolkit's own `validate` command in a separate process, (2) audit
clean under verify_roundtrip, and (3) read back through the toolkit's matrix
reader exactly the tensors the models produced, cast to float32.  The cast
is the one permitted difference between what a model computes and what lands
on disk.
"""
import subprocess
import sys

import numpy as np
import pytest
import torch

from gist_export.export import verify_roundtrip

from toynets import build_cli_root, conv_logits, conv_pool_output


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    return build_cli_root(tmp_path_factory.mktemp("acceptance"))


def test_toolkit_validate_accepts_the_workspace(exported):
    proc = subprocess.run(
        [sys.executable, "-m", "gist_kit.cli", "validate", str(exported.root)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "ok: 2 models, 2 test sets" in proc.stdout


def test_roundtrip_audit_reports_zero_mismatches(exported):
    report = verify_roundtrip(exported.root)
    assert report.mismatches == ()
    # 2 models x (3 train + 2 test sets x 2 eval) + 2 label files
    assert len(report.checks) == 16
    assert report.ok


def test_toolkit_reads_back_the_cast_tensors(exported):
    from gist_kit import load_workspace, read_matrix

    x_train, y_train = exported.train
    for mid, net in exported.nets.items():
        base = exported.root / "models" / mid
        assert np.array_equal(
            read_matrix(base / "train_features.gmx"),
            conv_pool_output(net, x_train),
        )
        assert np.array_equal(
            read_matrix(base / "train_logits.gmx"),
            conv_logits(net, x_train),
        )
        labels = read_matrix(base / "train_labels.gmx")
        assert labels.dtype == np.int64
        assert np.array_equal(labels[:, 0], y_train)

    ws = load_workspace(exported.root)
    for tsid, (x, y) in exported.testdata.items():
        assert np.array_equal(ws.testset_labels(tsid), np.asarray(y, dtype=np.int64))
        for mid, net in exported.nets.items():
            assert np.array_equal(ws.eval_features(mid, tsid), conv_pool_output(net, x))
            assert np.array_equal(ws.eval_logits(mid, tsid), conv_logits(net, x))


def test_half_precision_model_lands_as_float32(tmp_path):
    """A model computing in float16 exports float32 files; the cast happens
    on the way out and the checksums are taken after it."""
    from gist_export.export import ExportSpec, export_model
    from toynets import conv_net, image_data, save_npz

    net = conv_net(9).half()
    rng = np.random.default_rng(9)
    x, y = image_data(rng, 8)
    save_npz(tmp_path / "train.npz", x, y)
    export_model(
        ExportSpec(
            artifact=net, data=tmp_path / "train.npz", layer="penultimate-pool",
            out=tmp_path / "ws", model_id="half", model_type="convnet", seed=9,
        )
    )
    from gist_kit import read_matrix

    stored = read_matrix(tmp_path / "ws/models/half/train_features.gmx")
    with torch.no_grad():
        raw = net[:3](torch.as_tensor(x).half()).reshape(8, -1)
    assert stored.dtype == np.float32
    assert np.array_equal(stored, raw.to(torch.float32).numpy())

    report = verify_roundtrip(tmp_path / "ws")
    assert report.ok
