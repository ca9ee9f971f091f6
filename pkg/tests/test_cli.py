"""End-to-end tests for the `gist` command line."""

import csv
import json
import shutil
from pathlib import Path

import pytest
from click.testing import CliRunner

from gist_kit.cli import main
from gist_kit.errors import MissingArtifact
from gist_kit.synth import PLANTED_METRICS, SynthConfig, generate_benchmark


@pytest.fixture(scope="module")
def zoo_root(tmp_path_factory):
    """Default synthetic workspace: 4 types x 3 seeds."""
    root = tmp_path_factory.mktemp("cli_zoo") / "ws"
    generate_benchmark(SynthConfig(), root)
    return root


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_small") / "ws"
    generate_benchmark(
        SynthConfig(n_types=2, seeds_per_type=2, feature_dim=8, n_train=32,
                    n_test_per_set=48),
        root,
    )
    return root


@pytest.fixture
def runner():
    return CliRunner()


# ---------------------------------------------------------------------------
# validate


def test_validate_clean_workspace(runner, zoo_root):
    result = runner.invoke(main, ["validate", str(zoo_root)])
    assert result.exit_code == 0
    assert "12 models" in result.output


def test_validate_names_the_missing_file(runner, small_root, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(small_root, broken)
    victim = next(broken.glob("*.gmx"))
    victim.unlink()
    result = runner.invoke(main, ["validate", str(broken)])
    assert result.exit_code == 1
    assert victim.name in result.output


def test_validate_malformed_manifest(runner, small_root, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(small_root, broken)
    (broken / "manifest.json").write_text("{not json")
    result = runner.invoke(main, ["validate", str(broken)])
    assert result.exit_code == 1


def test_validate_unreadable_root(runner, monkeypatch, tmp_path):
    def denied(root):
        raise PermissionError(f"cannot read {root}")

    monkeypatch.setattr("gist_kit.cli.load_workspace", denied)
    result = runner.invoke(main, ["validate", str(tmp_path)])
    assert result.exit_code == 2


def test_validate_missing_root(runner, tmp_path):
    result = runner.invoke(main, ["validate", str(tmp_path / "nope")])
    assert result.exit_code == 1
    assert "nope" in result.output


# ---------------------------------------------------------------------------
# offline


def test_offline_picks_a_planted_metric(runner, zoo_root, tmp_path):
    out = tmp_path / "report"
    result = runner.invoke(main, ["offline", str(zoo_root), "--out", str(out)])
    assert result.exit_code == 0
    chosen = result.output.split("chosen=")[1].strip()
    assert chosen in PLANTED_METRICS

    payload = json.loads((out / "offline.json").read_text())
    assert payload["status"] == "ok"
    assert payload["chosen_proxy"] == chosen
    agg_rows = list(csv.reader((out / "offline_aggregates.csv").open()))
    assert len(agg_rows) == 1 + 6
    cell_rows = list(csv.reader((out / "offline_cells.csv").open()))
    assert len(cell_rows) == 1 + 12 * 6


def test_offline_all_tied_exits_3_but_still_reports(runner, zoo_root, tmp_path):
    out = tmp_path / "report"
    result = runner.invoke(
        main, ["offline", str(zoo_root), "--metrics", "jdiv", "--out", str(out)]
    )
    assert result.exit_code == 3
    payload = json.loads((out / "offline.json").read_text())
    assert payload["status"] == "no_usable_proxy"
    assert payload["chosen_proxy"] is None


@pytest.mark.parametrize(
    "flags",
    [
        ["--metrics", "cosine"],
        ["--metrics", ""],
        ["--property", "branch"],
    ],
)
def test_offline_rejects_bad_names(runner, small_root, flags):
    result = runner.invoke(main, ["offline", str(small_root), *flags])
    assert result.exit_code == 1


def test_offline_reruns_byte_identically(runner, zoo_root, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(
            main,
            ["offline", str(zoo_root), "--metrics", "cka", "--out", str(tmp_path / name)],
        )
        assert result.exit_code == 0
    for filename in ("offline.json", "offline_cells.csv", "offline_aggregates.csv"):
        assert (tmp_path / "a" / filename).read_bytes() == (
            tmp_path / "b" / filename
        ).read_bytes()


def test_offline_malformed_workspace(runner, small_root, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(small_root, broken)
    (broken / "manifest.json").write_text('{"models": []}')
    result = runner.invoke(main, ["offline", str(broken)])
    assert result.exit_code == 1


# ---------------------------------------------------------------------------
# select


def test_select_top1_prints_one_id(runner, small_root):
    result = runner.invoke(
        main, ["select", str(small_root), "--mut", "t0_s0", "--metric", "cka"]
    )
    assert result.exit_code == 0
    lines = result.output.splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("ts_t1_")


def test_select_writes_the_plan(runner, small_root, tmp_path):
    plan_path = tmp_path / "plan.json"
    result = runner.invoke(
        main,
        ["select", str(small_root), "--mut", "t0_s0", "--metric", "pwcca",
         "--strategy", "topn:2", "--out", str(plan_path)],
    )
    assert result.exit_code == 0
    plan = json.loads(plan_path.read_text())
    assert plan["mut"] == "t0_s0"
    assert plan["strategy"]["name"] == "topn"
    assert len(plan["chosen"]) == 2
    assert result.output.splitlines() == plan["chosen"]


def test_select_random_is_reproducible(runner, zoo_root):
    args = ["select", str(zoo_root), "--mut", "t0_s0", "--metric", "cka",
            "--strategy", "random:2:3:7"]
    first = runner.invoke(main, args)
    second = runner.invoke(main, args)
    assert first.exit_code == second.exit_code == 0
    assert first.output == second.output
    assert len(first.output.splitlines()) == 3  # one line per draw


@pytest.mark.parametrize(
    "flags,needle",
    [
        (["--mut", "nosuch", "--metric", "cka"], "nosuch"),
        (["--mut", "t0_s0", "--metric", "cosine"], "cosine"),
        (["--mut", "t0_s0", "--metric", "cka", "--strategy", "topn:0"], "topn:0"),
        (["--mut", "t0_s0", "--metric", "cka", "--strategy", "apex:2"], "apex"),
        (["--mut", "t0_s0", "--metric", "cka", "--strategy", "ebf:3"], "3"),
    ],
)
def test_select_user_errors_exit_1(runner, small_root, flags, needle):
    result = runner.invoke(main, ["select", str(small_root), *flags])
    assert result.exit_code == 1
    assert needle in result.output


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_means_and_rows(runner, small_root, tmp_path):
    out = tmp_path / "topk.json"
    result = runner.invoke(
        main,
        ["eval", str(small_root), "--mut", "t0_s0", "--metric", "cka",
         "--k", "2", "--out", str(out)],
    )
    assert result.exit_code == 0
    assert "mean_beat_fraction=" in result.output
    payload = json.loads(out.read_text())
    assert payload["mut"] == "t0_s0"
    assert len(payload["rows"]) == 2


def test_eval_k_too_large(runner, small_root):
    result = runner.invoke(
        main, ["eval", str(small_root), "--mut", "t0_s0", "--metric", "cka", "--k", "9"]
    )
    assert result.exit_code == 1


# ---------------------------------------------------------------------------
# report


def test_heatmap_csv_is_square_with_empty_diagonal(runner, zoo_root):
    result = runner.invoke(main, ["report", "heatmap", str(zoo_root), "--metric", "cka"])
    assert result.exit_code == 0
    rows = list(csv.reader(result.output.splitlines()))
    assert rows[0] == ["mut_type", "t0", "t1", "t2", "t3"]
    assert len(rows) == 5
    for i in range(4):
        assert rows[1 + i][1 + i] == ""


def test_heatmap_property_view(runner, zoo_root, tmp_path):
    out = tmp_path / "hm.csv"
    result = runner.invoke(
        main,
        ["report", "heatmap", str(zoo_root), "--property", "kmnc", "--out", str(out)],
    )
    assert result.exit_code == 0
    assert len(out.read_text().splitlines()) == 5


@pytest.mark.parametrize("flags", [[], ["--metric", "cka", "--property", "kmnc"]])
def test_heatmap_needs_exactly_one_view(runner, zoo_root, flags):
    result = runner.invoke(main, ["report", "heatmap", str(zoo_root), *flags])
    assert result.exit_code == 1


def test_dendrogram_tree_shape(runner, zoo_root):
    result = runner.invoke(
        main, ["report", "dendrogram", str(zoo_root), "--mut", "t0_s0"]
    )
    assert result.exit_code == 0
    tree = json.loads(result.output)
    assert len(tree["leaves"]) == 12
    assert len(tree["merges"]) == 11


def test_efficiency_index_numbers(runner):
    result = runner.invoke(
        main,
        ["report", "efficiency", "--coverage", "0.75", "--offline-seconds", "10",
         "--online-seconds-per-model", "5", "--generation-seconds", "30"],
    )
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload == {"t": 0.5, "r": 1.5, "n_models": 1}


@pytest.mark.parametrize(
    "flags",
    [
        ["--coverage", "2.0", "--offline-seconds", "1",
         "--online-seconds-per-model", "1", "--generation-seconds", "1"],
        ["--coverage", "0.5", "--offline-seconds", "1",
         "--online-seconds-per-model", "1", "--generation-seconds", "ten"],
    ],
)
def test_efficiency_rejects_bad_inputs(runner, flags):
    result = runner.invoke(main, ["report", "efficiency", *flags])
    assert result.exit_code == 1


def test_out_path_under_a_file_is_io_error(runner, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    result = runner.invoke(
        main,
        ["report", "efficiency", "--coverage", "1", "--offline-seconds", "1",
         "--online-seconds-per-model", "1", "--generation-seconds", "2",
         "--out", str(blocker / "sub.json")],
    )
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# config file and environment


def test_config_file_supplies_defaults(runner, zoo_root, tmp_path):
    cfg = tmp_path / "gist.toml"
    cfg.write_text('[offline]\nmetrics = "jdiv"\n')
    result = runner.invoke(main, ["--config", str(cfg), "offline", str(zoo_root)])
    assert result.exit_code == 3  # all-tied metric came from the config file


def test_explicit_flag_beats_config_file(runner, zoo_root, tmp_path):
    cfg = tmp_path / "gist.toml"
    cfg.write_text('[offline]\nmetrics = "jdiv"\n')
    result = runner.invoke(
        main, ["--config", str(cfg), "offline", str(zoo_root), "--metrics", "cka"]
    )
    assert result.exit_code == 0


def test_json_config_file(runner, small_root, tmp_path):
    cfg = tmp_path / "gist.json"
    cfg.write_text(json.dumps({"select": {"strategy": "topn:2"}}))
    result = runner.invoke(
        main,
        ["--config", str(cfg), "select", str(small_root), "--mut", "t0_s0",
         "--metric", "cka"],
    )
    assert result.exit_code == 0
    assert len(result.output.splitlines()) == 2


@pytest.mark.parametrize("body", ["not toml [", '["half"'])
def test_malformed_config_file_exits_2(runner, tmp_path, body):
    cfg = tmp_path / "gist.toml"
    cfg.write_text(body)
    result = runner.invoke(main, ["--config", str(cfg), "validate", str(tmp_path)])
    assert result.exit_code == 2


def test_missing_config_file_exits_2(runner, tmp_path):
    result = runner.invoke(
        main, ["--config", str(tmp_path / "nope.toml"), "validate", str(tmp_path)]
    )
    assert result.exit_code == 2


def test_cache_dir_env_is_used(runner, small_root, tmp_path):
    cache_dir = tmp_path / "cache"
    args = ["select", str(small_root), "--mut", "t0_s0", "--metric", "pwcca"]
    env = {"GIST_CACHE_DIR": str(cache_dir)}
    first = runner.invoke(main, args, env=env)
    assert first.exit_code == 0
    assert list(cache_dir.glob("*.json"))
    second = runner.invoke(main, args, env=env)
    assert second.output == first.output


def test_jobs_env_smoke(runner, zoo_root):
    result = runner.invoke(
        main,
        ["offline", str(zoo_root), "--metrics", "cka"],
        env={"GIST_JOBS": "2"},
    )
    assert result.exit_code == 0


# ---------------------------------------------------------------------------
# synth


def test_synth_subcommand_generates_valid_workspace(runner, tmp_path):
    out = tmp_path / "ws"
    args = ["synth", "--out", str(out), "--n-types", "2", "--seeds-per-type", "2",
            "--feature-dim", "8", "--n-train", "32", "--n-test-per-set", "48"]
    result = runner.invoke(main, args)
    assert result.exit_code == 0
    check = runner.invoke(main, ["validate", str(out)])
    assert check.exit_code == 0


def test_synth_rejects_bad_config(runner, tmp_path):
    result = runner.invoke(main, ["synth", "--out", str(tmp_path / "ws"), "--n-types", "1"])
    assert result.exit_code == 1
