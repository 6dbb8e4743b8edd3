"""End-to-end exercises of the command-line verbs."""

from __future__ import annotations

import json

import numpy as np
import pytest

from sgreid.cli import build_parser, main
from sgreid.config import Config, apply_overrides, parse_config


def test_parser_verbs_and_defaults():
    parser = build_parser()
    args = parser.parse_args(["--set", "seed=1", "--set", "workdir=w", "train"])
    assert args.verb == "train"
    assert args.set == ["seed=1", "workdir=w"]
    assert args.resume is None
    args = parser.parse_args(["attribute", "--images", "a", "b"])
    assert args.images == ["a", "b"] and args.limit == 5
    args = parser.parse_args(["report", "--top", "3"])
    assert args.top == 3 and args.limit == 8
    args = parser.parse_args(["eval", "--no-rerank", "--cross-dataset"])
    assert args.no_rerank and args.cross_dataset


def test_dump_config_round_trips(capsys):
    assert main(["--set", "seed=5", "--set", "workdir=w9", "--dump-config"]) == 0
    out = capsys.readouterr().out
    assert parse_config(out) == apply_overrides(Config(), ["seed=5", "workdir=w9"])


def test_seed_flag_wins_over_config(capsys, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 3\n")
    assert main(["--config", str(cfg_file), "--seed", "77", "--dump-config"]) == 0
    assert "seed = 77\n" in capsys.readouterr().out


def test_no_verb_prints_help(capsys):
    assert main([]) == 2
    assert "usage: sgreid" in capsys.readouterr().out


def test_bad_override_is_a_user_error(capsys):
    assert main(["--set", "nope=1", "synth"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_missing_manifest_is_a_user_error(capsys, tmp_path):
    rc = main(
        ["--set", f"workdir={tmp_path}/w", "--set", f"dataset_root={tmp_path}/d", "eval"]
    )
    assert rc == 1
    assert "no manifest found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Workspace smoke: synth -> train -> eval -> embed -> attribute -> report


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    overrides = [
        f"workdir={root}/work",
        f"dataset_root={root}/synth",
        "synth_train_ids=4",
        "synth_test_ids=4",
        "synth_images_per_id=6",
        "synth_queries_per_id=2",
        "embed_dim=32",
        "backbone_dim=24",
        "graph_hidden_dim=32",
        "graph_out_dim=16",
        "train_batch_size=8",
        "train_instances_per_id=2",
        "train_epochs=2",
        "train_warmup_epochs=1",
        "eval_batch_size=16",
    ]
    argv = [x for o in overrides for x in ("--set", o)]
    assert main(argv + ["synth"]) == 0
    assert (root / "synth" / "manifest.json").exists()
    assert main(argv + ["train"]) == 0
    return root, argv


def test_train_leaves_checkpoint_and_metrics(workspace):
    root, _ = workspace
    assert (root / "work" / "ckpt" / "epoch_2").is_dir()
    metrics = (root / "work" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 1 + 2 * 3  # header + 2 epochs x 3 steps


def test_eval_writes_report(workspace, capsys):
    root, argv = workspace
    assert main(argv + ["eval", "--no-rerank"]) == 0
    out = capsys.readouterr().out
    assert "(plain):" in out and "8 queries, 16 gallery" in out
    reports = list((root / "work" / "reports").glob("*-plain/report.json"))
    assert len(reports) == 1
    doc = json.loads(reports[0].read_text())
    assert doc["reranked"] is False and doc["num_valid_queries"] == 8

    assert main(argv + ["eval"]) == 0
    assert "(re-ranked):" in capsys.readouterr().out
    assert list((root / "work" / "reports").glob("*-rerank/per_query.csv"))


def test_embed_exports_records(workspace, capsys):
    root, argv = workspace
    assert main(argv + ["embed"]) == 0
    assert "wrote 48 embedding records" in capsys.readouterr().out
    with np.load(root / "work" / "embeddings.npz", allow_pickle=False) as npz:
        assert npz["features"].shape[0] == 48


def test_attribute_writes_csv_per_query(workspace, capsys):
    root, argv = workspace
    assert main(argv + ["attribute", "--limit", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("target:") == 2 and " <- target" in out
    csvs = list((root / "work" / "attributions").glob("*.csv"))
    assert len(csvs) == 2
    header = csvs[0].read_text().splitlines()[0]
    assert header == "node_index,node_id,label,score,omitted"


def test_attribute_explicit_image(workspace, capsys):
    root, argv = workspace
    some_csv = next((root / "work" / "attributions").glob("*.csv"))
    image_id = some_csv.stem
    assert main(argv + ["attribute", "--images", image_id]) == 0
    assert f"image: {image_id}" in capsys.readouterr().out


def test_report_combines_metrics_and_attributes(workspace, capsys):
    root, argv = workspace
    assert main(argv + ["report", "--limit", "2", "--top", "4"]) == 0
    out = capsys.readouterr().out
    assert "R@1" in out
    doc = json.loads((root / "work" / "reports" / "risk_report.json").read_text())
    assert doc["queries_attributed"] == 2
    assert len(doc["top_attributes"]) <= 4
    assert "rerank_gain" in doc
    assert (root / "work" / "reports" / "risk_report.txt").exists()


def test_graphgen_serves_cache_then_replays_fixture(tmp_path, capsys):
    argv = [
        "--set",
        f"workdir={tmp_path}/work",
        "--set",
        f"dataset_root={tmp_path}/synth",
        "--set",
        "synth_train_ids=2",
        "--set",
        "synth_test_ids=2",
        "--set",
        "synth_images_per_id=2",
        "--set",
        "synth_queries_per_id=1",
    ]
    assert main(argv + ["synth"]) == 0
    capsys.readouterr()

    # without a fixture directory the verb refuses to run
    assert main(argv + ["graphgen"]) == 1
    assert "lvlm_fixture_dir" in capsys.readouterr().err

    fixtures = tmp_path / "lvlm"
    fixtures.mkdir()
    argv += ["--set", f"lvlm_fixture_dir={fixtures}"]

    # every graph was written by synth, so the first pass is all cache hits
    assert main(argv + ["graphgen"]) == 0
    assert "graphs: 8 total, 8 cached" in capsys.readouterr().out

    # drop one stored graph and serve its generation from the fixture dir
    store = tmp_path / "synth" / "graphs"
    victim = sorted(store.glob("*.json"))[0]
    fixture_text = victim.read_text(encoding="utf-8")
    (fixtures / f"{victim.stem}.txt").write_text(fixture_text, encoding="utf-8")
    victim.unlink()
    assert main(argv + ["graphgen"]) == 0
    assert "7 cached, 1 parsed" in capsys.readouterr().out
    assert victim.exists()
