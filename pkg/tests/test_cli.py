import csv
import json

import numpy as np
import pytest

from aavs.cli import main
from aavs.metrics import SegmentationAccumulator
from aavs.pipeline import load_split_dir
from aavs.synthdata import load_dataset
from aavs.tensorio import load_bundle

TINY_YAML = """
data: {train_clips: 3, eval_clips: 2,
       overrides: {height: 64, width: 64, frames: 2, num_classes: 4, audio_dim: 8}}
model: {dim: 16, widths: [8, 8, 16, 16], num_queries: 4, num_stages: 1, heads: 2, ffn_dim: 32}
train: {steps: 2, log_every: 0}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY_YAML)
    cfg = str(root / "tiny.yaml")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "ds"), "--clips", "3", "--test-clips", "2"]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "ds"), "--out", str(root / "ck")]) == 0
    return root


def test_gen_data_valid(workspace):
    samples, manifest = load_dataset(workspace / "ds" / "train")
    assert len(samples) == manifest.num_clips == 3
    assert load_dataset(workspace / "ds" / "test")[1].num_clips == 2


def test_gen_data_refuses_non_empty(workspace):
    assert main(["gen-data", "--out", str(workspace / "ds"), "--clips", "1"]) == 2
    assert main(["gen-data", "--out", str(workspace / "ds2"), "--clips", "0"]) == 2


def test_gen_data_force_is_idempotent(tmp_path):
    args = ["gen-data", "--out", str(tmp_path / "d"), "--clips", "2", "--seed", "4", "--preset", "s4"]
    assert main(args) == 0
    first = (tmp_path / "d" / "train" / "manifest.json").read_text()
    assert main(args + ["--force"]) == 0
    assert (tmp_path / "d" / "train" / "manifest.json").read_text() == first


def test_ms3_preset_has_multiple_sources(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--clips", "6", "--preset", "ms3"]) == 0
    _, manifest = load_dataset(tmp_path / "d" / "train")
    for events in manifest.sounding_event_log.values():
        assert len({c for frame in events for c in frame}) >= 2


def test_eval_untrained_and_repeatable(workspace):
    ck, ds = str(workspace / "ck"), str(workspace / "ds")
    assert main(["train", "--config", str(workspace / "tiny.yaml"), "--data", ds, "--steps", "0",
                 "--out", str(workspace / "ck0")]) == 0
    out0 = workspace / "untrained.json"
    assert main(["eval", "--ckpt", str(workspace / "ck0"), "--data", ds, "--json", str(out0)]) == 0
    doc = json.loads(out0.read_text())
    assert {"miou", "fscore", "per_class_iou"} <= set(doc)
    a, b = workspace / "a.json", workspace / "b.json"
    assert main(["eval", "--ckpt", ck, "--data", ds, "--json", str(a), "--prior", "corrupted:0.5"]) == 0
    assert main(["eval", "--ckpt", ck, "--data", ds, "--json", str(b), "--prior", "corrupted:0.5"]) == 0
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    da.pop("predictions"), db.pop("predictions")
    assert da == db


def test_eval_matches_offline_metrics(workspace):
    out = workspace / "e.json"
    assert main(["eval", "--ckpt", str(workspace / "ck"), "--data", str(workspace / "ds"), "--json", str(out)]) == 0
    doc = json.loads(out.read_text())
    preds = load_bundle(workspace / doc["predictions"])
    samples, manifest = load_split_dir(workspace / "ds", "test")
    acc = SegmentationAccumulator(manifest.C)
    for s in samples:
        acc.update(preds[s.clip_id], s.sounding_semantic)
    assert acc.miou() == doc["miou"] and acc.fscore() == doc["fscore"]


def test_sensitivity_and_report(workspace):
    sens = workspace / "sens.json"
    assert main(["sensitivity", "--ckpt", str(workspace / "ck"), "--data", str(workspace / "ds"),
                 "--json", str(sens), "--levels", "oracle", "0.9", "0.4", "--seed", "3"]) == 0
    rows = json.loads(sens.read_text())["rows"]
    assert [r["level"] for r in rows] == ["oracle", "corrupted:0.9", "corrupted:0.4"]
    out = workspace / "rep"
    assert main(["report", "--inputs", str(sens), "--out", str(out)]) == 0
    assert (out / "sensitivity.png").stat().st_size > 0
    with open(out / "sensitivity.csv") as fh:
        plotted = list(csv.DictReader(fh))
    assert [float(p["miou"]) for p in plotted] == [r["miou"] for r in rows]
    assert [float(p["quality"]) for p in plotted] == [1.0, 0.9, 0.4]


def test_report_single_input(workspace, tmp_path):
    ev = tmp_path / "ev.json"
    ev.write_text(json.dumps({"kind": "eval", "miou": 0.5, "fscore": 0.6, "prior": "corrupted:0.7"}))
    assert main(["report", "--inputs", str(ev), "--out", str(tmp_path / "r")]) == 0
    table = (tmp_path / "r" / "summary.md").read_text().strip().splitlines()
    assert len(table) == 3 and "0.5000" in table[-1]


def test_report_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["report", "--inputs", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "malformed" in capsys.readouterr().err
    bad.write_text(json.dumps({"kind": "eval"}))
    assert main(["report", "--inputs", str(bad), "--out", str(tmp_path / "r2")]) == 2


def test_config_dump_and_env(tmp_path, monkeypatch, capsys):
    assert main(["config", "dump"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["lr"] == 1e-4
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 0.5}}))
    monkeypatch.setenv("AAVS_CONFIG", str(tmp_path / "c.json"))
    assert main(["config", "dump", "--seed", "9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["train"]["lr"] == 0.5 and doc["seed"] == 9


def test_bad_inputs_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus-flag"])
    assert e.value.code == 2
    (tmp_path / "c.json").write_text(json.dumps({"nonsense": 1}))
    assert main(["config", "dump", "--config", str(tmp_path / "c.json")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--json", str(tmp_path / "o.json")]) == 2


def test_every_command_accepts_seed_and_config():
    from aavs.cli import build_parser
    parser = build_parser()
    for argv in (["gen-data", "--out", "x", "--clips", "1"], ["train", "--out", "x"],
                 ["eval", "--ckpt", "x", "--json", "y"], ["sensitivity", "--ckpt", "x", "--json", "y"],
                 ["ablation", "--json", "x"], ["report", "--inputs", "x", "--out", "y"]):
        args = parser.parse_args(argv + ["--seed", "3", "--config", "c.yaml"])
        assert args.seed == 3 and args.config == "c.yaml"


def test_ablation_command(workspace):
    out = workspace / "abl.json"
    assert main(["ablation", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "ds"),
                 "--json", str(out), "--seeds", "0", "--parts", "queries", "--steps", "1"]) == 0
    assert json.loads(out.read_text())["queries"]["rows"][1]["variant"] == "adaptive"
