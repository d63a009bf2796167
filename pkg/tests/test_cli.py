"""End-to-end command-line behavior on a miniature corpus."""

import re

import numpy as np
import pytest

from mutatt import cli
from mutatt.data import attach_detections, load_checkpoint, load_dataset, save_dataset

TINY_CFG = """\
# miniature end-to-end run
model.embed = 12
model.hidden = 10
model.visual = 16
train.batch_size = 4
train.max_iterations = 8
train.learning_rate = 0.003
train.checkpoint_every = 0
synth.num_images = 24
synth.regions_per_image = 3
synth.vocab_size = 19
synth.num_attribute_factors = 2
synth.noise_std = 0.05
"""


def result_line(output: str) -> dict:
    lines = [l for l in output.splitlines() if l.startswith("RESULT ")]
    assert len(lines) == 1, output
    return dict(kv.split("=", 1) for kv in lines[0][len("RESULT "):].split())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synth + train pipeline shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "run"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_synth_writes_dataset_and_result(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    code = cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 0
    captured = capsys.readouterr().out
    res = result_line(captured)
    assert res["status"] == "ok" and res["command"] == "synth"
    assert res["images"] == "24" and res["expressions"] == "72"
    assert "config_hash = " in captured
    for name in ("index.json", "features.bin", "vocab.txt"):
        assert (tmp_path / "o" / "dataset" / name).exists()
    assert (tmp_path / "o" / "config_resolved.txt").exists()


def test_train_reports_heldout_accuracy(workdir, capsys):
    cfg, out = workdir
    # rerun training against the existing dataset; overwrites the checkpoint
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    res = result_line(capsys.readouterr().out)
    assert res["status"] == "ok" and res["step"] == "8"
    assert 0.0 <= float(res["heldout_gt_accuracy"]) <= 1.0
    assert (out / "checkpoint.bin").exists()
    payload = load_checkpoint(out / "checkpoint.bin")
    assert payload.step == 8


def test_eval_writes_per_expression_records(workdir, capsys):
    cfg, out = workdir
    assert cli.main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    captured = capsys.readouterr().out
    res = result_line(captured)
    assert res["status"] == "ok" and res["protocol"] == "gt"
    assert "train_accuracy" in res and "heldout_accuracy" in res
    records = (out / "eval_gt_heldout.txt").read_text().splitlines()
    assert records and all(re.match(r"expr=\d+ predicted=", r) for r in records)


def test_eval_det_protocol_after_attaching_detections(workdir, tmp_path, capsys):
    cfg, out = workdir
    dataset = load_dataset(out / "dataset")
    attach_detections(dataset, jitter=0.05, seed=3)
    save_dataset(dataset, tmp_path / "det_ds")
    cfg2 = tmp_path / "det.cfg"
    cfg2.write_text(TINY_CFG + f"data.path = {tmp_path / 'det_ds'}\n")
    code = cli.main(["eval", "--config", str(cfg2), "--protocol", "det",
                     "--resume", str(out / "checkpoint.bin"),
                     "--out", str(tmp_path / "det_out")])
    assert code == 0
    res = result_line(capsys.readouterr().out)
    assert res["protocol"] == "det"
    assert (tmp_path / "det_out" / "eval_det_heldout.txt").exists()


def test_eval_det_without_detections_is_config_error(workdir, capsys):
    cfg, out = workdir
    code = cli.main(["eval", "--config", str(cfg), "--protocol", "det",
                     "--out", str(out)])
    assert code == 2
    res = result_line(capsys.readouterr().out)
    assert res["status"] == "error" and res["kind"] == "config"


def test_dump_attn_writes_numeric_records(workdir, capsys):
    cfg, out = workdir
    assert cli.main(["dump-attn", "--config", str(cfg), "--out", str(out)]) == 0
    res = result_line(capsys.readouterr().out)
    assert res["status"] == "ok" and int(res["records"]) > 0
    dump = (out / "attention_dump.txt").read_text()
    assert "word_weights:" in dump and "tokens:" in dump


def test_seed_flag_overrides_both_seeds(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert cli.main(["synth", "--config", str(cfg), "--seed", "5",
                     "--out", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    resolved = (tmp_path / "o" / "config_resolved.txt").read_text()
    assert "train.seed = 5" in resolved
    assert "synth.seed = 5" in resolved


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("synth.num_imags = 10\n")
    code = cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    out = capsys.readouterr()
    assert result_line(out.out)["kind"] == "config"
    assert "synth.num_imags" in out.err


def test_bad_ablation_mode_exits_2(tmp_path, capsys):
    code = cli.main(["train", "--ablation", "subj=sideways",
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert result_line(capsys.readouterr().out)["kind"] == "config"


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = cli.main(["synth", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert result_line(capsys.readouterr().out)["kind"] == "config"


def test_train_without_dataset_exits_1(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    assert result_line(capsys.readouterr().out)["kind"] == "runtime"


def test_eval_without_checkpoint_exits_1(workdir, tmp_path, capsys):
    cfg, out = workdir
    code = cli.main(["eval", "--config", str(cfg),
                     "--resume", str(tmp_path / "none.bin"), "--out", str(out)])
    assert code == 1
    assert result_line(capsys.readouterr().out)["kind"] == "runtime"


def test_feature_width_mismatch_is_config_error(workdir, tmp_path, capsys):
    cfg, out = workdir
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY_CFG.replace("model.visual = 16", "model.visual = 8"))
    code = cli.main(["train", "--config", str(bad), "--out", str(out)])
    assert code == 2
    assert result_line(capsys.readouterr().out)["kind"] == "config"


def test_unknown_log_level_warns_on_stderr(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MUTATT_LOG", "chatty")
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "MUTATT_LOG" in capsys.readouterr().err


def test_same_seed_checkpoints_are_bitwise_identical(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        blobs.append((out / "checkpoint.bin").read_bytes())
    capsys.readouterr()
    assert blobs[0] == blobs[1]
