"""Acceptance gate: one printed pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or plain pytest; the
verdict lines bypass capture either way). The learning criteria train nine
full models and dominate the suite's runtime.
"""

import time

import numpy as np
import pytest

from mutatt import cli
from mutatt.data import Dataset, ExpressionRecord, ImageRecord, Region
from mutatt.evaluation import evaluate_det, iou
from mutatt.language import Vocabulary, encode_tokens
from mutatt.params import ModelDims, ModelParams
from mutatt.tensor import Tensor
from mutatt.training import ranking_loss
from mutatt.verify import (check_model_gradients, check_normalization,
                           check_oracle_equivalence)
from mutatt.visual import Box

SEEDS = (0, 1, 2)


def _verdict(capsys, ok: bool, name: str, detail: str) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def test_gradients_match_finite_differences(capsys):
    start = time.monotonic()
    res = check_model_gradients(seed=0, tol=1e-4,
                                dims=ModelDims(vocab_size=10, embed=16,
                                               hidden=16, visual=8))
    took = time.monotonic() - start
    ok = res.ok and took < 60.0
    _verdict(capsys, ok, "analytic gradients vs central differences",
             f"{res.detail}, {took:.1f}s (limit 60s)")
    assert ok


def test_scorer_agrees_with_straight_line_reimplementation(capsys):
    start = time.monotonic()
    res = check_oracle_equivalence(seed=0, instances=100, tol=1e-10)
    took = time.monotonic() - start
    ok = res.ok and took < 10.0
    _verdict(capsys, ok, "pipeline vs independent rescorer",
             f"{res.detail}, {took:.1f}s (limit 10s)")
    assert ok


def test_normalization_invariants_hold(capsys):
    res = check_normalization(seed=0, trials=1000, tol=1e-12)
    _verdict(capsys, res.ok, "normalization invariants (1000 trials)", res.detail)
    assert res.ok


def test_full_guidance_learns_the_synthetic_task(capsys, trained_arms):
    accs = {s: trained_arms(s, "mutual") for s in SEEDS}
    times = [trained_arms.timings[(s, "mutual")] for s in SEEDS]
    ok = all(a >= 0.95 for a in accs.values()) and all(t < 300.0 for t in times)
    detail = ", ".join(f"seed {s}: {a:.4f}" for s, a in accs.items())
    detail += f"; slowest run {max(times):.0f}s (limits: 0.95, 300s)"
    _verdict(capsys, ok, "held-out accuracy with full guidance", detail)
    assert ok


def test_guidance_modes_are_ordered(capsys, trained_arms):
    means = {mode: float(np.mean([trained_arms(s, mode) for s in SEEDS]))
             for mode in ("mutual", "vl", "none")}
    gap = means["mutual"] - means["none"]
    ok = (means["mutual"] >= means["vl"] >= means["none"]) and gap >= 0.01
    detail = (f"mutual {means['mutual']:.4f} >= vl {means['vl']:.4f} "
              f">= none {means['none']:.4f}, full-vs-none gap {gap:.4f} "
              f"(needs >= 0.01)")
    _verdict(capsys, ok, "3-seed mean ordering of guidance modes", detail)
    assert ok


def _det_instance(det_box: Box):
    """One image, one annotated region, one detected region, one expression."""
    vocab = Vocabulary(["a", "b"])
    rng = np.random.default_rng(5)
    gt = Region(box=Box(0, 0, 2, 2), category_id=1,
                subject_grid=rng.normal(size=(49, 5)))
    det = Region(box=det_box, category_id=1,
                 subject_grid=gt.subject_grid.copy())
    toks = ["a", "b"]
    ds = Dataset(
        feature_dim=5, vocab=vocab,
        images=[ImageRecord(width=10.0, height=10.0, regions=[gt],
                            det_regions=[det])],
        expressions=[ExpressionRecord(image_id=0, target_region=0, tokens=toks,
                                      token_ids=encode_tokens(toks, vocab))])
    params = ModelParams.create(
        ModelDims(vocab_size=len(vocab), embed=8, hidden=6, visual=5), seed=2)
    return ds, params


def test_iou_semantics_and_strict_det_threshold(capsys):
    cases = [
        (iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)), 1.0),
        (iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)), 0.0),
        (iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)), 1.0 / 3.0),
    ]
    analytic_ok = all(got == want for got, want in cases)

    ds_half, params = _det_instance(Box(0, 0, 2, 1))  # IoU exactly 0.5
    rec_half = evaluate_det(ds_half, params).records[0]
    ds_over, params = _det_instance(Box(0, 0, 2, 1.5))  # IoU 0.75
    rec_over = evaluate_det(ds_over, params).records[0]
    strict_ok = (iou(Box(0, 0, 2, 1), Box(0, 0, 2, 2)) == 0.5
                 and not rec_half.correct and rec_over.correct)

    ok = analytic_ok and strict_ok
    detail = (f"identical/disjoint/partial = {[got for got, _ in cases]}, "
              f"det at IoU 0.5 correct={rec_half.correct} (must be False), "
              f"at 0.75 correct={rec_over.correct}")
    _verdict(capsys, ok, "IoU analytic cases and strict det threshold", detail)
    assert ok


CKPT_CFG = """\
model.embed = 24
model.hidden = 16
model.visual = 16
train.batch_size = 8
train.max_iterations = 300
train.checkpoint_every = 0
synth.num_images = 48
synth.regions_per_image = 3
synth.vocab_size = 19
synth.num_attribute_factors = 2
"""


def test_repeated_training_is_bitwise_identical(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CKPT_CFG + f"data.path = {tmp_path / 'dataset'}\n")
    assert cli.main(["synth", "--config", str(cfg),
                     "--out", str(tmp_path / "synth")]) == 0
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        blobs.append((out / "checkpoint.bin").read_bytes())
    ok = blobs[0] == blobs[1]
    _verdict(capsys, ok, "repeated training runs, same seed and config",
             f"checkpoints byte-identical={ok} ({len(blobs[0])} bytes)")
    assert ok


def test_ranking_loss_hand_values(capsys):
    def scalar(x):
        return Tensor(np.asarray(float(x)))

    satisfied = ranking_loss(scalar(1.0), scalar(0.5), scalar(0.4), margin=0.1)
    tied = ranking_loss(scalar(0.371), scalar(0.371), scalar(0.371), margin=0.1)
    mixed = ranking_loss(scalar(1.0), scalar(0.75), scalar(0.4), margin=0.5)
    one_sided = ranking_loss(scalar(0.25), scalar(0.875), None, margin=0.125)

    checks = [
        (float(satisfied.data), 0.0),
        (float(tied.data), 0.2),            # both hinge terms active: 2 * margin
        (float(mixed.data), 0.25),
        (float(one_sided.data), 0.75),      # 0.125 - 0.25 + 0.875, single term
    ]
    ok = all(got == want for got, want in checks)
    _verdict(capsys, ok, "ranking loss hand-computed values",
             ", ".join(f"{got:g}=={want:g}" for got, want in checks))
    assert ok
