"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic dataset), ``train`` (fit and
checkpoint), ``eval`` (score a checkpoint under the gt or det protocol),
``verify`` (run the invariant suite), ``dump-attn`` (numeric attention
records). Verbosity is controlled by the MUTATT_LOG environment variable
(debug/info/warning). Every command echoes its resolved configuration,
writes outputs under --out, and ends stdout with one machine-parsable
RESULT line; exit code 0 means no errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from .config import ConfigError, RunConfig
from .data import (CheckpointError, DatasetError, load_checkpoint, load_dataset,
                   save_dataset, split_by_image)
from .evaluation import EvalReport, evaluate_det, evaluate_gt, format_report
from .language import encode_expression
from .matching import format_attention_dump, overall_score
from .params import ModelParams
from .synth import generate_synthetic
from .tensor import no_grad
from .training import TrainingError, run_training
from .verify import run_all_checks

log = logging.getLogger("mutatt.cli")


def _configure_logging() -> None:
    level_name = os.environ.get("MUTATT_LOG", "warning").lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "error": logging.ERROR}.get(level_name)
    if level is None:
        print(f"warning: unknown MUTATT_LOG level {level_name!r}, using warning",
              file=sys.stderr)
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mutatt",
        description="Mutual visual-textual guidance matching for referring "
                    "expression comprehension.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate a synthetic grounding dataset"),
        ("train", "train a matcher and write checkpoints"),
        ("eval", "evaluate a checkpoint under the gt or det protocol"),
        ("verify", "run gradient, invariant, oracle, and determinism checks"),
        ("dump-attn", "write numeric attention records for inspection"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="config file of 'key = value' lines")
        p.add_argument("--seed", metavar="N", type=int, default=None,
                       help="override train.seed and synth.seed")
        p.add_argument("--ablation", metavar="MODULE=MODE[,...]", default=None,
                       help="per-channel guidance: none, vl, or mutual")
        p.add_argument("--protocol", choices=("gt", "det"), default=None,
                       help="evaluation protocol")
        p.add_argument("--out", metavar="DIR", default="mutatt_out",
                       help="output directory (default: mutatt_out)")
        p.add_argument("--resume", metavar="PATH", default=None,
                       help="checkpoint to resume from / evaluate")
    return parser


def _resolve_config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
        overrides["synth.seed"] = str(args.seed)
    if args.ablation is not None:
        from .matching import Ablation
        ab = Ablation.parse(args.ablation)
        overrides["ablation.subj"] = ab.subj
        overrides["ablation.loc"] = ab.loc
        overrides["ablation.rel"] = ab.rel
    if args.protocol is not None:
        overrides["eval.protocol"] = args.protocol
    return RunConfig.resolve(config_file=args.config, overrides=overrides)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    print("resolved configuration:")
    for line in cfg.to_lines():
        print("  " + line)
    print(f"config_hash = {cfg.config_hash()}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text("\n".join(cfg.to_lines()) + "\n",
                                             encoding="utf-8")


def _dataset_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["data.path"]) if cfg["data.path"] else out / "dataset"


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    spec = cfg.synth_spec()
    dataset, ledger = generate_synthetic(spec, feature_dim=cfg["model.visual"])
    target = _dataset_dir(cfg, out)
    index_path = save_dataset(dataset, target)
    modes = Counter(ledger.image_modes)
    print(f"wrote {len(dataset.images)} images, {len(dataset.expressions)} expressions, "
          f"vocabulary of {len(dataset.vocab)} ids to {target}")
    print("image modes: " + ", ".join(f"{k}={v}" for k, v in sorted(modes.items())))
    print(f"RESULT command=synth status=ok images={len(dataset.images)} "
          f"expressions={len(dataset.expressions)} index={index_path}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, resume_path: str | None) -> int:
    dataset = load_dataset(_dataset_dir(cfg, out))
    dims = cfg.model_dims(vocab_size=len(dataset.vocab), feature_dim=dataset.feature_dim)
    resume = None
    if resume_path is not None:
        resume = load_checkpoint(resume_path, expected_config_hash=cfg.config_hash())
    result = run_training(
        dataset, cfg.train_config(), dims, out_dir=out, resume=resume,
        config_hash=cfg.config_hash(),
        heldout_fraction=cfg["train.heldout_fraction"],
        checkpoint_every=cfg["train.checkpoint_every"])

    _, heldout = split_by_image(dataset, cfg["train.heldout_fraction"])
    report = evaluate_gt(dataset, result.params, cfg.ablation(),
                         indices=heldout or None)
    print(format_report({"heldout" if heldout else "all": report}))
    print(f"RESULT command=train status=ok step={result.step} "
          f"heldout_gt_accuracy={report.accuracy:.4f} "
          f"checkpoint={out / 'checkpoint.bin'}")
    return 0


def _write_records(report: EvalReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in report.records:
            fields = [f"expr={r.expression_index}", f"predicted={r.predicted_region}",
                      f"correct={int(r.correct)}", f"margin={r.margin:.6f}"]
            if r.error:
                fields.append(f"error={r.error!r}")
            fh.write(" ".join(fields) + "\n")


def cmd_eval(cfg: RunConfig, out: Path, resume_path: str | None) -> int:
    ckpt_path = resume_path or out / "checkpoint.bin"
    payload = load_checkpoint(ckpt_path, expected_config_hash=cfg.config_hash())
    params = ModelParams.from_arrays(payload.dims, payload.params)
    dataset = load_dataset(_dataset_dir(cfg, out))
    if len(dataset.vocab) != payload.dims.vocab_size:
        raise ConfigError(f"dataset vocabulary has {len(dataset.vocab)} ids but the "
                          f"checkpoint was trained with {payload.dims.vocab_size}")

    protocol = cfg["eval.protocol"]
    if protocol == "det" and not any(img.det_regions for img in dataset.images):
        raise ConfigError("protocol det requires detected regions, and the dataset "
                          "has none")
    evaluate = evaluate_det if protocol == "det" else evaluate_gt

    train_idx, heldout_idx = split_by_image(dataset, cfg["train.heldout_fraction"])
    reports: dict[str, EvalReport] = {}
    for split, indices in (("train", train_idx), ("heldout", heldout_idx)):
        if not indices:
            continue
        reports[split] = evaluate(dataset, params, cfg.ablation(), indices=indices)
        _write_records(reports[split], out / f"eval_{protocol}_{split}.txt")
    print(format_report(reports))
    summary = " ".join(f"{split}_accuracy={rep.accuracy:.4f}"
                       for split, rep in reports.items())
    print(f"RESULT command=eval status=ok protocol={protocol} {summary}")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    results = run_all_checks(seed=cfg["train.seed"])
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    status = "ok" if not failed else "fail"
    print(f"RESULT command=verify status={status} passed={len(results) - len(failed)} "
          f"failed={len(failed)}")
    return 0 if not failed else 1


def cmd_dump_attn(cfg: RunConfig, out: Path, resume_path: str | None) -> int:
    ckpt_path = resume_path or out / "checkpoint.bin"
    payload = load_checkpoint(ckpt_path, expected_config_hash=cfg.config_hash())
    params = ModelParams.from_arrays(payload.dims, payload.params)
    dataset = load_dataset(_dataset_dir(cfg, out))
    _, heldout = split_by_image(dataset, cfg["train.heldout_fraction"])
    picks = (heldout or list(range(len(dataset.expressions))))[:cfg["eval.dump_limit"]]

    path = out / "attention_dump.txt"
    with open(path, "w", encoding="utf-8") as fh, no_grad():
        for i in picks:
            expr = dataset.expressions[i]
            encoding = encode_expression(expr.token_ids, params)
            image = dataset.images[expr.image_id]
            fh.write(f"=== expression {i} (image {expr.image_id}, "
                     f"target region {expr.target_region}) ===\n")
            for r in range(len(image.regions)):
                region = dataset.region_features(expr.image_id, r)
                score = overall_score(region, encoding, params, cfg.ablation())
                fh.write(f"--- region {r} ---\n")
                fh.write(format_attention_dump(score, expr.tokens) + "\n")
    print(f"wrote attention records for {len(picks)} expressions to {path}")
    print(f"RESULT command=dump-attn status=ok records={len(picks)} path={path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _resolve_config(args)
        _echo_config(cfg, out)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.resume)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "dump-attn":
            return cmd_dump_attn(cfg, out, args.resume)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"RESULT command={args.command} status=error kind=config")
        return 2
    except (DatasetError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"RESULT command={args.command} status=error kind=runtime")
        return 1


if __name__ == "__main__":
    sys.exit(main())
