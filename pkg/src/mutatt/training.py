"""Ranking-loss training with negative sampling and Adam.

Each batch instance contributes two hinge terms: the positive pair must beat
the same region paired with another in-batch expression, and the same
expression paired with another region of the same image, each by the margin.
Loss accumulation is sequential and every iteration draws its randomness
from a fresh counter-keyed stream, so a run is bitwise reproducible and a
resumed run follows the identical trajectory.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CheckpointPayload, Dataset, save_checkpoint, split_by_image
from .language import encode_expression
from .matching import Ablation, overall_score
from .params import ModelDims, ModelParams
from .tensor import Tensor
from .visual import assemble_module_visuals

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingError",
    "ranking_loss",
    "sample_negatives",
    "effective_lr",
    "clip_gradients",
    "adam_update",
    "train_step",
    "TrainResult",
    "run_training",
]

log = logging.getLogger("mutatt.training")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 10.0


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid setup)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 15
    learning_rate: float = 0.0004
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 8000
    margin: float = 0.1
    max_iterations: int = 2000
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size and max_iterations must be positive")
        if self.learning_rate <= 0 or self.margin < 0:
            raise ValueError("learning_rate must be positive, margin nonnegative")
        if self.lr_decay_factor <= 1 or self.lr_decay_every < 1:
            raise ValueError("lr decay factor must exceed 1, interval be positive")


class AdamState:
    """First/second moment accumulators per parameter, plus the step count."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def create(cls, params: ModelParams) -> "AdamState":
        named = params.named_tensors()
        return cls(m={n: np.zeros_like(t.data) for n, t in named.items()},
                   v={n: np.zeros_like(t.data) for n, t in named.items()})


def ranking_loss(pos: Tensor, neg_expr: Tensor, neg_region: Tensor | None,
                 margin: float) -> Tensor:
    """Hinge pair: [k - pos + neg_expr]_+ plus [k - pos + neg_region]_+.

    ``neg_region`` may be None (single-region image); that term is dropped.
    """
    loss = T.relu(T.add(T.sub(neg_expr, pos), margin))
    if neg_region is not None:
        loss = T.add(loss, T.relu(T.add(T.sub(neg_region, pos), margin)))
    return loss


def sample_negatives(expr_index: int, batch: list[int], dataset: Dataset,
                     rng: np.random.Generator) -> tuple[int, int | None]:
    """Pick (other in-batch expression index, other region index of the same
    image). The region negative is None when the image has a single region."""
    others = [i for i in batch if i != expr_index]
    if not others:
        raise TrainingError("batch needs at least 2 instances for expression negatives")
    neg_expr = others[int(rng.integers(len(others)))]

    expr = dataset.expressions[expr_index]
    n_regions = len(dataset.images[expr.image_id].regions)
    candidates = [r for r in range(n_regions) if r != expr.target_region]
    if not candidates:
        return neg_expr, None
    return neg_expr, candidates[int(rng.integers(len(candidates)))]


def effective_lr(config: TrainConfig, step: int) -> float:
    return config.learning_rate / config.lr_decay_factor ** math.floor(
        step / config.lr_decay_every)


def clip_gradients(params: ModelParams, max_norm: float = CLIP_NORM) -> float:
    """Scale all gradients so their global 2-norm is at most ``max_norm``."""
    total = 0.0
    named = params.named_tensors()
    for t in named.values():
        total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for t in named.values():
            t.grad *= scale
    return norm


def adam_update(params: ModelParams, state: AdamState, lr: float) -> None:
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.named_tensors().items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


@dataclass
class StepStats:
    loss: float
    lr: float
    active_hinges: int
    total_hinges: int
    skipped_region_negatives: int
    grad_norm: float

    @property
    def active_fraction(self) -> float:
        return self.active_hinges / self.total_hinges if self.total_hinges else 0.0


def train_step(batch: list[int], dataset: Dataset, params: ModelParams,
               state: AdamState, config: TrainConfig, step: int,
               rng: np.random.Generator) -> StepStats:
    """One forward/backward/update over a batch of expression indices."""
    params.zero_grads()

    encodings: dict[int, object] = {}
    visuals: dict[tuple[int, int], object] = {}

    def encoding_of(i: int):
        if i not in encodings:
            encodings[i] = encode_expression(dataset.expressions[i].token_ids, params)
        return encodings[i]

    def visuals_of(image_id: int, region: int):
        key = (image_id, region)
        if key not in visuals:
            visuals[key] = assemble_module_visuals(
                dataset.region_features(image_id, region), params)
        return visuals[key]

    def score(image_id: int, region: int, expr_index: int) -> Tensor:
        return overall_score(visuals_of(image_id, region), encoding_of(expr_index),
                             params, config.ablation).total

    total_loss: Tensor | None = None
    active = 0
    hinges = 0
    skipped = 0
    for i in batch:
        expr = dataset.expressions[i]
        neg_expr_idx, neg_region_idx = sample_negatives(i, batch, dataset, rng)
        pos = score(expr.image_id, expr.target_region, i)
        neg_e = score(expr.image_id, expr.target_region, neg_expr_idx)
        neg_r = None
        if neg_region_idx is None:
            skipped += 1
        else:
            neg_r = score(expr.image_id, neg_region_idx, i)

        if not np.isfinite(pos.data) or not np.isfinite(neg_e.data) or \
           (neg_r is not None and not np.isfinite(neg_r.data)):
            raise TrainingError(f"non-finite score at step {step} for expression {i}")

        hinges += 1 + (neg_r is not None)
        active += float(neg_e.data) - float(pos.data) + config.margin > 0
        if neg_r is not None:
            active += float(neg_r.data) - float(pos.data) + config.margin > 0

        loss_i = ranking_loss(pos, neg_e, neg_r, config.margin)
        total_loss = loss_i if total_loss is None else T.add(total_loss, loss_i)

    loss_value = float(total_loss.data)
    if not np.isfinite(loss_value):
        raise TrainingError(f"non-finite loss at step {step}")

    total_loss.backward()
    norm = clip_gradients(params)
    lr = effective_lr(config, step)
    adam_update(params, state, lr)
    return StepStats(loss=loss_value, lr=lr, active_hinges=active,
                     total_hinges=hinges, skipped_region_negatives=skipped,
                     grad_norm=norm)


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: AdamState
    step: int
    log_lines: list[str]


def run_training(dataset: Dataset, config: TrainConfig, dims: ModelDims,
                 out_dir=None, resume: CheckpointPayload | None = None,
                 config_hash: str = "", heldout_fraction: float = 0.2,
                 checkpoint_every: int = 500, log_every: int = 100) -> TrainResult:
    """Train to ``config.max_iterations``; returns final state and the
    per-iteration log. Writes checkpoints and the log under ``out_dir``.

    Iteration t draws its batch and negatives from a stream keyed by
    (seed, 1, t), so resuming from a checkpoint at step t replays the exact
    remaining trajectory of an uninterrupted run.
    """
    config.validate()
    train_idx, _ = split_by_image(dataset, heldout_fraction)
    if len(train_idx) < 2:
        raise TrainingError("need at least 2 training instances")

    if resume is not None:
        if resume.dims != dims:
            raise TrainingError(f"checkpoint dims {resume.dims} != configured {dims}")
        params = ModelParams.from_arrays(dims, resume.params)
        if resume.opt_m is None:
            raise TrainingError("checkpoint has no optimizer state; cannot resume")
        state = AdamState(m={k: v.copy() for k, v in resume.opt_m.items()},
                          v={k: v.copy() for k, v in resume.opt_v.items()},
                          step=resume.opt_step)
        start = resume.step
    else:
        params = ModelParams.create(dims, config.seed)
        state = AdamState.create(params)
        start = 0

    batch_size = min(config.batch_size, len(train_idx))
    train_arr = np.asarray(train_idx)
    lines: list[str] = []
    t0 = time.time()
    for step in range(start, config.max_iterations):
        rng = np.random.default_rng([config.seed, 1, step])
        batch = [int(i) for i in rng.choice(train_arr, size=batch_size, replace=False)]
        stats = train_step(batch, dataset, params, state, config, step, rng)
        line = (f"step={step} lr={stats.lr:.6g} loss={stats.loss:.6f} "
                f"active_hinges={stats.active_fraction:.3f}")
        lines.append(line)
        if (step + 1) % log_every == 0 or step == start:
            log.info("%s (%.1fs elapsed)", line, time.time() - t0)
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(out_dir / "checkpoint.bin", params, state,
                            step=step + 1, config_hash=config_hash)

    final_step = max(config.max_iterations, start)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", params, state,
                        step=final_step, config_hash=config_hash)
        with open(out_dir / "train_log.txt", "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    return TrainResult(params=params, opt_state=state, step=final_step, log_lines=lines)
