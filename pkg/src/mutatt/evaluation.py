"""Grounding accuracy under the two standard protocols.

gt: score the image's annotated regions, predict the argmax, correct when
the predicted index is the target. det: score the image's detected regions,
correct when the predicted box overlaps the target's annotated box with
IoU strictly greater than 0.5. Ties go to the lowest region index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .language import encode_expression
from .matching import Ablation, overall_score
from .params import ModelParams
from .tensor import no_grad
from .visual import Box, assemble_module_visuals

__all__ = ["iou", "InstanceResult", "EvalReport", "evaluate_gt", "evaluate_det",
           "format_report"]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, continuous coordinates."""
    ix = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    iy = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class InstanceResult:
    expression_index: int
    predicted_region: int      # -1 when the region pool was empty
    predicted_box: Box | None
    correct: bool
    margin: float              # winning score minus runner-up, 0 if single region
    error: str | None = None


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    count: int
    records: list[InstanceResult] = field(default_factory=list)


def _region_scores(dataset: Dataset, image_id: int, expr_index: int,
                   params: ModelParams, ablation: Ablation,
                   detected: bool) -> np.ndarray:
    image = dataset.images[image_id]
    pool = image.det_regions if detected else image.regions
    expr = dataset.expressions[expr_index]
    encoding = encode_expression(expr.token_ids, params)
    scores = np.empty(len(pool))
    for r in range(len(pool)):
        region = dataset.region_features(image_id, r, detected=detected)
        visuals = assemble_module_visuals(region, params)
        scores[r] = overall_score(visuals, encoding, params, ablation).total.data
    return scores


def _argmax_with_margin(scores: np.ndarray) -> tuple[int, float]:
    best = int(scores.argmax())        # first max wins: lowest index on ties
    if scores.size < 2:
        return best, 0.0
    runner = np.delete(scores, best).max()
    return best, float(scores[best] - runner)


def evaluate_gt(dataset: Dataset, params: ModelParams,
                ablation: Ablation = Ablation(),
                indices: list[int] | None = None) -> EvalReport:
    if indices is None:
        indices = list(range(len(dataset.expressions)))
    records = []
    correct = 0
    with no_grad():
        for i in indices:
            expr = dataset.expressions[i]
            image = dataset.images[expr.image_id]
            if not image.regions:
                records.append(InstanceResult(i, -1, None, False, 0.0,
                                              error="empty region set"))
                continue
            scores = _region_scores(dataset, expr.image_id, i, params, ablation,
                                    detected=False)
            pred, margin = _argmax_with_margin(scores)
            ok = pred == expr.target_region
            correct += ok
            records.append(InstanceResult(i, pred, image.regions[pred].box, ok, margin))
    return EvalReport(protocol="gt", accuracy=correct / len(indices),
                      count=len(indices), records=records)


def evaluate_det(dataset: Dataset, params: ModelParams,
                 ablation: Ablation = Ablation(),
                 indices: list[int] | None = None) -> EvalReport:
    if indices is None:
        indices = list(range(len(dataset.expressions)))
    records = []
    correct = 0
    with no_grad():
        for i in indices:
            expr = dataset.expressions[i]
            image = dataset.images[expr.image_id]
            if not image.det_regions:
                records.append(InstanceResult(i, -1, None, False, 0.0,
                                              error="no detected regions"))
                continue
            scores = _region_scores(dataset, expr.image_id, i, params, ablation,
                                    detected=True)
            pred, margin = _argmax_with_margin(scores)
            box = image.det_regions[pred].box
            gt_box = image.regions[expr.target_region].box
            ok = iou(box, gt_box) > 0.5
            correct += ok
            records.append(InstanceResult(i, pred, box, ok, margin))
    return EvalReport(protocol="det", accuracy=correct / len(indices),
                      count=len(indices), records=records)


def format_report(reports: dict[str, EvalReport]) -> str:
    """Summary table, one split per row."""
    lines = [f"{'split':<12} {'protocol':<8} {'accuracy':>8} {'count':>6}"]
    for split, rep in reports.items():
        lines.append(f"{split:<12} {rep.protocol:<8} {rep.accuracy:>8.4f} {rep.count:>6}")
    return "\n".join(lines)
