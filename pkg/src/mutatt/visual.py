"""Region side of the matcher.

Each region arrives with precomputed features: a 49-row subject grid (7x7),
its bounding box, and up to five same-category neighbor records. Three
channels are assembled from these: subject (the grid), location (own box
encoding plus neighbor offsets), relationship (neighbor feature plus offset
per context slot). Each channel is linearly projected to the common
embedding width; padded slots stay exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import CONTEXT_SLOTS, LOCATION_DIM, SUBJECT_SLOTS, ModelParams
from .tensor import Tensor

__all__ = [
    "Box",
    "ContextSlot",
    "RegionFeatures",
    "ModuleVisuals",
    "encode_location",
    "encode_context_offsets",
    "select_neighbors",
    "assemble_module_visuals",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, corners (top-left, bottom-right)."""

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        if self.x_br < self.x_tl or self.y_br < self.y_tl:
            raise ValueError(f"inverted box corners: {self}")

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))


@dataclass
class ContextSlot:
    """One same-category neighbor: its raw feature vector, box, category."""

    feature: np.ndarray
    box: Box
    category_id: int


@dataclass
class RegionFeatures:
    """Precomputed per-region inputs, before any trainable projection."""

    box: Box
    category_id: int
    subject_grid: np.ndarray            # (49, d_v)
    image_size: tuple[float, float]     # (W, H)
    context: list[ContextSlot] = field(default_factory=list)

    def __post_init__(self):
        grid = np.asarray(self.subject_grid, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] != SUBJECT_SLOTS:
            raise ValueError(f"subject grid must have {SUBJECT_SLOTS} rows, got shape {grid.shape}")
        self.subject_grid = grid
        if len(self.context) > CONTEXT_SLOTS:
            raise ValueError(f"at most {CONTEXT_SLOTS} context slots, got {len(self.context)}")


@dataclass
class ModuleVisuals:
    """One channel's projected slot features, slot mask, and pooled vector."""

    features: Tensor        # (N, d), padded slots exactly zero
    mask: np.ndarray        # (N,) bool
    pooled: Tensor          # (d,) mean over unmasked slots


def encode_location(box: Box, image_size: tuple[float, float]) -> np.ndarray:
    """Normalized corner coordinates and relative area, all in [0, 1]."""
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate image size {image_size}")
    return np.array([
        box.x_tl / w,
        box.y_tl / h,
        box.x_br / w,
        box.y_br / h,
        box.area / (w * h),
    ])


def encode_context_offsets(box: Box, neighbors: list[Box],
                           image_size: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-neighbor offset rows, shape (5, 5), plus a slot mask.

    Row j is the j-th neighbor's corner offsets scaled by the reference box
    size, then its relative area; missing slots are zero with mask False.
    Corner offsets are neighbor minus reference.
    """
    if box.width <= 0 or box.height <= 0:
        raise ValueError(f"reference box has no extent: {box}")
    if len(neighbors) > CONTEXT_SLOTS:
        raise ValueError(f"at most {CONTEXT_SLOTS} neighbors, got {len(neighbors)}")
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate image size {image_size}")
    out = np.zeros((CONTEXT_SLOTS, LOCATION_DIM))
    mask = np.zeros(CONTEXT_SLOTS, dtype=bool)
    for j, nb in enumerate(neighbors):
        out[j] = [
            (nb.x_tl - box.x_tl) / box.width,
            (nb.y_tl - box.y_tl) / box.height,
            (nb.x_br - box.x_br) / box.width,
            (nb.y_br - box.y_br) / box.height,
            nb.area / (w * h),
        ]
        mask[j] = True
    return out, mask


def select_neighbors(index: int, boxes: list[Box], categories: list[int]) -> list[int]:
    """Indices of up to five same-category neighbors of region ``index``,
    ordered by ascending center distance, ties by ascending index."""
    cx, cy = boxes[index].center
    same = []
    for j, (b, c) in enumerate(zip(boxes, categories)):
        if j == index or c != categories[index]:
            continue
        dx, dy = b.center[0] - cx, b.center[1] - cy
        same.append((dx * dx + dy * dy, j))
    same.sort()
    return [j for _, j in same[:CONTEXT_SLOTS]]


def _masked_mean(features: Tensor, mask: np.ndarray) -> Tensor:
    weights = np.zeros(mask.shape[0])
    weights[mask] = 1.0 / mask.sum()
    return T.matmul(Tensor(weights), features)


def assemble_module_visuals(region: RegionFeatures,
                            params: ModelParams) -> dict[str, ModuleVisuals]:
    """Project a region's raw inputs into the three channels.

    subject: all 49 grid rows. location: one row from the 30-dim vector of
    own box encoding + flattened neighbor offsets. relationship: one row per
    real neighbor from [neighbor feature ; offset row]; absent neighbors
    yield zero rows excluded from pooling and gradients.
    """
    d_v = params.dims.visual
    if region.subject_grid.shape[1] != d_v:
        raise T.ShapeError(
            f"subject grid width {region.subject_grid.shape[1]} != configured visual dim {d_v}")

    loc_vec = encode_location(region.box, region.image_size)
    offsets, ctx_mask = encode_context_offsets(
        region.box, [slot.box for slot in region.context], region.image_size)

    # subject: 49 live slots
    subj_feats = T.linear(Tensor(region.subject_grid), params.get("proj_w", "subj"),
                          params.get("proj_b", "subj"))
    subj_mask = np.ones(SUBJECT_SLOTS, dtype=bool)
    subj = ModuleVisuals(subj_feats, subj_mask, _masked_mean(subj_feats, subj_mask))

    # location: a single slot
    loc_input = np.concatenate([loc_vec, offsets.reshape(-1)])
    loc_row = T.linear(Tensor(loc_input), params.get("proj_w", "loc"), params.get("proj_b", "loc"))
    loc = ModuleVisuals(loc_row.reshape(1, -1), np.ones(1, dtype=bool), loc_row)

    # relationship: one slot per real neighbor
    rel_input = np.zeros((CONTEXT_SLOTS, d_v + LOCATION_DIM))
    for j, slot in enumerate(region.context):
        feat = np.asarray(slot.feature, dtype=np.float64)
        if feat.shape != (d_v,):
            raise T.ShapeError(f"context feature shape {feat.shape} != ({d_v},)")
        rel_input[j, :d_v] = feat
        rel_input[j, d_v:] = offsets[j]
    if ctx_mask.any():
        projected = T.linear(Tensor(rel_input), params.get("proj_w", "rel"),
                             params.get("proj_b", "rel"))
        # bias leaks into padded rows; zero them so masked slots stay inert
        rel_feats = T.mul(projected, Tensor(ctx_mask[:, None].astype(np.float64)))
        rel_pooled = _masked_mean(rel_feats, ctx_mask)
    else:
        rel_feats = Tensor(np.zeros((CONTEXT_SLOTS, params.dims.embed)))
        rel_pooled = Tensor(np.zeros(params.dims.embed))
    rel = ModuleVisuals(rel_feats, ctx_mask, rel_pooled)

    return {"subj": subj, "loc": loc, "rel": rel}
