"""Dataset container, on-disk format, and checkpoint container.

A dataset on disk is a directory of three files: ``index.json`` (structured
text: format version, feature width d_v, image and expression records, byte
offsets into the blob), ``features.bin`` (flat little-endian float64 subject
grids, row-major), and ``vocab.txt`` (one token per line, line = id - 2).

Checkpoints are a single binary file: magic line, JSON header with a tensor
manifest, float64 blob, sha256 trailer.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .language import Vocabulary, encode_tokens
from .params import CONTEXT_SLOTS, SUBJECT_SLOTS, ModelDims
from .visual import Box, ContextSlot, RegionFeatures, select_neighbors

__all__ = [
    "DatasetError",
    "DatasetVersionError",
    "DanglingReferenceError",
    "FeatureShapeError",
    "CheckpointError",
    "Region",
    "ImageRecord",
    "ExpressionRecord",
    "Dataset",
    "save_dataset",
    "load_dataset",
    "split_by_image",
    "attach_detections",
    "CheckpointPayload",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger("mutatt.data")

FORMAT_VERSION = 1
INDEX_NAME = "index.json"
FEATURES_NAME = "features.bin"
VOCAB_NAME = "vocab.txt"

CKPT_MAGIC = b"MUTATT-CKPT-1\n"


class DatasetError(Exception):
    """Base for dataset file problems."""


class DatasetVersionError(DatasetError):
    """Unsupported format version."""


class DanglingReferenceError(DatasetError):
    """An id points at a record that does not exist."""


class FeatureShapeError(DatasetError):
    """Feature block size or dimension disagrees with the header."""


class CheckpointError(Exception):
    """Checkpoint file corrupt or malformed."""


@dataclass
class Region:
    box: Box
    category_id: int
    subject_grid: np.ndarray               # (49, d_v)
    neighbor_indices: list[int] = field(default_factory=list)

    def pooled_feature(self) -> np.ndarray:
        return self.subject_grid.mean(axis=0)


@dataclass
class ImageRecord:
    width: float
    height: float
    regions: list[Region]
    det_regions: list[Region] | None = None

    @property
    def size(self) -> tuple[float, float]:
        return (self.width, self.height)


@dataclass
class ExpressionRecord:
    image_id: int
    target_region: int
    tokens: list[str]
    token_ids: np.ndarray


@dataclass
class Dataset:
    feature_dim: int
    vocab: Vocabulary
    images: list[ImageRecord]
    expressions: list[ExpressionRecord]

    def region_features(self, image_id: int, region_index: int,
                        detected: bool = False) -> RegionFeatures:
        """Resolve one region's context references into scorer inputs.

        A neighbor's raw feature is the mean of its subject grid rows.
        """
        image = self.images[image_id]
        pool = image.det_regions if detected else image.regions
        region = pool[region_index]
        context = [
            ContextSlot(feature=pool[j].pooled_feature(), box=pool[j].box,
                        category_id=pool[j].category_id)
            for j in region.neighbor_indices
        ]
        return RegionFeatures(
            box=region.box,
            category_id=region.category_id,
            subject_grid=region.subject_grid,
            image_size=image.size,
            context=context,
        )

    def validate(self) -> None:
        problems: list[str] = []
        kind: type[DatasetError] | None = None

        def flag(cls, msg):
            nonlocal kind
            problems.append(msg)
            if kind is None:
                kind = cls

        for i, img in enumerate(self.images):
            if img.width <= 0 or img.height <= 0:
                flag(DatasetError, f"image {i}: degenerate size {img.size}")
            for pool_name, pool in (("regions", img.regions),
                                    ("det_regions", img.det_regions or [])):
                for r, region in enumerate(pool):
                    grid = region.subject_grid
                    if grid.shape != (SUBJECT_SLOTS, self.feature_dim):
                        flag(FeatureShapeError,
                             f"image {i} {pool_name}[{r}]: grid shape {grid.shape}, "
                             f"expected ({SUBJECT_SLOTS}, {self.feature_dim})")
                    for j in region.neighbor_indices:
                        if not (0 <= j < len(pool)) or j == r:
                            flag(DanglingReferenceError,
                                 f"image {i} {pool_name}[{r}]: bad neighbor index {j}")
                    if len(region.neighbor_indices) > CONTEXT_SLOTS:
                        flag(DatasetError,
                             f"image {i} {pool_name}[{r}]: "
                             f"{len(region.neighbor_indices)} neighbors > {CONTEXT_SLOTS}")
        for e, expr in enumerate(self.expressions):
            if not (0 <= expr.image_id < len(self.images)):
                flag(DanglingReferenceError,
                     f"expression {e}: image id {expr.image_id} out of range")
                continue
            nregions = len(self.images[expr.image_id].regions)
            if not (0 <= expr.target_region < nregions):
                flag(DanglingReferenceError,
                     f"expression {e}: target region {expr.target_region} "
                     f"out of range for image {expr.image_id}")
            if not expr.tokens:
                flag(DatasetError, f"expression {e}: empty token list")
        if problems:
            raise kind("dataset invalid:\n  " + "\n  ".join(problems))


def _region_to_json(region: Region, offset: int) -> dict:
    b = region.box
    return {
        "box": [b.x_tl, b.y_tl, b.x_br, b.y_br],
        "category_id": region.category_id,
        "grid_offset": offset,
        "neighbors": list(region.neighbor_indices),
    }


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write index.json + features.bin + vocab.txt under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.validate()

    blocks: list[np.ndarray] = []
    offset = 0

    def push(grid: np.ndarray) -> int:
        nonlocal offset
        here = offset
        blocks.append(np.ascontiguousarray(grid, dtype="<f8"))
        offset += grid.size
        return here

    images_json = []
    for img in dataset.images:
        rec = {
            "width": img.width,
            "height": img.height,
            "regions": [_region_to_json(r, push(r.subject_grid)) for r in img.regions],
        }
        if img.det_regions is not None:
            rec["det_regions"] = [_region_to_json(r, push(r.subject_grid))
                                  for r in img.det_regions]
        images_json.append(rec)

    index = {
        "format_version": FORMAT_VERSION,
        "d_v": dataset.feature_dim,
        "vocab_file": VOCAB_NAME,
        "feature_file": FEATURES_NAME,
        "images": images_json,
        "expressions": [
            {"image_id": e.image_id, "target_region": e.target_region,
             "tokens": e.tokens}
            for e in dataset.expressions
        ],
    }
    with open(out / FEATURES_NAME, "wb") as fh:
        for block in blocks:
            fh.write(block.tobytes())
    dataset.vocab.save(out / VOCAB_NAME)
    with open(out / INDEX_NAME, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    return out / INDEX_NAME


def _region_from_json(rec: dict, blob: np.ndarray, d_v: int, where: str) -> Region:
    offset = rec["grid_offset"]
    count = SUBJECT_SLOTS * d_v
    if offset < 0 or offset + count > blob.size:
        raise FeatureShapeError(
            f"{where}: grid offset {offset} + {count} values exceeds "
            f"feature blob of {blob.size} values")
    grid = blob[offset:offset + count].reshape(SUBJECT_SLOTS, d_v)
    return Region(
        box=Box(*rec["box"]),
        category_id=int(rec["category_id"]),
        subject_grid=grid,
        neighbor_indices=[int(j) for j in rec["neighbors"]],
    )


def load_dataset(path) -> Dataset:
    """Load and validate a dataset from its directory or index file."""
    p = Path(path)
    index_path = p / INDEX_NAME if p.is_dir() else p
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    try:
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unparseable dataset index {index_path}: {exc}") from None

    version = index.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset format version {version!r}, expected {FORMAT_VERSION}")
    d_v = int(index["d_v"])

    base = index_path.parent
    vocab_path = base / index["vocab_file"]
    feature_path = base / index["feature_file"]
    if not vocab_path.exists():
        raise FileNotFoundError(f"vocabulary file not found: {vocab_path}")
    if not feature_path.exists():
        raise FileNotFoundError(f"feature file not found: {feature_path}")
    vocab = Vocabulary.load(vocab_path)
    blob = np.fromfile(feature_path, dtype="<f8")

    images = []
    for i, rec in enumerate(index["images"]):
        regions = [_region_from_json(r, blob, d_v, f"image {i} region {k}")
                   for k, r in enumerate(rec["regions"])]
        det = None
        if "det_regions" in rec:
            det = [_region_from_json(r, blob, d_v, f"image {i} det region {k}")
                   for k, r in enumerate(rec["det_regions"])]
        images.append(ImageRecord(width=float(rec["width"]), height=float(rec["height"]),
                                  regions=regions, det_regions=det))

    expressions = []
    for rec in index["expressions"]:
        tokens = list(rec["tokens"])
        expressions.append(ExpressionRecord(
            image_id=int(rec["image_id"]),
            target_region=int(rec["target_region"]),
            tokens=tokens,
            token_ids=encode_tokens(tokens, vocab) if tokens else np.zeros(0, np.int64),
        ))

    dataset = Dataset(feature_dim=d_v, vocab=vocab, images=images, expressions=expressions)
    dataset.validate()
    return dataset


def split_by_image(dataset: Dataset, heldout_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Deterministic split: the last fraction of images is held out.

    Returns (train expression indices, heldout expression indices).
    """
    if not 0.0 <= heldout_fraction < 1.0:
        raise ValueError("heldout_fraction must be in [0, 1)")
    cut = int(round(len(dataset.images) * (1.0 - heldout_fraction)))
    train, heldout = [], []
    for i, expr in enumerate(dataset.expressions):
        (train if expr.image_id < cut else heldout).append(i)
    return train, heldout


def attach_detections(dataset: Dataset, jitter: float, seed: int) -> None:
    """Give every image detected regions: annotated regions with boxes
    shifted by up to ``jitter`` of their size, features untouched.

    Detection neighbors are re-selected among the detected boxes.
    """
    rng = np.random.default_rng([seed, 999])
    for img in dataset.images:
        det = []
        for region in img.regions:
            b = region.box
            dx = rng.uniform(-jitter, jitter) * b.width
            dy = rng.uniform(-jitter, jitter) * b.height
            moved = Box(
                min(max(b.x_tl + dx, 0.0), img.width - 1e-9),
                min(max(b.y_tl + dy, 0.0), img.height - 1e-9),
                min(max(b.x_br + dx, 1e-9), img.width),
                min(max(b.y_br + dy, 1e-9), img.height),
            )
            det.append(Region(box=moved, category_id=region.category_id,
                              subject_grid=region.subject_grid))
        boxes = [r.box for r in det]
        cats = [r.category_id for r in det]
        for i, region in enumerate(det):
            region.neighbor_indices = select_neighbors(i, boxes, cats)
        img.det_regions = det


# --- checkpoint container ---------------------------------------------------

@dataclass
class CheckpointPayload:
    dims: ModelDims
    step: int
    config_hash: str
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] | None
    opt_v: dict[str, np.ndarray] | None
    opt_step: int


def save_checkpoint(path, params, opt_state=None, step: int = 0,
                    config_hash: str = "") -> None:
    """Serialize parameters (ModelParams) and optimizer state to one file.

    ``opt_state`` needs ``m``/``v`` name->array mappings and a ``step``; pass
    None to store parameters only.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in params.named_tensors().items():
        arrays.append((f"param:{name}", t.data))
    opt_step = 0
    if opt_state is not None:
        opt_step = int(opt_state.step)
        for name in params.named_tensors():
            arrays.append((f"adam_m:{name}", opt_state.m[name]))
            arrays.append((f"adam_v:{name}", opt_state.v[name]))

    manifest = []
    offset = 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    dims = params.dims
    header = {
        "step": int(step),
        "config_hash": config_hash,
        "has_optimizer": opt_state is not None,
        "opt_step": opt_step,
        "dims": {"vocab_size": dims.vocab_size, "embed": dims.embed,
                 "hidden": dims.hidden, "visual": dims.visual},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    body = bytearray()
    body += CKPT_MAGIC
    body += len(header_bytes).to_bytes(8, "little")
    body += header_bytes
    for _, arr in arrays:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(bytes(body))
        fh.write(digest)


def load_checkpoint(path, expected_config_hash: str | None = None) -> CheckpointPayload:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32:
        raise CheckpointError(f"checkpoint truncated: {p}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint checksum mismatch: {p}")
    if not body.startswith(CKPT_MAGIC):
        raise CheckpointError(f"bad checkpoint magic in {p}")
    cursor = len(CKPT_MAGIC)
    header_len = int.from_bytes(body[cursor:cursor + 8], "little")
    cursor += 8
    try:
        header = json.loads(body[cursor:cursor + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unparseable checkpoint header: {exc}") from None
    cursor += header_len

    blob = np.frombuffer(body[cursor:], dtype="<f8")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > blob.size:
            raise CheckpointError(
                f"tensor {entry['name']!r} overruns checkpoint blob "
                f"({start}+{size} > {blob.size})")
        tensors[entry["name"]] = blob[start:start + size].reshape(shape).copy()

    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        log.warning("checkpoint config hash %s does not match current config %s",
                    header["config_hash"], expected_config_hash)

    dims = ModelDims(**header["dims"])
    params = {n[len("param:"):]: a for n, a in tensors.items() if n.startswith("param:")}
    opt_m = opt_v = None
    if header.get("has_optimizer"):
        opt_m = {n[len("adam_m:"):]: a for n, a in tensors.items() if n.startswith("adam_m:")}
        opt_v = {n[len("adam_v:"):]: a for n, a in tensors.items() if n.startswith("adam_v:")}
    return CheckpointPayload(
        dims=dims,
        step=int(header["step"]),
        config_hash=header["config_hash"],
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=int(header.get("opt_step", 0)),
    )
