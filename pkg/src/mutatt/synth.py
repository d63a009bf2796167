"""Synthetic grounding task with planted, verifiable structure.

Every region carries a planted latent feature vector tiled over its 49-slot
grid plus gaussian noise. All expressions follow one five-token template:

    <attr word> <attr word> <location word> near <context word>

The two attribute words (in shuffled order) name planted components of the
target's latent vector, the location word names the quadrant of the target's
box center, and the context word names the strongest first-factor attribute
of its nearest same-category neighbor. Images come in three hardness modes:

- easy: regions with image-wide disjoint attribute words at random
  positions; the attribute words alone identify the target.
- loc_hard: two regions share all attributes but sit in different quadrants,
  so only the location word separates them.
- contrast: three co-located regions (identical boxes, hence identical
  location geometry and a shared nearest neighbor) where two of them are
  two-faced blends over four first-factor attributes A, B, X, Y:

      target of "A B ..."  =  (1.0 A + 0.0 B + 0.5 X + 0.5 Y) * scale
      target of "X Y ..."  =  (0.5 A + 0.5 B + 1.0 X + 0.0 Y) * scale

  Per-word match sums tie on the pair for both expressions (1.0 + 0.0 =
  0.5 + 0.5), so any fixed per-word weighting of match scores ties on it.
  The two regions carry the same coordinate multiset {1.0, 0.5, 0.5, 0.0}
  times the common scale, so they agree on every property computable from a
  region alone (norms, subspace energies, coordinate histograms), and each
  is the referent of exactly one of the two expressions, so any such
  property is uninformative about the label even in aggregate. What
  separates them is only how concentrated the match profile is on the words
  actually in the expression; a scorer that reweights words by each region's
  own match strengths resolves both expressions, one that cannot is at
  chance on them.

The attribute basis is orthonormal, so planted blend coefficients equal
raw feature coordinates exactly (up to feature noise) and the tie/margin
structure above is exact. Expressions are unique within their image by
construction, making the task fully separable: the generation ledger records
the basis and the planted facts, and a template-parsing nearest-centroid
matcher over the ledger serves as the task's correctness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ExpressionRecord, ImageRecord, Region
from .language import Vocabulary, encode_tokens
from .params import SUBJECT_SLOTS
from .visual import Box, select_neighbors

__all__ = [
    "IMAGE_SIZE",
    "BUCKETS",
    "SynthSpec",
    "SynthLedger",
    "location_bucket",
    "generate_synthetic",
    "oracle_predict",
    "oracle_accuracy",
]

IMAGE_SIZE = 224.0
BUCKETS = ("left", "right", "top", "bottom")
RELATION_WORD = "near"
# reserved vocab ids + 4 bucket words + the relation word
_NON_ATTR_TOKENS = 2 + len(BUCKETS) + 1

_MODES = ("easy", "loc_hard", "contrast")
_MODE_PROBS = (0.5, 0.25, 0.25)

# contrast-mode blend coefficients: each twin is concentrated on its own
# expression's words and spread evenly over the other's; dominant + trace
# must equal twice even so per-word match sums tie on the pair. The common
# scale buys signal-to-noise headroom and cancels out of every cosine.
_DOMINANT = 1.0
_TRACE = 0.0
_EVEN = 0.5
_TWIN_SCALE = 2.0


@dataclass(frozen=True)
class SynthSpec:
    num_images: int = 500
    regions_per_image: int = 4
    vocab_size: int = 25
    num_attribute_factors: int = 3
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.regions_per_image < 2:
            raise ValueError("regions_per_image must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.num_attribute_factors < 2:
            raise ValueError("need at least two attribute factors")
        if self.values_per_factor < 2:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves fewer than 2 attribute words "
                f"per factor ({self.num_attribute_factors} factors, "
                f"{_NON_ATTR_TOKENS} reserved/function tokens)")
        if self.values_per_factor < self.regions_per_image:
            raise ValueError(
                "need at least regions_per_image attribute values per factor "
                "so regions within an image share no attribute words")

    @property
    def values_per_factor(self) -> int:
        return (self.vocab_size - _NON_ATTR_TOKENS) // self.num_attribute_factors


@dataclass
class SynthLedger:
    """Planted structure: what every token means and what every region is."""

    basis: np.ndarray                       # (K, A, d_v) orthonormal vectors
    attr_words: list[list[str]]             # [factor][value] -> token
    bucket_words: tuple[str, ...]
    relation_word: str
    image_modes: list[str]
    region_attrs: list[list[tuple[int, ...] | None]]  # combo, None for blends
    region_latents: list[np.ndarray]        # [image] -> (n, d_v) planted rows
    expr_facts: list[dict] = field(default_factory=list)


def location_bucket(box: Box, image_size: tuple[float, float]) -> str:
    """Quadrant of the box center: the dominant axis wins, x on ties."""
    w, h = image_size
    dx = box.center[0] - 0.5 * w
    dy = box.center[1] - 0.5 * h
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def _random_box(rng: np.random.Generator) -> Box:
    w = rng.uniform(25.0, 70.0)
    h = rng.uniform(25.0, 70.0)
    x = rng.uniform(0.0, IMAGE_SIZE - w)
    y = rng.uniform(0.0, IMAGE_SIZE - h)
    return Box(x, y, x + w, y + h)


def _box_at(cx: float, cy: float, rng: np.random.Generator) -> Box:
    w = rng.uniform(25.0, 50.0)
    h = rng.uniform(25.0, 50.0)
    x = min(max(cx - 0.5 * w, 0.0), IMAGE_SIZE - w)
    y = min(max(cy - 0.5 * h, 0.0), IMAGE_SIZE - h)
    return Box(x, y, x + w, y + h)


def _bucket_anchor(bucket: str, rng: np.random.Generator) -> tuple[float, float]:
    # a point safely inside the requested quadrant
    lo, hi = 0.15 * IMAGE_SIZE, 0.35 * IMAGE_SIZE
    mid_lo, mid_hi = 0.40 * IMAGE_SIZE, 0.60 * IMAGE_SIZE
    along = rng.uniform(mid_lo, mid_hi)
    depth = rng.uniform(lo, hi)
    if bucket == "left":
        return depth, along
    if bucket == "right":
        return IMAGE_SIZE - depth, along
    if bucket == "top":
        return along, depth
    return along, IMAGE_SIZE - depth


def _place_boxes(mode: str, n: int, rng: np.random.Generator) -> list[Box]:
    if mode == "easy":
        return [_random_box(rng) for _ in range(n)]

    if mode == "loc_hard":
        # regions 0 and 1 sit deep inside two different quadrants so the
        # shared-attribute pair is separable by location alone, never by a
        # near-boundary coin flip
        picks = rng.choice(len(BUCKETS), size=2, replace=False)
        boxes = [_box_at(*_bucket_anchor(BUCKETS[int(i)], rng), rng) for i in picks]
        boxes += [_random_box(rng) for _ in range(n - 2)]
        return boxes

    # contrast: regions 0-2 share one box, so their location encodings and
    # neighbor geometry are identical; everything else sits far away
    bucket = BUCKETS[rng.integers(len(BUCKETS))]
    cx, cy = _bucket_anchor(bucket, rng)
    shared = _box_at(cx, cy, rng)
    scx, scy = shared.center
    boxes = [shared, shared, shared]
    for _ in range(n - 3):
        for _ in range(64):
            b = _random_box(rng)
            if np.hypot(b.center[0] - scx, b.center[1] - scy) > 80.0:
                boxes.append(b)
                break
        else:
            raise RuntimeError("could not place contrast filler boxes")
    return boxes


def _combo_latent(basis: np.ndarray, combo: tuple[int, ...]) -> np.ndarray:
    return sum(basis[k][a] for k, a in enumerate(combo))


def _plan_image(mode: str, n: int, spec: SynthSpec, basis: np.ndarray,
                rng: np.random.Generator):
    """Plant latents and two attribute words per region for one image.

    Returns (combos, latents, words) where combos[r] is the full factor
    assignment (None for contrast blends), latents[r] the exact planted
    vector, and words[r] the two attribute tokens in semantic order.
    """
    v = spec.values_per_factor
    k = spec.num_attribute_factors

    def disjoint_combos(count):
        # no attribute word repeats within the image, in any factor
        cols = [rng.choice(v, size=count, replace=False) for _ in range(k)]
        return [tuple(int(cols[kk][j]) for kk in range(k)) for j in range(count)]

    if mode in ("easy", "loc_hard"):
        count = n - 1 if mode == "loc_hard" else n
        combos = disjoint_combos(count)
        if mode == "loc_hard":
            combos = [combos[0], *combos]
        latents = [_combo_latent(basis, c) for c in combos]
        return combos, latents, None

    # contrast: region 0 anchors the co-located trio, regions 1 and 2 are the
    # twin blends, and the rest are far fillers. Distinct first-factor values
    # keep every expression's attribute words true of its intended regions
    # only.
    f0 = rng.choice(v, size=n + 2, replace=False)
    f1 = rng.choice(v, size=n - 2, replace=False)
    f2 = rng.choice(v, size=n - 2, replace=False) if k >= 3 else None

    def side_combo(j):
        # u anchor is slot 0, far fillers are slots 1..; k >= 2 by validate
        pair = (int(f0[j + 4]), int(f1[j]))
        if k == 2:
            return pair
        tail = tuple(int(x) for x in rng.integers(0, v, size=k - 3))
        return (*pair, int(f2[j]), *tail)

    a, b, x, y = (basis[0][int(f0[i])] for i in range(4))
    combos: list[tuple[int, ...] | None] = [None] * n
    latents: list[np.ndarray] = [np.zeros(0)] * n
    words: list = [None] * n

    combos[0] = side_combo(0)
    latents[0] = _combo_latent(basis, combos[0])
    latents[1] = _TWIN_SCALE * (_DOMINANT * a + _TRACE * b + _EVEN * (x + y))
    latents[2] = _TWIN_SCALE * (_EVEN * (a + b) + _DOMINANT * x + _TRACE * y)
    words[1] = ((0, int(f0[0])), (0, int(f0[1])))
    words[2] = ((0, int(f0[2])), (0, int(f0[3])))
    for j in range(3, n):
        combos[j] = side_combo(j - 2)
        latents[j] = _combo_latent(basis, combos[j])
    return combos, latents, words


def generate_synthetic(spec: SynthSpec, feature_dim: int = 32) -> tuple[Dataset, SynthLedger]:
    """Build the dataset and its ledger; pure function of (spec, feature_dim)."""
    spec.validate()
    k_factors = spec.num_attribute_factors
    n_values = spec.values_per_factor
    n = spec.regions_per_image
    size = (IMAGE_SIZE, IMAGE_SIZE)
    if k_factors * n_values > feature_dim:
        raise ValueError(
            f"orthonormal attribute basis needs {k_factors * n_values} <= "
            f"feature_dim {feature_dim}")

    attr_words = [[f"f{k}w{a}" for a in range(n_values)] for k in range(k_factors)]
    tokens = [w for row in attr_words for w in row] + list(BUCKETS) + [RELATION_WORD]
    vocab = Vocabulary(tokens)

    rng0 = np.random.default_rng([spec.seed, 0])
    raw = rng0.normal(size=(feature_dim, k_factors * n_values))
    basis_flat = np.linalg.qr(raw)[0].T
    basis = basis_flat.reshape(k_factors, n_values, feature_dim)

    # contrast needs a co-located trio plus a far filler and enough distinct
    # first-factor values for the four blend faces and the side regions
    contrast_capable = n >= 4 and n_values >= n + 2

    ledger = SynthLedger(
        basis=basis,
        attr_words=attr_words,
        bucket_words=BUCKETS,
        relation_word=RELATION_WORD,
        image_modes=[],
        region_attrs=[],
        region_latents=[],
    )
    images: list[ImageRecord] = []
    expressions: list[ExpressionRecord] = []

    for i in range(spec.num_images):
        rng = np.random.default_rng([spec.seed, 1, i])
        mode = _MODES[rng.choice(len(_MODES), p=_MODE_PROBS)]
        if mode == "contrast" and not contrast_capable:
            mode = "loc_hard"

        # retry placement + attributes until every expression is unique
        for _ in range(64):
            boxes = _place_boxes(mode, n, rng)
            combos, latents, blend_words = _plan_image(mode, n, spec, basis, rng)
            cats = [1] * n
            neighbor_lists = [select_neighbors(r, boxes, cats) for r in range(n)]

            def f0_word(j: int) -> str:
                if combos[j] is not None:
                    return attr_words[0][combos[j][0]]
                # blends: their strongest first-factor word comes first
                return attr_words[0][blend_words[j][0][1]]

            planted = []
            for r in range(n):
                if combos[r] is not None:
                    pair = ((0, combos[r][0]), (1, combos[r][1]))
                else:
                    pair = blend_words[r]
                wds = tuple(attr_words[kk][aa] for kk, aa in pair)
                bucket = location_bucket(boxes[r], size)
                nearest = neighbor_lists[r][0] if neighbor_lists[r] else None
                rel_word = f0_word(nearest) if nearest is not None else None
                planted.append((wds, bucket, rel_word))
            if len(set(planted)) == n and all(p[2] is not None for p in planted):
                break
        else:
            raise RuntimeError(f"image {i}: could not plant a separable layout")

        regions = []
        for r in range(n):
            grid = latents[r] + rng.normal(
                0.0, spec.noise_std, size=(SUBJECT_SLOTS, feature_dim))
            regions.append(Region(box=boxes[r], category_id=1, subject_grid=grid,
                                  neighbor_indices=neighbor_lists[r]))
        images.append(ImageRecord(width=IMAGE_SIZE, height=IMAGE_SIZE, regions=regions))
        ledger.image_modes.append(mode)
        ledger.region_attrs.append([tuple(c) if c is not None else None for c in combos])
        ledger.region_latents.append(np.stack(latents))

        # word order is shuffled so position carries no attribute information;
        # the blend pair takes opposite orders so a position prior is exactly
        # balanced on it, per pair, not just in expectation
        pair_flip = rng.random() < 0.5
        for r in range(n):
            wds, bucket, rel_word = planted[r]
            shuffled = list(wds)
            if mode == "contrast" and r in (1, 2):
                flip = pair_flip if r == 1 else not pair_flip
            else:
                flip = rng.random() < 0.5
            if flip:
                shuffled.reverse()
            toks = [*shuffled, bucket, RELATION_WORD, rel_word]
            expressions.append(ExpressionRecord(
                image_id=i, target_region=r, tokens=toks,
                token_ids=encode_tokens(toks, vocab)))
            ledger.expr_facts.append({
                "image_id": i, "target_region": r, "attr_words": wds,
                "bucket": bucket, "rel_word": rel_word, "mode": mode,
                "dominant": wds[0] if mode == "contrast" and r in (1, 2) else None,
            })

    dataset = Dataset(feature_dim=feature_dim, vocab=vocab,
                      images=images, expressions=expressions)
    dataset.validate()
    return dataset, ledger


# --- ledger oracle -----------------------------------------------------------

_BIG = 1e6


def oracle_predict(dataset: Dataset, ledger: SynthLedger, expr_index: int) -> int:
    """Template-parsing nearest-centroid matcher over the planted basis.

    Parses the expression by template, then scores each region by how its
    observed pooled feature projects onto the named attribute vectors, with
    hard penalties for a wrong quadrant or a wrong nearest-neighbor
    first-factor attribute (neighbor attributes are estimated from observed
    features, not read from the ledger). Two attribute words from the same
    factor name a dominant/trace blend; there the dominance rule applies:
    the referent is the region whose single best word match is strongest.
    """
    expr = dataset.expressions[expr_index]
    image = dataset.images[expr.image_id]
    word_to_value = {w: (kk, aa) for kk, row in enumerate(ledger.attr_words)
                     for aa, w in enumerate(row)}
    bucket_set = set(ledger.bucket_words)

    attr_tokens = []
    for tok in expr.tokens:
        if tok in bucket_set:
            break
        attr_tokens.append(tok)
    want_bucket = expr.tokens[len(attr_tokens)]
    want_rel = expr.tokens[len(attr_tokens) + 2]

    named = [word_to_value[w] for w in attr_tokens]
    vecs = [ledger.basis[kk][aa] for kk, aa in named]
    dominance = len(named) == 2 and named[0][0] == named[1][0]

    f0 = ledger.basis[0]
    pooled = [r.pooled_feature() for r in image.regions]

    def first_factor_word(j: int) -> str:
        return ledger.attr_words[0][int((f0 @ pooled[j]).argmax())]

    size = image.size
    best, best_score = 0, -np.inf
    for r, region in enumerate(image.regions):
        dots = [float(v @ pooled[r]) for v in vecs]
        score = max(dots) if dominance else sum(dots)
        if location_bucket(region.box, size) != want_bucket:
            score -= _BIG
        if region.neighbor_indices:
            if first_factor_word(region.neighbor_indices[0]) != want_rel:
                score -= _BIG
        else:
            score -= _BIG
        if score > best_score:
            best, best_score = r, score
    return best


def oracle_accuracy(dataset: Dataset, ledger: SynthLedger,
                    indices: list[int] | None = None) -> float:
    if indices is None:
        indices = range(len(dataset.expressions))
    indices = list(indices)
    hits = sum(oracle_predict(dataset, ledger, i) == dataset.expressions[i].target_region
               for i in indices)
    return hits / len(indices)
