"""Mutual guidance scoring between one region and one expression.

Each channel (subject, location, relationship) runs two routes. The
vision-to-language route reweights word embeddings by their cosine
similarity to the pooled visual feature and scores the result against that
pooled feature. The language-to-text route attends over visual slots with
the phrase vector and scores phrase plus attended visual through a small
MLP. The channel score is the sum of both routes; the overall score mixes
channels with the expression's channel weights.

Ablation arms disable the routes per channel: "none" scores pooled feature
against raw phrase, "vl" keeps only the vision-to-language guidance (slot
attention replaced by the uniform pooled feature), "mutual" runs both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .language import ExpressionEncoding
from .params import MODULES, ModelParams
from .tensor import Tensor
from .visual import ModuleVisuals, RegionFeatures, assemble_module_visuals

__all__ = [
    "ABLATION_MODES",
    "Ablation",
    "ModuleScore",
    "OverallScore",
    "word_visual_similarity",
    "visual_guided_language",
    "vl_match_score",
    "language_guided_attention",
    "language_guided_visual",
    "lv_match_score",
    "module_score",
    "overall_score",
    "format_attention_dump",
]

ABLATION_MODES = ("none", "vl", "mutual")


@dataclass(frozen=True)
class Ablation:
    """Per-channel guidance mode."""

    subj: str = "mutual"
    loc: str = "mutual"
    rel: str = "mutual"

    def __post_init__(self):
        for m in MODULES:
            mode = getattr(self, m)
            if mode not in ABLATION_MODES:
                raise ValueError(f"unknown ablation mode {mode!r} for {m}; "
                                 f"expected one of {ABLATION_MODES}")

    def mode(self, module: str) -> str:
        return getattr(self, module)

    @classmethod
    def parse(cls, text: str) -> "Ablation":
        """Parse "subj=mutual,loc=vl,rel=none"; omitted channels stay mutual."""
        modes = {}
        text = text.strip()
        if text:
            for part in text.split(","):
                if "=" not in part:
                    raise ValueError(f"bad ablation clause {part!r}, expected MODULE=MODE")
                module, mode = (s.strip() for s in part.split("=", 1))
                if module not in MODULES:
                    raise ValueError(f"unknown module {module!r}; expected one of {MODULES}")
                modes[module] = mode
        return cls(**modes)

    def __str__(self) -> str:
        return ",".join(f"{m}={self.mode(m)}" for m in MODULES)


@dataclass
class ModuleScore:
    """One channel's routes and intermediates, kept for inspection."""

    vl_score: Tensor                 # scalar, cosine in [-1, 1]
    lv_score: Tensor                 # scalar, raw MLP output
    combined: Tensor                 # scalar, vl + lv
    word_similarities: Tensor        # (T,)
    word_weights: Tensor             # (T,) softmax over non-padding words
    visual_attention: Tensor         # (N,) sums to 1 over unmasked slots
    guided_language: Tensor          # (d,)
    guided_visual: Tensor            # (d,)
    hidden: Tensor | None            # (N, d_h) pre-attention, mutual arm only


@dataclass
class OverallScore:
    module_scores: dict[str, ModuleScore]
    module_weights: Tensor           # (3,)
    total: Tensor                    # scalar


def word_visual_similarity(pooled_v: Tensor, word_embeddings: Tensor) -> Tensor:
    """Cosine between the pooled visual feature and every word embedding."""
    return T.cosine_rows(pooled_v, word_embeddings)


def visual_guided_language(word_embeddings: Tensor, similarities: Tensor,
                           word_attention: Tensor,
                           mask: np.ndarray | None = None) -> Tensor:
    """Sentence vector reweighted by vision: softmax of the elementwise
    product of word attention and word similarity, applied to embeddings."""
    weights = T.softmax(T.mul(word_attention, similarities), mask=mask)
    return T.matmul(weights, word_embeddings)


def _guided_language_weights(word_embeddings: Tensor, similarities: Tensor,
                             word_attention: Tensor,
                             mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    weights = T.softmax(T.mul(word_attention, similarities), mask=mask)
    return weights, T.matmul(weights, word_embeddings)


def vl_match_score(pooled_v: Tensor, guided_q: Tensor) -> Tensor:
    return T.cosine_similarity(pooled_v, guided_q)


def language_guided_attention(visuals: Tensor, mask: np.ndarray, phrase: Tensor,
                              params: ModelParams, module: str) -> tuple[Tensor, Tensor]:
    """Slot attention conditioned on the phrase: per-slot hidden state from
    [slot ; phrase], scalar logits, masked softmax. Returns (attention, hidden)."""
    n = visuals.data.shape[0]
    paired = T.concat([visuals, T.broadcast_row(phrase, n)], axis=1)
    hidden = T.tanh(T.linear(paired, params.get("attn_w1", module),
                             params.get("attn_b1", module)))
    logits = T.matmul(hidden, params.get("attn_w2", module))
    return T.softmax(logits, mask=mask), hidden


def language_guided_visual(visuals: Tensor, attention: Tensor) -> Tensor:
    """Attention-weighted sum of visual slot features."""
    return T.matmul(attention, visuals)


def lv_match_score(phrase: Tensor, guided_v: Tensor,
                   params: ModelParams, module: str) -> Tensor:
    """Two-layer scorer on [phrase ; guided visual]: linear, relu, linear."""
    x = T.concat([phrase, guided_v])
    h = T.relu(T.linear(x, params.get("mlp_w1", module), params.get("mlp_b1", module)))
    return T.add(T.matmul(h, params.get("mlp_w2", module)), params.get("mlp_b2", module))


def _uniform_attention(mask: np.ndarray) -> Tensor:
    a = np.zeros(mask.shape[0])
    if mask.any():
        a[mask] = 1.0 / mask.sum()
    return Tensor(a)


def module_score(visuals: ModuleVisuals, expression: ExpressionEncoding,
                 module: str, params: ModelParams, mode: str = "mutual") -> ModuleScore:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    phrase = expression.phrase_embeddings[module]
    lam = expression.word_attention[module]
    emb = expression.word_embeddings
    pad_mask = expression.pad_mask

    sims = word_visual_similarity(visuals.pooled, emb)

    if mode == "none":
        # raw pooled feature against raw phrase, both routes unguided
        word_weights = lam
        guided_q = phrase
        attention = _uniform_attention(visuals.mask)
        guided_v = visuals.pooled
        hidden = None
    elif mode == "vl":
        word_weights, guided_q = _guided_language_weights(emb, sims, lam, pad_mask)
        attention = _uniform_attention(visuals.mask)
        guided_v = visuals.pooled
        hidden = None
    else:
        word_weights, guided_q = _guided_language_weights(emb, sims, lam, pad_mask)
        if visuals.mask.any():
            attention, hidden = language_guided_attention(
                visuals.features, visuals.mask, phrase, params, module)
            guided_v = language_guided_visual(visuals.features, attention)
        else:
            # no real slots (empty relationship context): nothing to attend to
            attention = Tensor(np.zeros(visuals.mask.shape[0]))
            guided_v = visuals.pooled
            hidden = None

    vl = vl_match_score(visuals.pooled, guided_q)
    lv = lv_match_score(phrase, guided_v, params, module)
    return ModuleScore(
        vl_score=vl,
        lv_score=lv,
        combined=T.add(vl, lv),
        word_similarities=sims,
        word_weights=word_weights,
        visual_attention=attention,
        guided_language=guided_q,
        guided_visual=guided_v,
        hidden=hidden,
    )


def overall_score(region: RegionFeatures | dict[str, ModuleVisuals],
                  expression: ExpressionEncoding, params: ModelParams,
                  ablation: Ablation = Ablation()) -> OverallScore:
    """Channel scores mixed by the expression's channel weights.

    Accepts either raw region features or channel visuals already assembled
    for this graph, so callers scoring one region against several
    expressions can share the projection nodes.
    """
    if isinstance(region, RegionFeatures):
        visuals = assemble_module_visuals(region, params)
    else:
        visuals = region
    scores = {m: module_score(visuals[m], expression, m, params, ablation.mode(m))
              for m in MODULES}
    omega = expression.module_weights
    total = None
    for i, m in enumerate(MODULES):
        term = T.mul(T.vector_item(omega, i), scores[m].combined)
        total = term if total is None else T.add(total, term)
    return OverallScore(module_scores=scores, module_weights=omega, total=total)


def format_attention_dump(score: OverallScore, tokens: list[str]) -> str:
    """Numeric attention record for one region-expression pair."""
    lines = [f"tokens: {' '.join(tokens)}"]
    w = score.module_weights.data
    lines.append("channel_weights: " + " ".join(
        f"{m}={w[i]:.6f}" for i, m in enumerate(MODULES)))
    for m in MODULES:
        ms = score.module_scores[m]
        lines.append(f"[{m}] vl={float(ms.vl_score.data):+.6f} "
                     f"lv={float(ms.lv_score.data):+.6f} "
                     f"combined={float(ms.combined.data):+.6f}")
        lines.append(f"[{m}] word_similarities: "
                     + " ".join(f"{x:+.4f}" for x in ms.word_similarities.data))
        lines.append(f"[{m}] word_weights: "
                     + " ".join(f"{x:.4f}" for x in ms.word_weights.data))
        lines.append(f"[{m}] visual_attention: "
                     + " ".join(f"{x:.4f}" for x in ms.visual_attention.data))
    lines.append(f"total: {float(score.total.data):+.6f}")
    return "\n".join(lines)
