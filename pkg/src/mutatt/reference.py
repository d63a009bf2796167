"""Straight-line reimplementation of the scoring math, for verification.

Computes the overall region-expression score with plain numpy directly from
the parameter arrays, sharing no code with the differentiable pipeline. Any
disagreement beyond float round-off points at a pipeline defect. Keep this
file boring: no tensors, no reuse, formulas written out once, top to bottom.
"""

from __future__ import annotations

import numpy as np

from .matching import Ablation
from .params import CONTEXT_SLOTS, LOCATION_DIM, MODULES
from .visual import RegionFeatures

__all__ = ["reference_overall_score"]

_EPS = 1e-12


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        e = np.exp(x - x.max())
        return e / e.sum()
    out = np.zeros_like(x)
    live = x[mask]
    e = np.exp(live - live.max())
    out[mask] = e / e.sum()
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _EPS or nb < _EPS:
        return 0.0
    return float(a @ b) / (na * nb)


def reference_overall_score(region: RegionFeatures, token_ids: np.ndarray,
                            arrays: dict[str, np.ndarray],
                            ablation: Ablation = Ablation()) -> float:
    ids = np.asarray(token_ids, dtype=np.int64)
    live = ids != 0
    emb = arrays["embedding"][ids].copy()
    emb[~live] = 0.0
    t_len, d = emb.shape

    pos = np.zeros((t_len, d))
    for t in range(t_len):
        for i in range(d):
            angle = t / (10000.0 ** (2.0 * (i // 2) / d))
            pos[t, i] = np.sin(angle) if i % 2 == 0 else np.cos(angle)
    augmented = np.concatenate([emb, pos], axis=1)

    lam = {m: _softmax(augmented @ arrays[f"lang_query.{m}"], live) for m in MODULES}
    phrase = {m: lam[m] @ emb for m in MODULES}

    idx = np.flatnonzero(live)
    summary = np.concatenate([emb[idx[0]], emb[idx[-1]], emb[idx].mean(axis=0)])
    omega = _softmax(summary @ arrays["weight_head_w"] + arrays["weight_head_b"], None)

    w, h = region.image_size
    box = region.box
    loc_vec = np.array([box.x_tl / w, box.y_tl / h, box.x_br / w, box.y_br / h,
                        box.area / (w * h)])
    offsets = np.zeros((CONTEXT_SLOTS, LOCATION_DIM))
    ctx_mask = np.zeros(CONTEXT_SLOTS, dtype=bool)
    for j, slot in enumerate(region.context):
        nb = slot.box
        offsets[j] = [(nb.x_tl - box.x_tl) / box.width,
                      (nb.y_tl - box.y_tl) / box.height,
                      (nb.x_br - box.x_br) / box.width,
                      (nb.y_br - box.y_br) / box.height,
                      nb.area / (w * h)]
        ctx_mask[j] = True

    d_v = region.subject_grid.shape[1]
    feats = {}
    masks = {}
    pooled = {}

    feats["subj"] = region.subject_grid @ arrays["proj_w.subj"] + arrays["proj_b.subj"]
    masks["subj"] = np.ones(feats["subj"].shape[0], dtype=bool)
    pooled["subj"] = feats["subj"].mean(axis=0)

    loc_input = np.concatenate([loc_vec, offsets.reshape(-1)])
    loc_row = loc_input @ arrays["proj_w.loc"] + arrays["proj_b.loc"]
    feats["loc"] = loc_row[None, :]
    masks["loc"] = np.ones(1, dtype=bool)
    pooled["loc"] = loc_row

    rel_rows = np.zeros((CONTEXT_SLOTS, d))
    for j, slot in enumerate(region.context):
        rel_in = np.concatenate([np.asarray(slot.feature, dtype=np.float64), offsets[j]])
        rel_rows[j] = rel_in @ arrays["proj_w.rel"] + arrays["proj_b.rel"]
    feats["rel"] = rel_rows
    masks["rel"] = ctx_mask
    pooled["rel"] = rel_rows[ctx_mask].mean(axis=0) if ctx_mask.any() else np.zeros(d)

    total = 0.0
    for i, m in enumerate(MODULES):
        mode = ablation.mode(m)
        v = pooled[m]
        q = phrase[m]

        if mode == "none":
            vl = _cosine(v, q)
            guided_v = v
        else:
            sims = np.zeros(t_len)
            for t in range(t_len):
                sims[t] = _cosine(v, emb[t])
            weights = _softmax(lam[m] * sims, live)
            guided_q = weights @ emb
            vl = _cosine(v, guided_q)
            if mode == "mutual" and masks[m].any():
                n_m = feats[m].shape[0]
                hidden = np.tanh(
                    np.concatenate([feats[m], np.tile(q, (n_m, 1))], axis=1)
                    @ arrays[f"attn_w1.{m}"] + arrays[f"attn_b1.{m}"])
                logits = hidden @ arrays[f"attn_w2.{m}"]
                a = _softmax(logits, masks[m])
                guided_v = a @ feats[m]
            else:
                guided_v = v

        x = np.concatenate([q, guided_v])
        hid = np.maximum(x @ arrays[f"mlp_w1.{m}"] + arrays[f"mlp_b1.{m}"], 0.0)
        lv = float(hid @ arrays[f"mlp_w2.{m}"] + arrays[f"mlp_b2.{m}"])

        total += omega[i] * (vl + lv)
    return float(total)
