"""Expression side of the matcher.

A tokenized referring expression becomes: per-word embeddings, one attention
distribution over words per matching channel, one phrase vector per channel,
and a 3-way softmax weighting the channels. Word attention scores each word
by a learned per-channel query against the word embedding concatenated with
a fixed sinusoidal position code.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .params import MODULES, ModelParams
from .tensor import Tensor

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "Vocabulary",
    "tokenize",
    "encode_tokens",
    "position_codes",
    "embed",
    "word_attention",
    "phrase_embedding",
    "module_weights",
    "ExpressionEncoding",
    "encode_expression",
]

PAD_ID = 0
UNK_ID = 1
_RESERVED = 2


class Vocabulary:
    """Token <-> id map with two reserved ids: 0 padding, 1 unknown."""

    def __init__(self, tokens: list[str]):
        self._tokens = list(tokens)
        self._ids = {}
        for offset, tok in enumerate(self._tokens):
            if tok in self._ids:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            if "\n" in tok or not tok:
                raise ValueError(f"vocabulary token not serializable: {tok!r}")
            self._ids[tok] = _RESERVED + offset

    def __len__(self) -> int:
        return _RESERVED + len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if token_id == PAD_ID:
            return "<pad>"
        if token_id == UNK_ID:
            return "<unk>"
        return self._tokens[token_id - _RESERVED]

    def save(self, path) -> None:
        # one token per line, line number = id - 2
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace split."""
    return text.lower().split()


def encode_tokens(tokens: list[str], vocab: Vocabulary) -> np.ndarray:
    """Map tokens to ids; unseen tokens become the unknown id."""
    if not tokens:
        raise ValueError("empty expression: no tokens to encode")
    return np.array([vocab.id_of(t) for t in tokens], dtype=np.int64)


@lru_cache(maxsize=256)
def _position_codes_cached(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    codes = np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))
    codes.setflags(write=False)
    return codes


def position_codes(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position codes, shape (length, dim), base 10000."""
    if length < 1 or dim < 1:
        raise ValueError("position_codes needs positive length and dim")
    return _position_codes_cached(length, dim)


def embed(token_ids: np.ndarray, params: ModelParams) -> Tensor:
    """Rows of the embedding table; padding rows zero and gradient-free."""
    return T.embedding_lookup(params["embedding"], token_ids, padding_id=PAD_ID)


def word_attention(word_embeddings: Tensor, params: ModelParams, module: str,
                   mask: np.ndarray | None = None) -> Tensor:
    """Attention over words for one channel: softmax of a learned query
    against [embedding ; position code], padding positions masked to 0."""
    n, d = word_embeddings.data.shape
    pos = Tensor(np.ascontiguousarray(position_codes(n, d)))
    augmented = T.concat([word_embeddings, pos], axis=1)
    logits = T.matmul(augmented, params.get("lang_query", module))
    return T.softmax(logits, mask=mask)


def phrase_embedding(word_embeddings: Tensor, lam: Tensor) -> Tensor:
    """Attention-weighted sum of word embeddings."""
    return T.matmul(lam, word_embeddings)


def module_weights(word_embeddings: Tensor, params: ModelParams,
                   mask: np.ndarray | None = None) -> Tensor:
    """Channel mixture (subj, loc, rel): softmax of a linear map applied to
    the first, last, and mean non-padding word embeddings."""
    n = word_embeddings.data.shape[0]
    if mask is None:
        live = np.arange(n)
    else:
        live = np.flatnonzero(mask)
        if live.size == 0:
            raise ValueError("module_weights: expression is all padding")
    first = T.matrix_row(word_embeddings, int(live[0]))
    last = T.matrix_row(word_embeddings, int(live[-1]))
    sel = np.zeros(n)
    sel[live] = 1.0 / live.size
    mean = T.matmul(Tensor(sel), word_embeddings)
    summary = T.concat([first, last, mean])
    logits = T.linear(summary, params["weight_head_w"], params["weight_head_b"])
    return T.softmax(logits)


@dataclass
class ExpressionEncoding:
    """Everything the matcher needs from one expression."""

    token_ids: np.ndarray
    pad_mask: np.ndarray                    # True at non-padding positions
    word_embeddings: Tensor                 # (T, d)
    phrase_embeddings: dict[str, Tensor]    # module -> (d,)
    word_attention: dict[str, Tensor]       # module -> (T,)
    module_weights: Tensor                  # (3,) ordered (subj, loc, rel)


def encode_expression(token_ids: np.ndarray, params: ModelParams) -> ExpressionEncoding:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 1 or token_ids.size == 0:
        raise ValueError("empty expression: need at least one token id")
    pad_mask = token_ids != PAD_ID
    if not pad_mask.any():
        raise ValueError("empty expression: all positions are padding")
    emb = embed(token_ids, params)
    attn = {m: word_attention(emb, params, m, mask=pad_mask) for m in MODULES}
    phrases = {m: phrase_embedding(emb, attn[m]) for m in MODULES}
    weights = module_weights(emb, params, mask=pad_mask)
    return ExpressionEncoding(
        token_ids=token_ids,
        pad_mask=pad_mask,
        word_embeddings=emb,
        phrase_embeddings=phrases,
        word_attention=attn,
        module_weights=weights,
    )
