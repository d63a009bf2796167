"""Vocabulary, position codes, and expression encoding."""

import numpy as np
import pytest

from mutatt.language import (PAD_ID, UNK_ID, Vocabulary, encode_expression,
                             encode_tokens, position_codes, tokenize)
from mutatt.params import MODULES, ModelDims, ModelParams

DIMS = ModelDims(vocab_size=12, embed=8, hidden=6, visual=10)


def make_params(seed=0):
    return ModelParams.create(DIMS, seed=seed)


class TestVocabulary:
    def test_reserved_ids(self):
        vocab = Vocabulary(["red", "ball"])
        assert vocab.id_of("red") == 2
        assert vocab.id_of("ball") == 3
        assert vocab.id_of("missing") == UNK_ID
        assert vocab.token_of(PAD_ID) == "<pad>"
        assert vocab.token_of(UNK_ID) == "<unk>"
        assert len(vocab) == 4

    def test_round_trip(self):
        vocab = Vocabulary(["a", "b", "c"])
        for tok in ("a", "b", "c"):
            assert vocab.token_of(vocab.id_of(tok)) == tok

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["x", "x"])

    def test_unserializable_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["ok", "bad\ntoken"])
        with pytest.raises(ValueError):
            Vocabulary([""])

    def test_save_load(self, tmp_path):
        vocab = Vocabulary(["left", "right", "near"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        back = Vocabulary.load(path)
        assert len(back) == len(vocab)
        assert all(back.id_of(t) == vocab.id_of(t) for t in ("left", "right", "near"))


def test_tokenize_lowercases_and_splits():
    assert tokenize("Red  Ball\tnear Box") == ["red", "ball", "near", "box"]


def test_encode_tokens_maps_unknowns():
    vocab = Vocabulary(["red"])
    ids = encode_tokens(["red", "blue"], vocab)
    assert ids.tolist() == [2, UNK_ID]
    assert ids.dtype == np.int64
    with pytest.raises(ValueError):
        encode_tokens([], vocab)


class TestPositionCodes:
    def test_hand_values(self):
        # position p, even dim 2i -> sin(p / 10000^(2i/d)), odd -> cos
        codes = position_codes(3, 4)
        p, d = 2, 4
        assert codes[0, 0] == 0.0
        assert codes[0, 1] == 1.0
        assert np.isclose(codes[p, 0], np.sin(p))
        assert np.isclose(codes[p, 1], np.cos(p))
        assert np.isclose(codes[p, 2], np.sin(p / 10000.0 ** (2.0 / d)))
        assert np.isclose(codes[p, 3], np.cos(p / 10000.0 ** (2.0 / d)))

    def test_bounded_and_cached(self):
        a = position_codes(7, 8)
        assert np.abs(a).max() <= 1.0
        assert position_codes(7, 8) is a

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            position_codes(0, 4)


class TestEncodeExpression:
    def test_shapes_and_mask(self):
        params = make_params()
        ids = np.array([3, 5, PAD_ID, PAD_ID])
        enc = encode_expression(ids, params)
        assert enc.pad_mask.tolist() == [True, True, False, False]
        assert enc.word_embeddings.data.shape == (4, DIMS.embed)
        assert set(enc.phrase_embeddings) == set(MODULES)
        assert set(enc.word_attention) == set(MODULES)
        assert enc.module_weights.data.shape == (3,)

    def test_padding_gets_no_attention(self):
        params = make_params()
        enc = encode_expression(np.array([3, 5, PAD_ID]), params)
        for m in MODULES:
            attn = enc.word_attention[m].data
            assert attn[2] == 0.0
            assert np.isclose(attn.sum(), 1.0)

    def test_phrase_is_attention_weighted_sum(self):
        params = make_params()
        enc = encode_expression(np.array([2, 4, 6]), params)
        for m in MODULES:
            want = enc.word_attention[m].data @ enc.word_embeddings.data
            np.testing.assert_allclose(enc.phrase_embeddings[m].data, want,
                                       rtol=0, atol=1e-14)

    def test_module_weights_sum_to_one(self):
        params = make_params(seed=3)
        enc = encode_expression(np.array([2, 3, 4, 5]), params)
        w = enc.module_weights.data
        assert np.isclose(w.sum(), 1.0)
        assert (w > 0).all()

    def test_rejects_all_padding(self):
        params = make_params()
        with pytest.raises(ValueError):
            encode_expression(np.array([PAD_ID, PAD_ID]), params)
        with pytest.raises(ValueError):
            encode_expression(np.array([], dtype=np.int64), params)

    def test_padding_invariance_of_live_words(self):
        # appending padding must not change any live-word quantity
        params = make_params(seed=5)
        short = encode_expression(np.array([4, 7]), params)
        padded = encode_expression(np.array([4, 7, PAD_ID, PAD_ID]), params)
        for m in MODULES:
            np.testing.assert_allclose(padded.word_attention[m].data[:2],
                                       short.word_attention[m].data,
                                       rtol=0, atol=1e-12)
            np.testing.assert_allclose(padded.phrase_embeddings[m].data,
                                       short.phrase_embeddings[m].data,
                                       rtol=0, atol=1e-12)
        np.testing.assert_allclose(padded.module_weights.data,
                                   short.module_weights.data, rtol=0, atol=1e-12)
