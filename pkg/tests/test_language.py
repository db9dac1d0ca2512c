"""Attention primitives, vocabulary and the keyword encoder."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retcap import tensor as T
from retcap.attention import (MASK_VALUE, MhaParams, causal_mask, init_mha, multi_head_attention,
                              padding_mask, scaled_dot_attention)
from retcap.gradcheck import check_block, check_gradients
from retcap.language import (BOS, EOS, PAD, UNK, KeywordEmbeddings, Vocab, embed_keywords, encode_keywords,
                             init_language, mha, self_attention)
from retcap.rng import Rng
from retcap.tensor import ContractError, Tensor

from conftest import randn

F64 = np.float64


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=F64), requires_grad=grad, dtype=F64)


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab(["cat"])
        assert v.encode(["<pad>", "<unk>", "<bos>", "<eos>"]) == [PAD, UNK, BOS, EOS]
        assert v.encode(["cat", "dog"]) == [4, UNK]

    def test_build_by_frequency_then_alphabet(self):
        v = Vocab.build([["b", "a", "c"], ["c", "b"]], max_size=6)
        assert v.itos[4:] == ["b", "c"]

    def test_cap_enforced(self):
        v = Vocab(["a"], max_size=5)
        with pytest.raises(ValueError):
            v.add("b")

    def test_decode_strips_specials(self):
        v = Vocab(["x", "y"])
        assert v.decode([BOS, 4, UNK, 5, EOS, PAD]) == ["x", "<unk>", "y"]

    def test_file_round_trip(self, tmp_path):
        v = Vocab(["drusen", "fundus", "ünicode"])
        v.save(tmp_path / "v.txt")
        lines = (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()
        assert lines[1] == "fundus" and v.stoi["fundus"] == 1 + 4
        assert Vocab.load(tmp_path / "v.txt") == v

    @given(st.lists(st.text("abcdef", min_size=1, max_size=3), max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_bijection(self, toks):
        v = Vocab.build([toks], max_size=20)
        assert len(v) <= 20
        assert all(v.stoi[t] == i for i, t in enumerate(v.itos))


class TestEmbedding:
    def test_repeated_ids_identical_rows(self):
        ke = embed_keywords([5, 5], t64(randn(0, 8, 3)))
        assert np.array_equal(ke.KE.data[0], ke.KE.data[1])

    def test_zero_row(self):
        table = randn(1, 8, 3)
        table[6] = 0
        assert not embed_keywords([6], t64(table)).KE.data.any()

    def test_grad_counts(self):
        table = t64(randn(2, 8, 3), grad=True)
        T.sum(embed_keywords([4, 4, 7, PAD], table).KE).backward()
        assert table.grad[:, 0].tolist() == [1, 0, 0, 0, 2, 0, 0, 1]

    def test_pad_mask_and_range(self):
        assert embed_keywords([4, PAD], t64(randn(3, 6, 2))).mask.tolist() == [False, True]
        with pytest.raises(IndexError):
            embed_keywords([6], t64(randn(3, 6, 2)))


class TestScaledDotAttention:
    def test_singleton_returns_value(self):
        v = randn(4, 1, 3)
        out = self_attention(t64(randn(5, 1, 3)), t64(randn(6, 1, 3)), t64(v))
        assert np.array_equal(out.data, v)

    def test_zero_logits_average_unmasked(self):
        v = randn(7, 4, 3)
        q, k = t64(np.zeros((2, 3))), t64(randn(8, 4, 3))
        out = self_attention(q, k, t64(v), mask=np.array([False, True, False, False]))
        assert np.allclose(out.data, v[[0, 2, 3]].mean(0), atol=1e-12)

    def test_hand_softmax(self):
        d_k = 4
        q = t64(np.eye(1, d_k))
        k = t64(np.array([[0.0, 0, 0, 0], [math.log(3) * math.sqrt(d_k), 0, 0, 0]]))
        _, w = scaled_dot_attention(q, k, t64(np.eye(2, d_k)))
        assert np.allclose(w.data, [[0.25, 0.75]], atol=1e-12)

    def test_all_masked_row_raises(self):
        with pytest.raises(ContractError):
            padding_mask(np.array([[False, False], [True, True]]))

    def test_causal_mask(self):
        m = causal_mask(3)
        assert (m[np.triu_indices(3, 1)] == MASK_VALUE).all() and (m[np.tril_indices(3)] == 0).all()

    @given(st.integers(0, 10_000), st.integers(1, 6), st.data())
    @settings(max_examples=60, deadline=None)
    def test_rows_stochastic_and_pad_ignored(self, seed, n, data):
        pad = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        if pad.all():
            pad[0] = False
        _, w = scaled_dot_attention(t64(5 * randn(seed, 3, 4)), t64(5 * randn(seed + 1, n, 4)),
                                    t64(randn(seed + 2, n, 2)), padding_mask(pad))
        assert np.allclose(w.data.sum(-1), 1, atol=1e-6)
        assert (w.data[:, pad] <= 1e-6).all()


class TestMultiHead:
    def test_masked_mean_composition(self):
        d = 4
        p = MhaParams(t64(np.zeros((d, d))), t64(np.zeros((d, d))), t64(np.eye(d)), t64(np.eye(d)), heads=1)
        ke = randn(9, 3, d)
        out = mha(KeywordEmbeddings(t64(ke), np.array([False, False, True])), p)
        assert np.allclose(out.data, np.broadcast_to(ke[:2].mean(0), (3, d)), atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_output_shape(self, n):
        p = init_mha(Rng(0), 8, 2, dtype=F64)
        out, w = multi_head_attention(t64(randn(n, n, 8)), t64(randn(n, n, 8)), p)
        assert out.shape == (n, 8) and w.shape == (n, n)

    def test_heads_use_own_columns(self):
        """Two heads equal the concatenation of two single-head attentions."""
        p = init_mha(Rng(1), 4, 2, dtype=F64)
        x = t64(randn(10, 3, 4))
        out, _ = multi_head_attention(x, x, p)
        heads = []
        for h in range(2):
            cols = slice(2 * h, 2 * h + 2)
            q, k, v = (t64(x.data @ w.data[:, cols]) for w in (p.w_q, p.w_k, p.w_v))
            heads.append(scaled_dot_attention(q, k, v)[0].data)
        assert np.allclose(out.data, np.concatenate(heads, -1) @ p.w_o.data, atol=1e-12)

    def test_mha_gradient_check(self):
        err, _ = check_block("mha")
        assert err <= 1e-4


class TestEncodeKeywords:
    @pytest.fixture
    def lang(self):
        return init_language(Rng(2), 12, 8, 2, dtype=F64)

    def run(self, lang, ids):
        return encode_keywords(ids, lang.table, lang.mha, (lang.ln_gain, lang.ln_bias))

    def test_zero_output_projection_is_plain_ln(self, lang):
        lang.mha.w_o.data[:] = 0
        ids = [4, 9, 5]
        expected = T.layer_norm(lang.table[np.array(ids)], lang.ln_gain, lang.ln_bias)
        assert np.array_equal(self.run(lang, ids).data, expected.data)

    def test_rows_normalized(self, lang):
        out = self.run(lang, [4, 5, 6, 7]).data
        assert np.allclose(out.mean(-1), 0, atol=1e-6) and np.allclose(out.var(-1), 1, atol=1e-5)

    @given(st.permutations(list(range(5))))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariant(self, perm):
        lang = init_language(Rng(2), 12, 8, 2, dtype=F64)
        ids = np.array([4, 9, 5, 11, 7])
        base = self.run(lang, ids).data
        assert np.allclose(self.run(lang, ids[perm]).data, base[perm], atol=1e-12)

    def test_pad_rows_do_not_leak(self, lang):
        a = self.run(lang, [4, 9, PAD]).data
        b = self.run(lang, [4, 9]).data
        assert np.allclose(a[:2], b, atol=1e-12)

    def test_deterministic(self, lang):
        assert self.run(lang, [4, 5]).data.tobytes() == self.run(lang, [4, 5]).data.tobytes()

    def test_batched(self, lang):
        ids = np.array([[4, 5, 6], [7, 8, PAD]])
        out = self.run(lang, ids).data
        assert np.allclose(out[1, :2], self.run(lang, ids[1, :2]).data, atol=1e-12)

    def test_gradient_check(self):
        err, _ = check_block("encoder")
        assert err <= 1e-4

    def test_gradient_reaches_table_rows(self, lang):
        ids = np.array([4, 9, 5])
        probe = randn(11, 3, 8)
        err = check_gradients(lambda tbl: T.sum(encode_keywords(ids, tbl, lang.mha, (lang.ln_gain, lang.ln_bias)) * probe),
                              lang.table)
        assert err <= 1e-4
