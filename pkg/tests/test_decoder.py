"""Caption decoder: memory, causal logits, loss and decoding."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retcap import tensor as T
from retcap.decoder import (LengthError, Memory, beam_search, build_memory, decode_step_logits, generate,
                            greedy_search, init_decoder)
from retcap.config import ModelConfig
from retcap.gradcheck import check_block
from retcap.language import BOS, EOS, PAD
from retcap.model import Batch, caption_loss, init_model
from retcap.optim import AdamState, adam_step
from retcap.rng import Rng
from retcap.tensor import ContractError, Tensor

from conftest import randn

F64 = np.float64
V = 10


def t64(x):
    return Tensor(np.asarray(x, dtype=F64), dtype=F64)


@pytest.fixture
def dec():
    return init_decoder(Rng(8), V, 4, 8, 2, 16, layers=2, max_len=6, out_std=0.5, dtype=F64)


@pytest.fixture
def memory():
    return Memory(t64(randn(30, 8, 8)))


class TestMemory:
    def test_token_count(self, dec):
        assert build_memory(t64(randn(0, 2, 2, 4)), t64(randn(1, 4, 8)), dec).tokens.shape == (8, 8)

    def test_zero_fused_half(self, dec):
        mem = build_memory(t64(randn(2, 2, 2, 4)), t64(np.zeros((4, 8))), dec).tokens.data
        assert not mem[4:].any()

    def test_identity_projection(self):
        d = init_decoder(Rng(0), V, 8, 8, 2, 16, 1, 6, dtype=F64)
        d.w_mem.data[:] = np.eye(8)
        F = randn(3, 2, 2, 8)
        assert np.array_equal(build_memory(t64(F), t64(randn(4, 4, 8)), d).tokens.data[:4], F.reshape(4, 8))


class TestLogits:
    def test_bos_only_shape(self, dec, memory):
        assert decode_step_logits([BOS], memory, dec).shape == (1, V)

    def test_too_long_prefix(self, dec, memory):
        decode_step_logits([BOS] * dec.max_positions, memory, dec)
        with pytest.raises(LengthError):
            decode_step_logits([BOS] * (dec.max_positions + 1), memory, dec)

    @given(st.integers(0, 4), st.integers(4, V - 1), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_causality_bitwise(self, j, tok, seed):
        dec = init_decoder(Rng(seed), V, 4, 8, 2, 16, layers=2, max_len=6, out_std=0.5, dtype=F64)
        memory = Memory(t64(randn(seed, 8, 8)))
        prefix = np.array([BOS, 5, 6, 7, 8, 9])
        changed = prefix.copy()
        changed[j + 1] = tok
        a = decode_step_logits(prefix, memory, dec).data
        b = decode_step_logits(changed, memory, dec).data
        assert a[:j + 1].tobytes() == b[:j + 1].tobytes()

    def test_batched_equals_single(self, dec):
        mem = randn(5, 2, 8, 8)
        prefix = np.array([[BOS, 4, 5], [BOS, 6, 7]])
        batched = decode_step_logits(prefix, Memory(t64(mem)), dec).data
        for i in range(2):
            single = decode_step_logits(prefix[i], Memory(t64(mem[i])), dec).data
            assert np.allclose(batched[i], single, atol=1e-12)

    def test_gradient_check(self):
        err, _ = check_block("decoder")
        assert err <= 1e-4


class TestCaptionLoss:
    def batch(self, cfg, captions):
        caps = np.array(captions)
        n = len(caps)
        visual = np.random.default_rng(0).standard_normal((n, cfg.feat_h, cfg.feat_w, cfg.channels))
        return Batch([str(i) for i in range(n)], visual.astype(np.float32), np.full((n, 5), 5), caps)

    def test_uniform_logits_give_log_v(self, tiny_config):
        params = init_model(tiny_config, 40)
        params.decoder.w_out.data[:] = 0
        loss = caption_loss(params, tiny_config, self.batch(tiny_config, [[BOS, 6, 7, EOS], [BOS, 8, EOS, PAD]]))
        assert loss.item() == pytest.approx(math.log(40), abs=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_untrained_model_near_log_v(self, seed):
        # small output-projection init keeps the desk model close to uniform
        cfg = ModelConfig(max_len=20)
        r = np.random.default_rng(seed)
        caps = np.concatenate([np.full((8, 1), BOS), r.integers(4, 40, (8, 10)), np.full((8, 1), EOS)], 1)
        b = self.batch(cfg, caps)
        loss = caption_loss(init_model(cfg, 40, Rng(seed)), cfg, b)
        assert abs(loss.item() - math.log(40)) <= 0.05

    def test_single_target_is_one_term(self, tiny_config):
        params = init_model(tiny_config.replace(dtype="float64"), 40)
        b = self.batch(tiny_config, [[BOS, EOS]])
        from retcap.model import encode
        enc = encode(params, tiny_config, b.visual, b.keywords)
        logits = decode_step_logits(b.captions[:, :1], enc.memory, params.decoder).data[0, 0]
        expected = -(logits[EOS] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
        assert caption_loss(params, tiny_config, b).item() == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("caps", [[[BOS]], [[6, 7, EOS]], [[BOS, PAD, PAD]]])
    def test_empty_caption_rejected(self, tiny_config, caps):
        with pytest.raises(ContractError):
            caption_loss(init_model(tiny_config, 40), tiny_config, self.batch(tiny_config, caps))

    def test_fifty_steps_halve_loss(self):
        cfg = ModelConfig(max_len=20)
        params = init_model(cfg, 40)
        b = self.batch(cfg, [[BOS, 6, 7, 8, 9, EOS]])
        named, state = params.named(), AdamState(lr=cfg.lr)
        losses = []
        for _ in range(50):
            loss = caption_loss(params, cfg, b)
            loss.backward()
            adam_step(named, state)
            losses.append(loss.item())
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] <= 0.5 * losses[0]


def table_step(table, V):
    """Step function over a hand-written prefix -> probabilities table."""
    def step(prefixes):
        return np.log(np.array([table.get(tuple(p[1:]), [1 / V] * V) for p in prefixes.tolist()]) + 1e-300)
    return step


def brute_force(step, V, L, eos, banned):
    best = None
    for length in range(1, L + 1):
        for seq in itertools.product(range(V), repeat=length):
            if any(t in banned for t in seq) or eos in seq[:-1]:
                continue
            if length < L and seq[-1] != eos:
                continue
            lp = sum(step(np.array([(0,) + seq[:k]]))[0, seq[k]] for k in range(length))
            key = (-lp / length, seq)
            best = key if best is None or key < best else best
    return [t for t in best[1] if t != eos]


class TestDecoding:
    TOY = {
        (): [0, .5, .4, .1],
        (1,): [0, .35, .35, .3],
        (2,): [0, .05, .05, .9],
        (1, 1): [0, .1, .1, .8], (1, 2): [0, .1, .1, .8],
        (2, 1): [0, .1, .1, .8], (2, 2): [0, .1, .1, .8],
    }

    def test_hand_built_beam(self):
        step = table_step(self.TOY, 4)
        kw = dict(bos=0, eos=3, banned=(0,))
        # greedy takes the locally best 1 and then the lower-id tie
        assert greedy_search(step, 1, 3, **kw)[0] == [1, 1]
        # beam keeps [2] alive: log(.4 * .9) / 2 = -0.511 beats log(.5*.35*.8) / 3 = -0.655
        assert beam_search(step, 2, 3, **kw) == [2]
        assert brute_force(step, 4, 3, 3, (0,)) == [2]

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_exhaustive_beam_is_brute_force(self, seed):
        r = np.random.default_rng(seed)
        table = {}
        for length in range(3):
            for prefix in itertools.product(range(1, 4), repeat=length):
                p = r.dirichlet(np.ones(4))
                p[0] = 0
                table[prefix] = (p / p.sum()).tolist()
        step = table_step(table, 4)
        got = beam_search(step, 4 ** 3, 3, bos=0, eos=3, banned=(0,))
        assert got == brute_force(step, 4, 3, 3, (0,))

    def test_rigged_token_until_max_len(self, dec, memory):
        dec.w_out.data[:] = 0
        dec.b_out.data[:] = 0
        dec.b_out.data[7] = 10
        assert generate(memory, dec, max_len=5) == [7] * 5
        assert generate(memory, dec, mode="beam", beam_width=3, max_len=5) == [7] * 5

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_width_one_beam_is_greedy(self, seed):
        dec = init_decoder(Rng(seed), V, 4, 8, 2, 16, layers=1, max_len=6, out_std=2.0, dtype=F64)
        memory = Memory(t64(randn(seed, 8, 8)))
        assert generate(memory, dec, "beam", beam_width=1) == generate(memory, dec, "greedy")

    @given(st.integers(0, 1000), st.sampled_from(["greedy", "beam"]))
    @settings(max_examples=20, deadline=None)
    def test_output_clean_and_bounded(self, seed, mode):
        dec = init_decoder(Rng(seed), V, 4, 8, 2, 16, layers=1, max_len=6, out_std=2.0, dtype=F64)
        dec.b_out.data[[PAD, BOS]] = 50  # banned tokens must never be chosen
        out = generate(Memory(t64(randn(seed, 8, 8))), dec, mode, beam_width=3)
        assert len(out) <= 6 and not {PAD, BOS, EOS} & set(out)

    def test_greedy_batch_lockstep(self, dec):
        mem = t64(randn(9, 3, 8, 8))
        step = lambda p: T.log_softmax(decode_step_logits(p, Memory(mem), dec)[:, -1]).data  # noqa: E731
        together = greedy_search(step, 3, 5)
        for i in range(3):
            assert together[i] == generate(Memory(t64(mem.data[i])), dec, max_len=5)
