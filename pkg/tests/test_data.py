import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desklab import data as D


class TestTokenizer:
    @settings(max_examples=50, deadline=None)
    @given(st.binary(max_size=200))
    def test_roundtrip(self, raw):
        assert D.detokenize(D.tokenize(raw)) == raw

    def test_empty(self):
        assert D.tokenize(b"").size == 0
        assert D.detokenize([]) == b""

    def test_vocab_size(self):
        assert D.VOCAB_SIZE == 258
        assert D.BOS == 256 and D.EOS == 257

    def test_decode_rejects_out_of_vocab(self):
        with pytest.raises(ValueError):
            D.detokenize([258])

    def test_specials_dropped_on_decode(self):
        assert D.detokenize([D.BOS, 104, 105, D.EOS]) == b"hi"


class TestMixtures:
    def test_weights_sum_to_one(self):
        for mix in D.MIXTURES.values():
            assert sum(mix.weights.values()) == pytest.approx(1.0)

    def test_decay_and_long_sft_fraction(self):
        assert D.MIXTURES["sft_blend"].sft_fraction() == pytest.approx(0.669)
        assert D.MIXTURES["sft_blend_long"].sft_fraction() == pytest.approx(0.669)

    def test_stable_has_no_sft(self):
        assert D.MIXTURES["pretrain"].sft_fraction() == 0.0

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError):
            D.Mixture("bad", {"uniform": 0.5})
        with pytest.raises(KeyError):
            D.Mixture("bad", {"nonexistent": 1.0})

    def test_empirical_sft_fraction(self):
        # frequency of sft-tagged domain draws over 10k keyed sequences
        mix = D.MIXTURES["sft_blend"]
        names = sorted(mix.weights)
        probs = np.array([mix.weights[k] for k in names])
        hits = 0
        n = 10_000
        for i in range(n):
            rng = D._rng(1, D.TRAIN_STREAM, 0, i)
            dom = names[int(rng.choice(len(names), p=probs))]
            hits += D.DOMAINS[dom].quality == D.SFT
        assert hits / n == pytest.approx(0.669, abs=0.01)


class TestBatches:
    def test_deterministic(self):
        a = D.sample_batch(5, 4, 64, D.MIXTURES["sft_blend"], seed=3)
        b = D.sample_batch(5, 4, 64, D.MIXTURES["sft_blend"], seed=3)
        assert np.array_equal(a, b)
        assert D.batch_hash(a) == D.batch_hash(b)

    def test_shape_and_bos(self):
        block = D.sample_batch(0, 3, 32, D.MIXTURES["pretrain"], seed=0)
        assert block.shape == (3, 33)
        assert np.all(block[:, 0] == D.BOS)

    def test_streams_disjoint(self):
        mix = D.MIXTURES["pretrain"]
        train = D.sample_batch(0, 8, 64, mix, 0, stream=D.TRAIN_STREAM)
        held = D.sample_batch(0, 8, 64, mix, 0, stream=D.HELDOUT_STREAM)
        assert not np.array_equal(train, held)

    def test_different_steps_differ(self):
        mix = D.MIXTURES["pretrain"]
        a = D.sample_batch(0, 4, 64, mix, 0)
        b = D.sample_batch(1, 4, 64, mix, 0)
        assert not np.array_equal(a, b)

    def test_mixture_changes_within_two_batches(self):
        # the decay re-blend shows up immediately: sft domains appear in the
        # first decay batch (no stale buffering anywhere to flush)
        stable = D.sample_batch(100, 16, 64, D.MIXTURES["pretrain"], seed=0)
        decay = D.sample_batch(100, 16, 64, D.MIXTURES["sft_blend"], seed=0)
        # '+' appears once per arithmetic record and only at the 1/256
        # background rate elsewhere, so it marks the sft re-blend
        plus_stable = np.mean(stable == ord("+"))
        plus_decay = np.mean(decay == ord("+"))
        assert plus_decay > 3 * max(plus_stable, 1e-9)


class TestKvRecall:
    def test_query_matches_binding(self):
        mix = D.Mixture("kv_only", {"kv_long": 1.0})
        block = D.sample_batch(0, 4, 256, mix, seed=2)
        hits = D.value_token_positions(block)
        assert hits, "no recall queries found"
        for r, c in hits:
            row = block[r]
            key, value = row[c - 2], row[c]
            # the binding "K=v" must occur somewhere in the first half
            half = row[:len(row) // 2 + 16]
            found = any(half[i] == key and half[i + 1] == ord("=")
                        and half[i + 2] == value
                        for i in range(len(half) - 2))
            assert found, "query value must echo a first-half binding"

    def test_final_query_binding_outside_short_window(self):
        # the end-of-sequence query is the long-range probe: its binding
        # block sits in the first half, so a trailing 128-token window that
        # contains the query cannot contain the binding
        mix = D.Mixture("kv_only", {"kv_long": 1.0})
        block = D.sample_batch(0, 4, 512, mix, seed=2)
        finals = [(r, c) for r, c in D.value_token_positions(block)
                  if c >= block.shape[1] - 3]
        assert len(finals) == 4, "every row ends in a recall query"
        window_start = block.shape[1] - 128
        for r, c in finals:
            row = block[r]
            key, value = row[c - 2], row[c]
            head = row[:block.shape[1] // 2 + 16]
            assert any(head[i] == key and head[i + 1] == ord("=")
                       and head[i + 2] == value
                       for i in range(1, window_start))


class TestHeldout:
    def test_uniform_domain_perplexity_of_uniform_predictor(self):
        # a predictor that assigns 1/258 everywhere scores ppl == 258;
        # measured through the heldout machinery as the uniform bound
        mix = D.Mixture("u", {"uniform": 1.0})

        def loss_fn(block):
            return np.log(258.0)

        ppl = D.heldout_perplexity(loss_fn, 3, 4, 64, mix, seed=0)
        assert ppl == pytest.approx(258.0)

    def test_memorized_copy_limit(self):
        # the copied half is a deterministic function of the first half, so
        # an oracle predictor reaches NLL exactly 0 there: verify the
        # structure that makes the limit attainable
        mix = D.Mixture("c", {"copy": 1.0})
        block = D.sample_batch(0, 4, 64, mix, seed=0)
        checked = 0
        for row in block:
            text = bytes(int(t) for t in row[1:])
            for rec in text.split(b";"):
                if b"|" in rec:
                    first, _, second = rec.partition(b"|")
                    if first and len(second) == len(first):
                        assert second == first
                        checked += 1
        assert checked >= 4

    def test_deterministic_across_runs(self):
        mix = D.MIXTURES["sft_blend"]
        vals = [D.heldout_perplexity(lambda b: float(np.mean(b)) * 1e-3,
                                     2, 2, 32, mix, seed=9)
                for _ in range(2)]
        assert vals[0] == vals[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 20), st.integers(0, 500), st.integers(0, 100))
def test_sequences_pure_in_key(seed, step, index):
    mix = D.MIXTURES["sft_blend"]
    a = D.sample_sequence(seed, D.TRAIN_STREAM, step, index, mix, 48)
    b = D.sample_sequence(seed, D.TRAIN_STREAM, step, index, mix, 48)
    assert np.array_equal(a, b)
    assert a.shape == (48,)
    assert a.min() >= 0 and a.max() < D.VOCAB_BYTES
