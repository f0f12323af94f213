"""Tokenizer round trips, dataset determinism and structural guarantees."""

import numpy as np
import pytest

from linattn.data import (
    VALUE_CHARS,
    byte_tokenize,
    detokenize,
    generate_passkey_dataset,
    lm_batches_from_text,
    load_corpus,
    make_passkey_example,
    read_jsonl,
    write_jsonl,
)
from linattn.errors import ContractError

RNG = np.random.default_rng(29)


class TestTokenizer:
    def test_simple(self):
        assert byte_tokenize("ab") == [97, 98]
        assert detokenize([97, 98]) == "ab"

    def test_empty(self):
        assert byte_tokenize("") == []
        assert detokenize([]) == ""

    def test_random_blob_round_trip(self):
        blob = bytes(RNG.integers(0, 256, size=1024).tolist())
        text = blob.decode("utf-8", errors="replace")
        assert detokenize(byte_tokenize(text)) == text

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            detokenize([-1])

    def test_structural_ids_render_empty(self):
        assert detokenize([258, 259, 256, 104, 105]) == "hi"


class TestLmBatches:
    def test_shapes_and_prefix(self):
        text = load_corpus()
        batches = list(lm_batches_from_text(text, seq_len=32, batch=4, epochs=1, seed=0, meta_tokens=2))
        assert batches, "corpus yields at least one batch"
        b = batches[0]
        assert b.shape == (4, 32)
        np.testing.assert_array_equal(b[:, :3], [[258, 259, 256]] * 4)

    def test_epoch_permutation_seeded(self):
        text = load_corpus()
        a = list(lm_batches_from_text(text, 32, 2, 1, seed=5, meta_tokens=0))
        b = list(lm_batches_from_text(text, 32, 2, 1, seed=5, meta_tokens=0))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestPasskey:
    def test_deterministic(self):
        a = make_passkey_example(3, 256, seed=7)
        b = make_passkey_example(3, 256, seed=7)
        assert a.tokens == b.tokens and a.answer_span == b.answer_span

    def test_index_independent_of_order(self):
        solo = make_passkey_example(5, 256, seed=7)
        batch = generate_passkey_dataset(8, 256, seed=7)
        assert batch[5].tokens == solo.tokens

    def test_span_lengths_and_disjoint(self):
        for ex in generate_passkey_dataset(200, 256, seed=11):
            text = detokenize(ex.tokens)
            spans = []
            pos = 0
            while True:
                pos = text.find("passkey ", pos)
                if pos < 0:
                    break
                spans.append(pos)
                pos += 1
            assert len(spans) == 6  # five statements + the query
            assert 5 <= ex.answer_span[1] <= 8
            ans = detokenize(ex.answer)
            assert all(c in VALUE_CHARS for c in ans)
            # queried value recoverable from its statement in the body
            key = ex.meta["key"]
            stmt = f"\npasskey {key}{ans}.\n"
            assert stmt in text
            assert text.endswith(f"\npasskey {key}{ans}")

    def test_answer_span_is_tail(self):
        ex = make_passkey_example(0, 384, seed=3)
        s, n = ex.answer_span
        assert s + n == len(ex.tokens)
        np.testing.assert_array_equal(ex.tokens[s:], ex.answer)

    def test_stratified_depth(self):
        exs = generate_passkey_dataset(40, 512, seed=5, stratify_depth=True)
        for i, ex in enumerate(exs):
            assert ex.meta["decile"] == i % 10

    def test_infeasible_length_rejected(self):
        with pytest.raises(ContractError):
            make_passkey_example(0, 128, seed=0)

    def test_jsonl_round_trip(self, tmp_path):
        exs = generate_passkey_dataset(5, 256, seed=13)
        path = tmp_path / "data.jsonl"
        write_jsonl(exs, path)
        back = read_jsonl(path)
        for a, b in zip(exs, back):
            assert a.tokens == b.tokens
            assert a.answer_span == b.answer_span
            assert a.meta == b.meta

    def test_regeneration_hash_identical(self, tmp_path):
        import hashlib

        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(generate_passkey_dataset(20, 256, seed=9), p1)
        write_jsonl(generate_passkey_dataset(20, 256, seed=9), p2)
        assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
