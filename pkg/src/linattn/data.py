"""Byte tokenizer, toy corpus loading, LM batching, and the synthetic
passkey-retrieval dataset.

Every sequence handed to a model starts with the reserved meta ids (one per
configured meta token) followed by BOS; the window-attention mask pins those
leading positions, so the data layout and the attention pattern agree by
construction.

A passkey example embeds five non-overlapping statements of the form
``passkey <NAME> = <DIGITS>. `` at random offsets inside filler text drawn
from a fixed sentence pool, then ends with ``passkey <NAME> = `` for one of
the five names followed by its digits; the trailing digit span is the
retrieval target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import BOS_ID, META_BASE, PAD_ID


def byte_tokenize(text: str):
    """utf-8 bytes as ids 0..255."""
    return list(text.encode("utf-8"))


def detokenize(ids):
    out = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i <= 255:
            out.append(i)
        elif i in (BOS_ID, PAD_ID) or i >= META_BASE:
            continue  # structural ids render as nothing
        else:
            raise ContractError(f"id {i} not detokenizable")
    return out.decode("utf-8", errors="replace")


def meta_prefix(meta_tokens):
    return [META_BASE + i for i in range(meta_tokens)] + [BOS_ID]


def frame_sequence(body_ids, meta_tokens):
    return np.array(meta_prefix(meta_tokens) + list(body_ids), dtype=np.int64)


def load_corpus():
    from importlib import resources

    return (resources.files("linattn") / "fixtures" / "corpus.txt").read_text()


def lm_batches_from_text(text, seq_len, batch, epochs, seed, meta_tokens):
    """Yield [batch, seq_len] id arrays: fixed-length corpus slices framed
    with meta prefix + BOS, order shuffled per epoch by a seeded permutation."""
    ids = np.array(byte_tokenize(text), dtype=np.int64)
    body = seq_len - meta_tokens - 1
    if body < 2:
        raise ContractError("seq_len too small for the meta prefix")
    n_chunks = len(ids) // body
    if n_chunks < 1:
        raise ContractError("corpus shorter than one sequence")
    chunks = ids[: n_chunks * body].reshape(n_chunks, body)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n_chunks)
        for lo in range(0, n_chunks - batch + 1, batch):
            rows = [frame_sequence(chunks[i], meta_tokens) for i in order[lo : lo + batch]]
            yield np.stack(rows)


def lm_batches_from_examples(examples, batch, epochs, seed):
    """Seeded-permutation batching over pre-tokenized examples."""
    tokens = [np.asarray(e.tokens, dtype=np.int64) for e in examples]
    rng = np.random.default_rng(seed)
    n = len(tokens)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n - batch + 1, batch):
            yield np.stack([tokens[i] for i in order[lo : lo + batch]])


# -- passkey dataset ---------------------------------------------------------

FILLER_SENTENCES = [
    "the quick brown fox jumps over the lazy dog. ",
    "a watched pot never boils on a cold day. ",
    "many hands make light work in the garden. ",
    "the early bird catches the worm at dawn. ",
    "every cloud has a silver lining after rain. ",
    "actions speak louder than words in the end. ",
    "slow and steady wins the race every time. ",
    "birds of a feather flock together at dusk. ",
]

KEY_NAMES = [chr(ord("A") + i) for i in range(26)]
# value alphabet is disjoint from key names, filler text and structural bytes
VALUE_CHARS = "0123456789!#$%&*+-/:;<>?@"
PASSKEY_MIN, PASSKEY_MAX = 5, 8


@dataclass
class PasskeyExample:
    tokens: list
    answer_span: tuple  # (start, length) in token positions
    meta: dict = field(default_factory=dict)

    @property
    def prompt(self):
        return np.asarray(self.tokens[: self.answer_span[0]], dtype=np.int64)

    @property
    def answer(self):
        s, n = self.answer_span
        return np.asarray(self.tokens[s : s + n], dtype=np.int64)


def _statement(name, value):
    return f"\npasskey {name}{value}.\n"


def _query(name):
    return f"\npasskey {name}"


def make_passkey_example(index, seq_len, seed, meta_tokens=4, depth_decile=None,
                         queries=1, n_keys=5):
    """One deterministic example; rng depends only on (seed, index).

    queries > 1 appends extra retrieval rounds before the final query, and
    n_keys < 5 embeds fewer passkeys: both are denser/easier copy-practice
    variants used only for teacher pretraining curricula. The official
    dataset (and every evaluation) uses queries=1, n_keys=5; the answer span
    is always the final value.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, index)))
    body_len = seq_len - meta_tokens - 1
    names = list(rng.choice(len(KEY_NAMES), size=n_keys, replace=False))
    keys = [KEY_NAMES[i] for i in names]
    values = [
        "".join(
            VALUE_CHARS[c]
            for c in rng.integers(0, len(VALUE_CHARS), size=rng.integers(PASSKEY_MIN, PASSKEY_MAX + 1))
        )
        for _ in range(n_keys)
    ]
    query_idx = int(rng.integers(0, n_keys))
    extra = []
    if queries > 1:
        pool = list(range(n_keys))
        rng.shuffle(pool)
        extra = [i for i in pool if i != query_idx][: queries - 1]
    suffix = "".join(_query(keys[i]) + values[i] + "." for i in extra)
    suffix += _query(keys[query_idx]) + values[query_idx]
    prefix_len = body_len - len(suffix)
    statements = [_statement(k, v) for k, v in zip(keys, values)]
    max_stmt = max(len(s) for s in statements)
    # randomized placement needs slack beyond the raw statement bytes
    slack = 2 * max_stmt if n_keys >= 3 else 4
    if prefix_len < sum(len(s) for s in statements) + slack:
        raise ContractError(f"seq_len {seq_len} too small for {n_keys} passkeys")

    filler = ""
    while len(filler) < prefix_len:
        filler += FILLER_SENTENCES[int(rng.integers(0, len(FILLER_SENTENCES)))]
    body = bytearray(filler[:prefix_len].encode("utf-8"))

    # interval-based placement: carve each statement out of a free interval
    # that fits it (longest first); retry whole layouts before declaring the
    # packing infeasible
    def try_layout():
        free = [(0, prefix_len)]

        def carve(stmt_len, band=None):
            candidates = []
            for j, (s, e) in enumerate(free):
                lo, hi = s, e - stmt_len
                if band is not None:
                    lo, hi = max(lo, band[0]), min(hi, band[1])
                if hi >= lo:
                    candidates.append((j, lo, hi))
            if not candidates and band is not None:
                return carve(stmt_len)  # band infeasible: relax to anywhere
            if not candidates:
                return None
            j, lo, hi = candidates[int(rng.integers(0, len(candidates)))]
            p = int(rng.integers(lo, hi + 1))
            s, e = free.pop(j)
            if p > s:
                free.append((s, p))
            if p + stmt_len < e:
                free.append((p + stmt_len, e))
            return p

        pos = [None] * n_keys
        if depth_decile is not None:
            band = (
                int(prefix_len * depth_decile / 10),
                int(prefix_len * (depth_decile + 1) / 10),
            )
            pos[query_idx] = carve(len(statements[query_idx]), band)
            if pos[query_idx] is None:
                return None
        order = sorted(
            (i for i in range(n_keys) if pos[i] is None),
            key=lambda i: -len(statements[i]),
        )
        for i in order:
            pos[i] = carve(len(statements[i]))
            if pos[i] is None:
                return None
        return pos

    positions = None
    for _ in range(50):
        positions = try_layout()
        if positions is not None:
            break
    if positions is None:
        raise ContractError("could not place passkey statements disjointly")
    for i in range(n_keys):
        body[positions[i] : positions[i] + len(statements[i])] = statements[i].encode("utf-8")

    body_ids = list(body) + byte_tokenize(suffix)
    tokens = frame_sequence(body_ids, meta_tokens)
    answer_len = len(values[query_idx])
    answer_start = len(tokens) - answer_len
    depth = positions[query_idx] / prefix_len
    return PasskeyExample(
        tokens=tokens.tolist(),
        answer_span=(answer_start, answer_len),
        meta={
            "index": index,
            "key": keys[query_idx],
            "needle_pos": int(positions[query_idx]),
            "depth": float(depth),
            "decile": int(min(9, depth * 10)),
            "seq_len": int(seq_len),
        },
    )


def generate_passkey_dataset(n, seq_len, seed, meta_tokens=4, stratify_depth=False,
                             queries=1, n_keys=5, path=None):
    """n deterministic examples; with stratify_depth, example i gets its
    queried needle placed in depth decile i mod 10."""
    examples = [
        make_passkey_example(
            i, seq_len, seed, meta_tokens,
            depth_decile=(i % 10) if stratify_depth else None,
            queries=queries, n_keys=n_keys,
        )
        for i in range(n)
    ]
    if path is not None:
        write_jsonl(examples, path)
    return examples


def write_jsonl(examples, path):
    with open(path, "w") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {"tokens": list(map(int, e.tokens)),
                     "answer_span": list(e.answer_span),
                     "meta": e.meta}
                )
            )
            fh.write("\n")
    return path


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                PasskeyExample(
                    tokens=d["tokens"],
                    answer_span=tuple(d["answer_span"]),
                    meta=d.get("meta", {}),
                )
            )
    return out
