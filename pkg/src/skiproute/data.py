"""Synthetic sequence-to-sequence corpora and batch encoding.

Four toy tasks over lowercase-letter payloads: copy, reverse, a fixed byte
rotation standing in for translation, and key-sentence extraction standing
in for summarization. Every corpus is a deterministic function of its seed,
and the three splits partition a set of unique payloads, so they are
disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DatasetError
from .tokenizer import PAD, frame_pair

TASK_KINDS = ("copy", "reverse", "caesar-translate", "templated-summarize")
CAESAR_SHIFT = 3

_LETTERS = np.arange(ord("a"), ord("z") + 1, dtype=np.uint8)

Pair = tuple[bytes, bytes]


@dataclass(frozen=True)
class TaskSpec:
    """What to generate: task kind, payload length range, split sizes, seed."""

    kind: str
    min_len: int = 3
    max_len: int = 8
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise DatasetError(f"bad payload length range [{self.min_len}, {self.max_len}]")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise DatasetError("every split needs at least one sample")


def task_response(kind: str, payload: bytes) -> bytes:
    """The target output for one payload under the given task."""
    if kind == "copy":
        return payload
    if kind == "reverse":
        return payload[::-1]
    if kind == "caesar-translate":
        return bytes((b + CAESAR_SHIFT) % 256 for b in payload)
    if kind == "templated-summarize":
        return payload
    raise DatasetError(f"unknown task kind {kind!r}")


def _draw_words(rng: np.random.Generator, count: int) -> list[bytes]:
    return [bytes(rng.choice(_LETTERS, size=int(rng.integers(2, 5)))) for _ in range(count)]


def _summarize_prompt(key: bytes, rng: np.random.Generator) -> bytes:
    """Pad the key sentence with filler words on both sides, marked by <>."""
    front = _draw_words(rng, int(rng.integers(1, 4)))
    back = _draw_words(rng, int(rng.integers(1, 4)))
    return b" ".join(front) + b" <" + key + b"> " + b" ".join(back)


def generate_dataset(spec: TaskSpec) -> tuple[list[Pair], list[Pair], list[Pair]]:
    """Build (train, val, test) lists of (prompt, response) byte pairs."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n_total = spec.n_train + spec.n_val + spec.n_test
    capacity = sum(26**length for length in range(spec.min_len, spec.max_len + 1))
    if n_total > capacity:
        raise DatasetError(
            f"{n_total} samples requested but only {capacity} distinct payloads "
            f"exist in length range [{spec.min_len}, {spec.max_len}]"
        )

    payloads: list[bytes] = []
    seen: set[bytes] = set()
    while len(payloads) < n_total:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        p = bytes(rng.choice(_LETTERS, size=length))
        if p not in seen:
            seen.add(p)
            payloads.append(p)

    pairs: list[Pair] = []
    for p in payloads:
        prompt = _summarize_prompt(p, rng) if spec.kind == "templated-summarize" else p
        pairs.append((prompt, task_response(spec.kind, p)))

    train = pairs[: spec.n_train]
    val = pairs[spec.n_train : spec.n_train + spec.n_val]
    test = pairs[spec.n_train + spec.n_val :]
    return train, val, test


@dataclass(frozen=True)
class Batch:
    """Framed, right-padded token arrays plus the masks training needs.

    All four arrays are (B, T). ``attn`` flags non-pad positions,
    ``prompt_mask`` flags [BOS] prompt [SEP] (what the routers average
    over), ``response_mask`` flags response tokens plus [EOS] (what the
    cross entropy is taken over, as targets).
    """

    tokens: np.ndarray
    attn: np.ndarray
    prompt_mask: np.ndarray
    response_mask: np.ndarray


def encode_batch(pairs: Sequence[Pair], max_seq: int | None = None) -> Batch:
    if not pairs:
        raise DatasetError("cannot encode an empty batch")
    seqs = [frame_pair(p, r) for p, r in pairs]
    width = max(len(s) for s in seqs)
    if max_seq is not None and width > max_seq:
        raise DatasetError(f"framed length {width} exceeds the {max_seq}-token limit")

    n = len(seqs)
    tokens = np.full((n, width), PAD, dtype=np.int64)
    attn = np.zeros((n, width), dtype=np.uint8)
    prompt_mask = np.zeros((n, width), dtype=np.uint8)
    response_mask = np.zeros((n, width), dtype=np.uint8)
    for i, (seq, (prompt, _)) in enumerate(zip(seqs, pairs)):
        k = len(prompt) + 2  # [BOS] prompt [SEP]
        tokens[i, : len(seq)] = seq
        attn[i, : len(seq)] = 1
        prompt_mask[i, :k] = 1
        response_mask[i, k : len(seq)] = 1
    return Batch(tokens, attn, prompt_mask, response_mask)


def iter_minibatches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator,
                     max_seq: int | None = None):
    """Shuffled minibatches for one epoch."""
    order = rng.permutation(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[lo : lo + batch_size]]
        yield encode_batch(chunk, max_seq)


def seeded_streams(seed: int, names: Sequence[str]) -> dict[str, np.random.Generator]:
    """Independent per-phase generators derived from one experiment seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(seq) for name, seq in zip(names, children)}
