"""Synthetic next-token classification tasks with rule oracles.

Token ids [0, classes) are the label tokens and double as in-sequence class
markers; everything from classes upward is content. Each task's label is
recomputable from the sequence by rule_label, and generated label sets are
balanced to within one example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASK_KINDS = ("majority_label", "trigger_token", "parity")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    classes: int
    seq_len: int
    vocab: int
    train_n: int
    test_n: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 2 <= self.classes <= 8:
            raise ValueError("classes must lie in [2, 8]")
        if self.vocab < self.classes + 2:
            raise ValueError(
                f"vocab {self.vocab} too small for {self.classes} classes plus content tokens"
            )
        if self.kind == "majority_label" and self.seq_len < 2 * self.classes + 4:
            raise ValueError("majority task needs seq_len >= 2 * classes + 4")
        if self.kind == "parity" and self.classes != 2:
            raise ValueError("parity task is binary; set classes = 2")
        if self.seq_len < 2 or self.train_n < 1 or self.test_n < 1:
            raise ValueError("degenerate task sizes")


@dataclass
class TaskData:
    spec: TaskSpec
    train_tokens: np.ndarray  # (train_n, seq_len)
    train_labels: np.ndarray  # (train_n,)
    test_tokens: np.ndarray
    test_labels: np.ndarray


def rule_label(kind: str, tokens, classes: int) -> int:
    """Recompute an example's label from its tokens."""
    seq = np.asarray(tokens)
    if kind == "majority_label":
        counts = np.bincount(seq[seq < classes], minlength=classes)
        return int(np.argmax(counts))
    if kind == "trigger_token":
        present = seq[seq < classes]
        if present.size == 0:
            raise ValueError("no trigger token present")
        counts = np.bincount(present, minlength=classes)
        return int(np.argmax(counts))
    if kind == "parity":
        return int(np.count_nonzero(seq == classes) % 2)
    raise ValueError(f"unknown task kind {kind!r}")


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    labels = np.array([i % classes for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    return labels


def _fill_content(rng, size: int, vocab: int, classes: int, exclude: int | None = None):
    lo = classes if exclude is None else exclude + 1
    return rng.integers(lo, vocab, size=size, dtype=np.int64)


def _make_example(kind: str, label: int, spec: TaskSpec, rng) -> np.ndarray:
    seq = np.empty(spec.seq_len, dtype=np.int64)
    c, t = spec.classes, spec.seq_len
    if kind == "trigger_token":
        seq[:] = _fill_content(rng, t, spec.vocab, c)
        seq[rng.integers(t)] = label
        return seq
    if kind == "parity":
        # count of the designated token (id = classes) has the label's parity
        u_max = (t - label) // 2
        count = 2 * int(rng.integers(0, u_max + 1)) + label
        seq[:] = _fill_content(rng, t, spec.vocab, c, exclude=c)
        if count:
            pos = rng.choice(t, size=count, replace=False)
            seq[pos] = c
        return seq
    # majority: the label's marker strictly outnumbers every other class marker
    counts = rng.integers(0, 3, size=c)
    counts[label] = counts.max() + 1 + int(rng.integers(0, 2))
    markers = np.repeat(np.arange(c), counts)
    seq[:] = _fill_content(rng, t, spec.vocab, c)
    pos = rng.choice(t, size=markers.size, replace=False)
    seq[pos] = markers
    return seq


def generate_dataset(spec: TaskSpec) -> TaskData:
    """Deterministic train/test example sets for a task spec."""
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for name, n in (("train", spec.train_n), ("test", spec.test_n)):
        labels = _balanced_labels(n, spec.classes, rng)
        tokens = np.stack(
            [_make_example(spec.kind, int(l), spec, rng) for l in labels]
        )
        splits[name] = (tokens, labels)
    return TaskData(
        spec=spec,
        train_tokens=splits["train"][0],
        train_labels=splits["train"][1],
        test_tokens=splits["test"][0],
        test_labels=splits["test"][1],
    )


def make_batches(tokens: np.ndarray, labels: np.ndarray, batch_size: int):
    """Fixed-order batching; the tail batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    return [
        (tokens[i : i + batch_size], labels[i : i + batch_size])
        for i in range(0, tokens.shape[0], batch_size)
    ]
