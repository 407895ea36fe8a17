"""Synthetic translation tasks, parallel-text IO and vocabulary construction."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seq2seq import RESERVED, UnknownTokenError, Vocab

KINDS = ("copy", "reverse", "prefix-suffix-agreement", "noisy-lexicon")
PROVENANCE = ("real", "synthetic-bt", "pseudo")


@dataclass(frozen=True)
class SentencePair:
    x: tuple[int, ...]
    y: tuple[int, ...]
    provenance: str = "real"


@dataclass
class Corpus:
    pairs: list[SentencePair] = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def sources(self):
        return [p.x for p in self.pairs]

    @property
    def targets(self):
        return [p.y for p in self.pairs]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 10
    min_len: int = 4
    max_len: int = 20
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        need = 2 if self.kind in ("prefix-suffix-agreement", "noisy-lexicon") else 1
        if self.vocab_size < need:
            raise ValueError(f"vocab_size {self.vocab_size} too small for task {self.kind!r}")


@dataclass
class TaskData:
    spec: TaskSpec
    vocab: Vocab
    lexicon: dict[int, int]
    train: Corpus
    dev: Corpus
    test: Corpus


def symbols(n):
    return [f"w{i}" for i in range(n)]


def _relation(spec, lexicon, x):
    """Noise-free target for source ``x``."""
    if spec.kind == "copy":
        return tuple(x)
    if spec.kind == "reverse":
        return tuple(reversed(x))
    mapped = tuple(lexicon[t] for t in x)
    if spec.kind == "prefix-suffix-agreement":
        return mapped + (lexicon[x[0]],)
    return mapped


def satisfies_relation(spec, lexicon, x, y) -> bool:
    """True when ``y`` is consistent with ``x`` (noise allowed to alter tokens)."""
    clean = _relation(spec, lexicon, x)
    if spec.noise == 0.0:
        return y == clean
    if len(y) != len(clean):
        return False
    return spec.kind != "prefix-suffix-agreement" or y[-1] == clean[-1]


def gen_synthetic(spec: TaskSpec, sizes: dict[str, int] | Sequence[int]) -> TaskData:
    """Reproducible train/dev/test splits, disjoint at the pair level.

    Noise replaces each target token with a uniformly drawn token with
    probability ``spec.noise``; for prefix-suffix-agreement the final
    agreement token is never corrupted.
    """
    if not isinstance(sizes, dict):
        sizes = dict(zip(("train", "dev", "test"), sizes))
    if any(v <= 0 for v in sizes.values()):
        raise ValueError("split sizes must be positive")
    rng = np.random.default_rng(spec.seed)
    vocab = Vocab(symbols(spec.vocab_size))
    ids = np.arange(len(RESERVED), len(vocab))
    if spec.kind == "copy":
        lexicon = {int(i): int(i) for i in ids}
    else:
        lexicon = {int(a): int(b) for a, b in zip(ids, rng.permutation(ids))}

    def draw():
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        x = tuple(int(t) for t in rng.choice(ids, size=n))
        y = list(_relation(spec, lexicon, x))
        body = len(y) - 1 if spec.kind == "prefix-suffix-agreement" else len(y)
        for i in range(body):
            if rng.random() < spec.noise:
                y[i] = int(rng.choice(ids))
        return SentencePair(x, tuple(y))

    out: dict[str, Corpus] = {}
    held: set[tuple] = set()
    for split in ("test", "dev", "train"):
        pairs = []
        attempts = 0
        while len(pairs) < sizes.get(split, 0):
            attempts += 1
            if attempts > 200 * sizes[split] + 1000:
                raise ValueError(f"cannot draw {sizes[split]} {split} pairs disjoint from held-out splits")
            p = draw()
            key = (p.x, p.y)
            if key in held:
                continue
            if split != "train":
                held.add(key)
            pairs.append(p)
        out[split] = Corpus(pairs, split)
    check_disjoint(out["train"], out["dev"], out["test"])
    return TaskData(spec, vocab, lexicon, out["train"], out["dev"], out["test"])


def check_disjoint(train: Corpus, *held_out: Corpus):
    seen = {(p.x, p.y) for p in train}
    for c in held_out:
        for p in c:
            if (p.x, p.y) in seen:
                raise AssertionError(f"pair {p} of split {c.split} also occurs in train")


# --- IO -----------------------------------------------------------------------


def save_parallel(corpus: Corpus, src_path, tgt_path, src_vocab: Vocab, tgt_vocab: Vocab | None = None):
    tgt_vocab = tgt_vocab or src_vocab
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for p in corpus:
            fs.write(" ".join(src_vocab.decode(p.x)) + "\n")
            ft.write(" ".join(tgt_vocab.decode(p.y)) + "\n")


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def load_parallel(src_path, tgt_path, src_vocab: Vocab, tgt_vocab: Vocab | None = None,
                  split: str = "train") -> Corpus:
    tgt_vocab = tgt_vocab or src_vocab
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"line count mismatch: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}")
    pairs = []
    for n, (s, t) in enumerate(zip(src, tgt), start=1):
        pairs.append(SentencePair(src_vocab.encode(s, line=n), tgt_vocab.encode(t, line=n)))
    return Corpus(pairs, split)


def build_vocab(streams: Iterable[Iterable[str]], max_size: int | None = None) -> Vocab:
    """Frequency-descending ids after the reserved ones; ties by token string."""
    counts = Counter()
    for stream in streams:
        counts.update(stream)
    for r in RESERVED:
        counts.pop(r, None)
    if not counts:
        raise ValueError("build_vocab: empty token stream")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(ranked)


def save_vocab(vocab: Vocab, path):
    Path(path).write_text("\n".join(vocab.itos) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[: len(RESERVED)]) != RESERVED:
        raise ValueError(f"{path}: first lines must be the reserved tokens {RESERVED}")
    return Vocab(lines[len(RESERVED):])


def describe(spec: TaskSpec):
    return asdict(spec)


__all__ = [
    "KINDS", "SentencePair", "Corpus", "TaskSpec", "TaskData", "gen_synthetic", "check_disjoint",
    "save_parallel", "load_parallel", "build_vocab", "save_vocab", "load_vocab", "UnknownTokenError",
    "satisfies_relation",
]
