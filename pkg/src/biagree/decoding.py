"""Greedy, beam and ancestral decoding plus joint-probability n-best reranking.

Every hypothesis is reported in natural target order whatever the model's
direction, so ``Hypothesis.logprob == sequence_logprob(model, x, tokens)``.
A hypothesis that hits ``max_len`` without emitting EOS is force-terminated:
it is marked ``finished=False`` and its logprob omits the EOS factor (this is
``sequence_logprob(..., max_len=max_len)``).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .seq2seq import (BOS, DirectionalModel, L2R, encode, out_to_id, sequence_logprob,
                      step_logprobs)

MODES = ("greedy", "beam", "sample")


@dataclass
class DecodeConfig:
    beam_size: int = 8
    length_penalty_alpha: float = 1.0
    max_len: int | None = None  # None: 2 * |x| + 5
    mode: str = "beam"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.length_penalty_alpha < 0:
            raise ValueError("length_penalty_alpha must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def resolve_max_len(self, x: Sequence[int]) -> int:
        return self.max_len if self.max_len is not None else 2 * len(x) + 5


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = True
    score: float | None = None

    def __post_init__(self):
        if self.score is None:
            self.score = self.logprob


@dataclass
class NBestList:
    source: tuple[int, ...]
    hypotheses: list[Hypothesis] = field(default_factory=list)

    @classmethod
    def build(cls, source, hyps: Iterable[Hypothesis]):
        """Sort by score (desc, ties by token ids) and drop duplicate sequences."""
        best: dict[tuple, Hypothesis] = {}
        for h in hyps:
            old = best.get(h.tokens)
            if old is None or h.score > old.score:
                best[h.tokens] = h
        ordered = sorted(best.values(), key=lambda h: (-h.score, h.tokens))
        return cls(tuple(source), ordered)

    def __len__(self):
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i):
        return self.hypotheses[i]

    def best_raw(self) -> Hypothesis:
        return min(self.hypotheses, key=lambda h: (-h.logprob, h.tokens))


def length_penalty(n: int, alpha: float) -> float:
    return ((5.0 + n) / 6.0) ** alpha


def _natural(model, seq):
    return tuple(seq) if model.direction == L2R else tuple(reversed(seq))


def beam_search(model: DirectionalModel, x: Sequence[int], cfg: DecodeConfig) -> NBestList:
    """Up to ``beam_size`` complete hypotheses ranked by logprob / lp(|y|).

    Pruning uses raw log-probability; the length penalty only affects the
    final ranking.
    """
    x = tuple(x)
    L = cfg.resolve_max_len(x)
    K = cfg.beam_size
    enc = encode(model, x)
    live = [((), 0.0)]
    S = enc.summary[None, :]
    prev = np.array([BOS])
    finished: list[Hypothesis] = []
    for t in range(L):
        width = K - len(finished)
        if width <= 0 or not live:
            break
        logp, S_new = step_logprobs(model, enc, prev, S)
        base = np.array([sc for _, sc in live])
        cand = (base[:, None] + logp).ravel()
        V = logp.shape[1]
        order = np.argsort(-cand, kind="stable")
        cut = min(width, cand.size)
        while cut < cand.size and cand[order[cut]] == cand[order[cut - 1]]:
            cut += 1
        picked = []
        for j in order[:cut]:
            i, k = divmod(int(j), V)
            seq = live[i][0] if k == 0 else live[i][0] + (out_to_id(k),)
            picked.append((-float(cand[j]), _natural(model, seq), i, k, seq))
        picked.sort(key=lambda c: (c[0], c[1]))
        new_live, rows, toks = [], [], []
        for neg, nat, i, k, seq in picked[:width]:
            if k == 0:
                finished.append(Hypothesis(nat, -neg, True))
            elif len(seq) == L:
                finished.append(Hypothesis(nat, -neg, False))
            else:
                new_live.append((seq, -neg))
                rows.append(i)
                toks.append(seq[-1])
        live = new_live
        if live:
            S = S_new[rows]
            prev = np.array(toks)
    a = cfg.length_penalty_alpha
    for h in finished:
        h.score = h.logprob / length_penalty(len(h.tokens), a) if a else h.logprob
    return NBestList.build(x, finished)


def greedy_decode(model: DirectionalModel, x: Sequence[int], cfg: DecodeConfig) -> Hypothesis:
    x = tuple(x)
    L = cfg.resolve_max_len(x)
    enc = encode(model, x)
    S = enc.summary[None, :]
    prev = BOS
    seq: list[int] = []
    total = 0.0
    for _ in range(L):
        logp, S = step_logprobs(model, enc, np.array([prev]), S)
        k = int(np.argmax(logp[0]))  # first max: lowest id on ties
        total += float(logp[0, k])
        if k == 0:
            return Hypothesis(_natural(model, seq), total, True)
        prev = out_to_id(k)
        seq.append(prev)
    return Hypothesis(_natural(model, seq), total, False)


def sample_many(model: DirectionalModel, x: Sequence[int], n: int, max_len: int,
                rng: np.random.Generator) -> list[Hypothesis]:
    """``n`` independent ancestral samples, drawn together as one batch."""
    enc = encode(model, x)
    S = np.repeat(enc.summary[None, :], n, axis=0)
    prev = np.full(n, BOS)
    seqs: list[list[int]] = [[] for _ in range(n)]
    scores = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    finished = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        logp, S_new = step_logprobs(model, enc, prev[idx], S[idx])
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(idx.size) * cdf[:, -1]
        ks = np.minimum((cdf <= u[:, None]).sum(axis=1), logp.shape[1] - 1)
        S[idx] = S_new
        for row, i, k in zip(range(idx.size), idx, ks):
            scores[i] += logp[row, k]
            if k == 0:
                done[i] = finished[i] = True
            else:
                tok = out_to_id(int(k))
                seqs[i].append(tok)
                prev[i] = tok
                if len(seqs[i]) == max_len:
                    done[i] = True
    return [Hypothesis(_natural(model, s), float(sc), bool(f))
            for s, sc, f in zip(seqs, scores, finished)]


def ancestral_sample(model: DirectionalModel, x: Sequence[int], cfg: DecodeConfig,
                     rng_seed: int | np.random.Generator) -> Hypothesis:
    rng = np.random.default_rng(rng_seed)
    return sample_many(model, x, 1, cfg.resolve_max_len(tuple(x)), rng)[0]


def decode(model, x, cfg: DecodeConfig, rng_seed=0) -> Hypothesis:
    """Single best output according to ``cfg.mode``."""
    if cfg.mode == "greedy":
        return greedy_decode(model, x, cfg)
    if cfg.mode == "sample":
        return ancestral_sample(model, x, cfg, rng_seed)
    return beam_search(model, x, cfg)[0]


def translate_all(model, sources: Sequence[Sequence[int]], cfg: DecodeConfig,
                  workers: int = 1) -> list[Hypothesis]:
    """Decode many sources; ``workers > 1`` maps over a thread pool (order kept)."""
    if workers <= 1:
        return [decode(model, x, cfg) for x in sources]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda x: decode(model, x, cfg), sources))


def rerank_js(l2r: DirectionalModel, r2l: DirectionalModel, x: Sequence[int],
              candidates: Iterable[Hypothesis] | NBestList,
              max_len: int | None = None) -> Hypothesis:
    """Pick the candidate maximising log P_l2r(y|x) + log P_r2l(y|x).

    Ties go to the lexicographically smaller token sequence.  With ``max_len``
    set, candidates of that length are scored as force-terminated.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("rerank_js: empty candidate set")
    if l2r.tgt_vocab is not None and r2l.tgt_vocab is not None and l2r.tgt_vocab != r2l.tgt_vocab:
        raise ValueError("rerank_js: models use different target vocabularies")
    x = tuple(x)
    enc_f, enc_b = encode(l2r, x), encode(r2l, x)
    best = None
    seen = set()
    for h in cands:
        if h.tokens in seen:
            continue
        seen.add(h.tokens)
        ml = max_len if max_len is not None else (None if h.finished else len(h.tokens))
        lf = sequence_logprob(l2r, x, h.tokens, ml, enc=enc_f)
        lb = sequence_logprob(r2l, x, h.tokens, ml, enc=enc_b)
        key = (-(lf + lb), h.tokens)
        if best is None or key < best[0]:
            best = (key, Hypothesis(h.tokens, lf, h.finished, lf + lb))
    return best[1]
