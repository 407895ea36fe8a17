"""BLEU-4 (corpus and smoothed sentence level) and tabular reports.

Scores are kept on a [0, 1] scale internally and shown x100 in reports.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MAX_ORDER = 4


@dataclass
class BleuScore:
    value: float
    precisions: list[float | None]  # None: order excluded (no candidate n-grams)
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def format(self):
        ps = " ".join("-" if p is None else f"{100 * p:.2f}" for p in self.precisions)
        return (f"BLEU = {100 * self.value:.2f}  precisions = {ps}  BP = {self.brevity_penalty:.4f}  "
                f"hyp_len = {self.hyp_len}  ref_len = {self.ref_len}")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _norm(tokens, lowercase):
    tokens = list(tokens)
    if lowercase:
        tokens = [t.lower() if isinstance(t, str) else t for t in tokens]
    return tokens


def _stats(hyp, ref):
    matches, totals = [0] * MAX_ORDER, [0] * MAX_ORDER
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        totals[n - 1] = max(len(hyp) - n + 1, 0)
    return matches, totals


def _score(matches, totals, c, r, smooth):
    precisions: list[float | None] = []
    log_sum = 0.0
    zero = False
    for n in range(MAX_ORDER):
        if totals[n] == 0:
            precisions.append(None)
            continue
        if smooth and n >= 1:
            p = (matches[n] + 1) / (totals[n] + 1)
        else:
            p = matches[n] / totals[n]
        precisions.append(p)
        if p == 0:
            zero = True
        else:
            log_sum += 0.25 * math.log(p)
    if c >= r:
        bp = 1.0
    elif c == 0:
        bp = 0.0
    else:
        bp = math.exp(1.0 - r / c)
    value = 0.0 if zero else min(1.0, bp * math.exp(log_sum))
    return BleuScore(value, precisions, bp, c, r)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence],
                lowercase: bool = False) -> BleuScore:
    if len(hypotheses) != len(references):
        raise ValueError(f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    matches, totals = [0] * MAX_ORDER, [0] * MAX_ORDER
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _norm(hyp, lowercase), _norm(ref, lowercase)
        m, t = _stats(hyp, ref)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c += len(hyp)
        r += len(ref)
    return _score(matches, totals, c, r, smooth=False)


def sentence_bleu(hypothesis: Sequence, reference: Sequence, smooth: bool = True,
                  lowercase: bool = False) -> BleuScore:
    """Single-pair BLEU; ``smooth`` adds one to both counts for orders >= 2."""
    hyp, ref = _norm(hypothesis, lowercase), _norm(reference, lowercase)
    m, t = _stats(hyp, ref)
    return _score(m, t, len(hyp), len(ref), smooth)


# --- length buckets -----------------------------------------------------------


@dataclass
class LengthBucketReport:
    edges: list[float]
    systems: list[str]
    counts: list[int]
    bleu: dict[str, list[float | None]] = field(default_factory=dict)

    def labels(self):
        out = []
        for lo, hi in zip(self.edges[:-1], self.edges[1:]):
            out.append(f"[{lo:g},{'inf' if math.isinf(hi) else f'{hi:g}'})")
        return out

    def delta(self, system: str, baseline: str) -> list[float | None]:
        return [None if a is None or b is None else a - b
                for a, b in zip(self.bleu[system], self.bleu[baseline])]

    def to_tsv(self):
        lines = ["bucket\tcount\t" + "\t".join(self.systems)]
        for i, lab in enumerate(self.labels()):
            vals = ["nan" if self.bleu[s][i] is None else f"{100 * self.bleu[s][i]:.4f}" for s in self.systems]
            lines.append(f"{lab}\t{self.counts[i]}\t" + "\t".join(vals))
        return "\n".join(lines) + "\n"

    def render(self, baseline: str | None = None):
        head = ["bucket", "count", *self.systems]
        if baseline is not None:
            head += [f"{s}-{baseline}" for s in self.systems if s != baseline]
        rows = []
        for i, lab in enumerate(self.labels()):
            row = [lab, str(self.counts[i])]
            row += ["n/a" if self.bleu[s][i] is None else f"{100 * self.bleu[s][i]:.2f}" for s in self.systems]
            if baseline is not None:
                for s in self.systems:
                    if s != baseline:
                        d = self.delta(s, baseline)[i]
                        row.append("n/a" if d is None else f"{100 * d:+.2f}")
            rows.append(row)
        return _table(head, rows)


def bucket_report(sources: Sequence[Sequence], references: Sequence[Sequence],
                  systems: dict[str, Sequence[Sequence]], edges: Sequence[float],
                  lowercase: bool = False) -> LengthBucketReport:
    """Corpus BLEU per source-length bucket ``[edges[i], edges[i+1])``."""
    n = len(sources)
    if len(references) != n or any(len(h) != n for h in systems.values()):
        raise ValueError("bucket_report: sources, references and system outputs are not aligned")
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be increasing and at least two")
    members: list[list[int]] = [[] for _ in range(len(edges) - 1)]
    for i, src in enumerate(sources):
        L = len(src)
        for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            if lo <= L < hi:
                members[b].append(i)
                break
        else:
            raise ValueError(f"source {i} of length {L} falls outside bucket edges")
    report = LengthBucketReport(edges, list(systems), [len(m) for m in members])
    for name, hyps in systems.items():
        report.bleu[name] = [
            corpus_bleu([hyps[i] for i in m], [references[i] for i in m], lowercase).value if m else None
            for m in members
        ]
    return report


def _table(head, rows):
    widths = [max(len(str(r[i])) for r in [head, *rows]) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths), *map(fmt, rows)]) + "\n"


def iteration_log_report(log) -> str:
    """Per-iteration dev BLEU and KL probes, one row per iteration."""
    rows = []
    for rec in log.records("iteration"):
        def num(key, pct=False):
            v = rec.get(key)
            if v is None or math.isnan(float(v)):
                return "-"
            v = float(v)
            return f"{100 * v:.2f}" if pct else f"{v:.4f}"
        rows.append([rec["iteration"], num("dev_bleu_l2r", True), num("dev_bleu_r2l", True),
                     num("kl_oracle"), num("kl_sampled")])
    if not rows:
        raise ValueError("train log has no iteration records")
    head = ["iteration", "L2R dev BLEU", "R2L dev BLEU", "sym KL (exact)", "sym KL (sampled)"]
    return _table(head, rows)
