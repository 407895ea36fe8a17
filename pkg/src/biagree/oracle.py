"""Exact ground truth on tiny configurations by full enumeration.

The candidate space for a maximum length L holds every token string of length
0..L-1 followed by EOS, plus every length-L string with termination forced
(its EOS factor is dropped).  Under this rule the model distribution over the
space sums to one exactly, and samplers / scorers elsewhere apply the same
rule whenever they are given ``max_len=L``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import agreement
from .agreement import RegularizerConfig
from .seq2seq import BOS, RESERVED, DirectionalModel, encode, id_to_out, step_logprobs

SPACE_GUARD = 10 ** 6


@dataclass
class EnumeratedSpace:
    tokens: tuple[int, ...]
    max_len: int
    sequences: list[tuple[int, ...]]
    index: dict[tuple[int, ...], int] = field(repr=False)

    def __len__(self):
        return len(self.sequences)

    def forced(self, y):
        return len(y) == self.max_len


def enumerate_space(tokens, max_len: int) -> EnumeratedSpace:
    """All sequences over ``tokens`` up to ``max_len``, shortest first.

    ``tokens`` is an iterable of token ids or a Vocab (reserved ids dropped).
    """
    if hasattr(tokens, "itos"):
        tokens = range(len(RESERVED), len(tokens))
    tokens = tuple(sorted(set(int(t) for t in tokens)))
    if max_len < 0:
        raise ValueError("max_len must be non-negative")
    if len(tokens) ** max_len > SPACE_GUARD:
        raise ValueError(f"space too large: {len(tokens)}^{max_len} > {SPACE_GUARD}")
    seqs = [s for n in range(max_len + 1) for s in itertools.product(tokens, repeat=n)]
    return EnumeratedSpace(tokens, max_len, seqs, {s: i for i, s in enumerate(seqs)})


@dataclass
class ExactDistribution:
    space: EnumeratedSpace
    logp: np.ndarray
    beyond_mass: float = 0.0  # mass the untruncated model puts on sequences longer than L

    @property
    def probs(self):
        return np.exp(self.logp)

    def prob(self, y):
        return float(np.exp(self.logp[self.space.index[tuple(y)]]))

    def argmax(self):
        """Most probable sequence; ties to the lexicographically smaller one."""
        best = max(range(len(self.space)), key=lambda i: (self.logp[i], _neg(self.space.sequences[i])))
        return self.space.sequences[best]


def _neg(seq):
    return tuple(-t for t in seq) + (1,)


def exact_distribution(model: DirectionalModel, x, space: EnumeratedSpace) -> ExactDistribution:
    """Chain the decoder over the whole prefix tree, one batched step per depth."""
    n_tok = model.config.tgt_vocab_size - len(RESERVED)
    if space.tokens != tuple(range(len(RESERVED), len(RESERVED) + n_tok)):
        raise ValueError("space tokens do not match the model's target vocabulary")
    enc = encode(model, tuple(x))
    out_idx = np.array([id_to_out(t) for t in space.tokens])
    prefixes = [()]
    prefix_lp = np.zeros(1)
    S = enc.summary[None, :]
    prev = np.array([BOS])
    model_lp: dict[tuple, float] = {}
    beyond = 0.0
    for depth in range(space.max_len + 1):
        logp, S_new = step_logprobs(model, enc, prev, S)
        if depth == space.max_len:
            for p, lp in zip(prefixes, prefix_lp):
                model_lp[p] = lp
            beyond = float(np.sum(np.exp(prefix_lp) * -np.expm1(logp[:, 0])))
            break
        for p, lp, eos in zip(prefixes, prefix_lp, logp[:, 0]):
            model_lp[p] = lp + eos
        nxt_lp = (prefix_lp[:, None] + logp[:, out_idx]).ravel()
        prefixes = [p + (t,) for p in prefixes for t in space.tokens]
        S = np.repeat(S_new, len(space.tokens), axis=0)
        prev = np.array([p[-1] for p in prefixes])
        prefix_lp = nxt_lp
    lp = np.array([model_lp[model.to_model_order(y)] for y in space.sequences])
    return ExactDistribution(space, lp, beyond)


def exact_kl(p: ExactDistribution, q: ExactDistribution) -> float:
    """KL(p || q) = sum p * (log p - log q) over the shared space."""
    with np.errstate(divide="ignore"):
        lp = p.logp if isinstance(p, ExactDistribution) else np.log(np.asarray(p, dtype=np.float64))
        lq = q.logp if isinstance(q, ExactDistribution) else np.log(np.asarray(q, dtype=np.float64))
    if lp.shape != lq.shape:
        raise ValueError("distributions live on different spaces")
    pp = np.exp(lp)
    support = pp > 0
    if np.any(np.isneginf(lq[support])):
        raise ValueError("q is zero where p is positive")
    return float(np.sum(pp[support] * (lp[support] - lq[support])))


def symmetric_kl(a: DirectionalModel, b: DirectionalModel, x, space) -> float:
    pa, pb = exact_distribution(a, x, space), exact_distribution(b, x, space)
    return exact_kl(pa, pb) + exact_kl(pb, pa)


def exact_regularizer_grad(self_model: DirectionalModel, helper: DirectionalModel, x,
                           space: EnumeratedSpace) -> dict[str, dict[str, np.ndarray]]:
    """Exact ascent directions of both penalty terms with respect to ``self_model``.

    ``kl_helper_to_self``: -d KL(P_help || P_self) = sum_y P_help(y) grad log P_self(y)
    ``kl_self_to_helper``: -d KL(P_self || P_help) = sum_y P_self(y) log(P_help/P_self)(y) grad log P_self(y)
    """
    x = tuple(x)
    ps = exact_distribution(self_model, x, space)
    ph = exact_distribution(helper, x, space)
    xs = [x] * len(space)
    ys = space.sequences
    forced = [space.forced(y) for y in ys]
    g_h, _ = agreement.weighted_grad(self_model, xs, ys, ph.probs, forced)
    w = ps.probs * (ph.logp - ps.logp)
    g_s, _ = agreement.weighted_grad(self_model, xs, ys, w, forced)
    return {"kl_helper_to_self": g_h, "kl_self_to_helper": g_s}


# --- sampled-vs-exact report ----------------------------------------------------


@dataclass
class TermStats:
    sampler: str
    term: str
    n: int
    mean: np.ndarray
    se: np.ndarray
    exact: np.ndarray

    @property
    def z(self):
        diff = self.mean - self.exact
        tol = 1e-12 * (1.0 + np.abs(self.exact))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, diff / np.where(self.se > 0, self.se, 1.0),
                         np.where(np.abs(diff) <= tol, 0.0, np.inf))
        return z

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z))) if self.z.size else 0.0

    @property
    def max_abs_bias(self):
        return float(np.max(np.abs(self.mean - self.exact))) if self.mean.size else 0.0


@dataclass
class BiasReport:
    source: tuple[int, ...]
    space_size: int
    max_len: int
    truncated_mass: float
    n_params: int
    terms: list[TermStats]

    def get(self, sampler, term) -> TermStats:
        for t in self.terms:
            if t.sampler == sampler and t.term == term:
                return t
        raise KeyError((sampler, term))

    def render(self) -> str:
        lines = [f"record=oracle source={' '.join(map(str, self.source))} space_size={self.space_size} "
                 f"max_len={self.max_len} truncated_mass={self.truncated_mass!r} n_params={self.n_params}"]
        for t in self.terms:
            z = np.abs(t.z)
            finite = z[np.isfinite(z)]
            lines.append(
                f"record=term sampler={t.sampler} term={t.term} n={t.n} max_abs_z={t.max_abs_z:.4f} "
                f"frac_within_3se={(float(np.mean(finite < 3)) if finite.size else 1.0):.4f} "
                f"max_abs_bias={t.max_abs_bias:.6g} max_abs_exact={float(np.max(np.abs(t.exact))):.6g}"
            )
        return "\n".join(lines) + "\n"


def _flat(model, g):
    return np.concatenate([g[k].ravel() for k in model.params.names()])


def _per_sequence_grads(model, x, ys, forced):
    """Flattened grad log P_model(y|x) for each distinct y."""
    out = {}
    for y, f in zip(ys, forced):
        if y not in out:
            g, _ = agreement.weighted_grad(model, [x], [y], np.ones(1), [f])
            out[y] = _flat(model, g)
    return out


def _stats_from_samples(model, x, pairs, n):
    grads = _per_sequence_grads(model, x, [p.y_hat for p in pairs], [p.forced for p in pairs])
    dim = next(iter(grads.values())).size
    s1, s2 = np.zeros(dim), np.zeros(dim)
    for p in pairs:
        e = p.weight * grads[p.y_hat]
        s1 += e
        s2 += e * e
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, np.sqrt(var / n)


def estimator_bias_report(self_model: DirectionalModel, helper: DirectionalModel, x,
                          cfg: RegularizerConfig | None = None, n_resamples: int = 10_000,
                          seed: int = 0, max_len: int | None = None,
                          samplers=("ancestral", "beam-best")) -> BiasReport:
    """Compare the sampled KL-term estimators with their exact values.

    Each resample is one pseudo pair per term (m = 1), unfiltered and unclipped,
    drawn under the oracle's truncation length.  Ancestral statistics use the
    sample standard error; beam-best is deterministic, so its ``se`` is zero
    and any difference shows up as bias.
    """
    x = tuple(x)
    cfg = cfg or RegularizerConfig()
    n_tok = self_model.config.tgt_vocab_size - len(RESERVED)
    L = max_len if max_len is not None else (cfg.max_len if cfg.max_len is not None else 3)
    space = enumerate_space(range(len(RESERVED), len(RESERVED) + n_tok), L)
    exact = exact_regularizer_grad(self_model, helper, x, space)
    ex_h, ex_s = _flat(self_model, exact["kl_helper_to_self"]), _flat(self_model, exact["kl_self_to_helper"])
    dist = exact_distribution(self_model, x, space)
    terms = []
    for sampler in samplers:
        n = n_resamples if sampler == "ancestral" else 1
        c = RegularizerConfig(lam=1.0, m=n, candidate_beam=cfg.candidate_beam, filter_threshold=None,
                              weight_clip=None, sampler=sampler, max_len=L)
        rng = np.random.default_rng(seed)
        ph = agreement.make_pseudo_from_helper(helper, x, c, rng)
        ps = agreement.make_pseudo_from_self(self_model, helper, x, c, rng)
        for term, pairs, ex in (("kl_helper_to_self", ph, ex_h), ("kl_self_to_helper", ps, ex_s)):
            mean, se = _stats_from_samples(self_model, x, pairs, len(pairs))
            if sampler != "ancestral":
                se = np.zeros_like(se)
            terms.append(TermStats(sampler, term, len(pairs), mean, se, ex))
    return BiasReport(x, len(space), L, dist.beyond_mass, self_model.params.size, terms)
