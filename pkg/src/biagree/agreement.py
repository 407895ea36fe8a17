"""Agreement-regularized objective and its sampled gradient estimator.

For a model P_self trained against a frozen opposite-direction helper P_help,
the ascent direction of

    sum_n log P_self(y_n|x_n) - lam * KL(P_help || P_self) - lam * KL(P_self || P_help)

is estimated per source from two pseudo-pair sets:

* helper pairs  (x, y~P_help), weight 1:           lam * grad log P_self(y|x)
* self pairs    (x, y~P_self), weight log P_help/P_self: lam * w * grad log P_self(y|x)

``rt_grad`` returns the three contributions separately; the total is their sum.
The same routine serves either direction (swap the model arguments).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoding import DecodeConfig, beam_search, sample_many
from .evaluation import sentence_bleu
from .seq2seq import DirectionalModel, logprob_and_grad, sequence_logprob

SAMPLERS = ("beam-best", "ancestral")


@dataclass
class RegularizerConfig:
    lam: float = 1.0
    m: int = 1
    candidate_beam: int = 4
    filter_threshold: float | None = 0.30  # None disables the BLEU filter
    filter_smooth: bool = True
    weight_clip: float | None = 5.0        # None disables clipping
    sampler: str = "beam-best"
    max_len: int | None = None             # None: 2 * |x| + 5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.m < 1 or self.candidate_beam < 1:
            raise ValueError("m and candidate_beam must be positive")
        if self.filter_threshold is not None and not 0.0 <= self.filter_threshold <= 1.0:
            raise ValueError("filter_threshold must lie in [0, 1]")
        if self.weight_clip is not None and self.weight_clip <= 0:
            raise ValueError("weight_clip must be positive")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")

    def resolve_max_len(self, x):
        return self.max_len if self.max_len is not None else 2 * len(x) + 5


@dataclass
class PseudoPair:
    x: tuple[int, ...]
    y_hat: tuple[int, ...]
    weight: float
    origin: str           # "helper" or "self"
    forced: bool = False  # hit max_len without EOS; scored without the EOS factor
    max_len: int | None = None

    def logprob(self, model):
        return sequence_logprob(model, self.x, self.y_hat, self.max_len if self.forced else None)


@dataclass
class GradientEstimate:
    total: dict[str, np.ndarray]
    mle: dict[str, np.ndarray]
    kl_helper_to_self: dict[str, np.ndarray]
    kl_self_to_helper: dict[str, np.ndarray]
    generated: int = 0
    kept: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def keep_rate(self):
        return self.kept / self.generated if self.generated else 1.0


def clip_weight(w: float, bound: float | None) -> float:
    return w if bound is None else float(min(bound, max(-bound, w)))


def _zeros(model):
    return model.params.zeros_like()


def weighted_grad(model: DirectionalModel, xs, ys, weights, forced=None):
    """Gradient of sum_i weights[i] * log P(ys[i] | xs[i]); zero for an empty set."""
    if len(xs) == 0:
        return _zeros(model), np.zeros(0)
    lp, g = logprob_and_grad(model, xs, ys, weights, forced)
    return g, lp


def mle_grad(model: DirectionalModel, batch: Sequence) -> GradientEstimate:
    """Gradient of the batch log-likelihood; KL terms are zero."""
    if len(batch) == 0:
        raise ValueError("mle_grad: empty batch")
    xs = [tuple(p[0]) for p in batch]
    ys = [tuple(p[1]) for p in batch]
    g, lp = weighted_grad(model, xs, ys, np.ones(len(xs)))
    return GradientEstimate(g, g, _zeros(model), _zeros(model),
                            stats={"mle_logprob": float(lp.sum())})


def _candidates(model, x, cfg, rng):
    """``cfg.m`` translations of ``x`` drawn from ``model`` (natural order)."""
    L = cfg.resolve_max_len(x)
    if cfg.sampler == "ancestral":
        if rng is None:
            raise ValueError("ancestral sampler needs an rng")
        hyps = sample_many(model, x, cfg.m, L, rng)
    else:
        nbest = beam_search(model, x, DecodeConfig(cfg.candidate_beam, 0.0, L, "beam"))
        hyps = sorted(nbest, key=lambda h: (-h.logprob, h.tokens))[: cfg.m]
    return [(h.tokens, not h.finished, h.logprob) for h in hyps], L


def make_pseudo_from_helper(helper: DirectionalModel, x, cfg: RegularizerConfig,
                            rng: np.random.Generator | None = None) -> list[PseudoPair]:
    x = tuple(x)
    cands, L = _candidates(helper, x, cfg, rng)
    return [PseudoPair(x, y, 1.0, "helper", forced, L) for y, forced, _ in cands]


def make_pseudo_from_self(self_model: DirectionalModel, helper: DirectionalModel, x,
                          cfg: RegularizerConfig, rng: np.random.Generator | None = None) -> list[PseudoPair]:
    x = tuple(x)
    cands, L = _candidates(self_model, x, cfg, rng)
    out = []
    for y, forced, _ in cands:
        ml = L if forced else None
        lp_self = sequence_logprob(self_model, x, y, ml)
        lp_help = sequence_logprob(helper, x, y, ml)
        out.append(PseudoPair(x, y, clip_weight(lp_help - lp_self, cfg.weight_clip), "self", forced, L))
    return out


def filter_pseudo(pairs: Sequence[PseudoPair], reference, threshold: float | None,
                  smooth: bool = True) -> list[PseudoPair]:
    """Keep pairs whose sentence BLEU against ``reference`` exceeds ``threshold``."""
    if threshold is None:
        return list(pairs)
    return [p for p in pairs if sentence_bleu(p.y_hat, reference, smooth=smooth).value > threshold]


def pseudo_grad(model: DirectionalModel, pairs: Sequence[PseudoPair], scale: float = 1.0):
    """Gradient of scale * sum_i weight_i * log P_model(y_hat_i | x_i)."""
    xs = [p.x for p in pairs]
    ys = [p.y_hat for p in pairs]
    w = np.array([scale * p.weight for p in pairs])
    g, _ = weighted_grad(model, xs, ys, w, [p.forced for p in pairs])
    return g


def build_pseudo_pairs(self_model, helper, batch, cfg, rng=None):
    """Generate and filter both pseudo sets for a batch of (x, y) pairs."""
    helper_pairs, self_pairs = [], []
    generated = 0
    for x, y in ((tuple(p[0]), tuple(p[1])) for p in batch):
        ph = make_pseudo_from_helper(helper, x, cfg, rng)
        ps = make_pseudo_from_self(self_model, helper, x, cfg, rng)
        generated += len(ph) + len(ps)
        helper_pairs += filter_pseudo(ph, y, cfg.filter_threshold, cfg.filter_smooth)
        self_pairs += filter_pseudo(ps, y, cfg.filter_threshold, cfg.filter_smooth)
    return helper_pairs, self_pairs, generated


def rt_grad(self_model: DirectionalModel, helper: DirectionalModel, batch: Sequence,
            cfg: RegularizerConfig, rng: np.random.Generator | None = None) -> GradientEstimate:
    """Three-term ascent-direction estimate for ``self_model`` with ``helper`` frozen.

    With ``cfg.lam == 0`` no pseudo pairs are generated (and no randomness is
    consumed), so the result is exactly ``mle_grad``.
    """
    if self_model.direction == helper.direction:
        raise ValueError("helper must have the opposite direction")
    est = mle_grad(self_model, batch)
    if cfg.lam == 0:
        return est
    helper_pairs, self_pairs, generated = build_pseudo_pairs(self_model, helper, batch, cfg, rng)
    g_help = pseudo_grad(self_model, helper_pairs, cfg.lam)
    g_self = pseudo_grad(self_model, self_pairs, cfg.lam)
    total = {k: est.mle[k] + g_help[k] + g_self[k] for k in est.mle}
    stats = dict(est.stats)
    stats["helper_kept"] = len(helper_pairs)
    stats["self_kept"] = len(self_pairs)
    stats["mean_weight"] = float(np.mean([p.weight for p in self_pairs])) if self_pairs else 0.0
    return GradientEstimate(total, est.mle, g_help, g_self, generated,
                            len(helper_pairs) + len(self_pairs), stats)


def r2l_objective_grad(r2l_model: DirectionalModel, l2r_helper: DirectionalModel, batch,
                       cfg: RegularizerConfig, rng: np.random.Generator | None = None) -> GradientEstimate:
    """Right-to-left objective: the same estimator with the roles exchanged."""
    return rt_grad(r2l_model, l2r_helper, batch, cfg, rng)
