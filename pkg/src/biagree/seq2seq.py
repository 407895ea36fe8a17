"""GRU encoder / attentional GRU decoder, usable left-to-right or right-to-left.

A right-to-left model is the same network trained on reversed targets.  All
sequences entering or leaving this module are in natural (left-to-right)
order; reversal happens here and nowhere else.

Output space: the decoder predicts over ``n_out = len(tgt_vocab) - 2`` symbols,
EOS plus every non-reserved token.  Output index 0 is EOS and index ``k >= 1``
is token id ``k + 2``; BOS and PAD are never produced.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels

BOS, EOS, PAD = 0, 1, 2
RESERVED = ("<s>", "</s>", "<pad>")
L2R, R2L = "L2R", "R2L"
_NEG = -1e30


class UnknownTokenError(KeyError):
    pass


class Vocab:
    """Bijection between token strings and ids; ids 0..2 are reserved."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                raise ValueError(f"token {tok!r} is reserved")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __contains__(self, tok):
        return tok in self.stoi

    @property
    def tokens(self):
        return self.itos[len(RESERVED):]

    @property
    def n_out(self):
        return len(self.itos) - 2

    def encode(self, words: Sequence[str], line: int | None = None) -> tuple[int, ...]:
        ids = []
        for w in words:
            i = self.stoi.get(w)
            if i is None or i < len(RESERVED):
                where = f" on line {line}" if line is not None else ""
                raise UnknownTokenError(f"unknown token {w!r}{where}")
            ids.append(i)
        return tuple(ids)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def out_to_id(k: int) -> int:
    return EOS if k == 0 else k + 2


def id_to_out(i: int) -> int:
    if i == EOS:
        return 0
    if i < len(RESERVED):
        raise ValueError(f"reserved id {i} is not an output symbol")
    return i - 2


def reverse_target(y: Sequence[int]) -> tuple[int, ...]:
    return tuple(reversed(tuple(y)))


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    emb: int = 32
    hidden: int = 64
    attn: int = 64

    @property
    def n_out(self):
        return self.tgt_vocab_size - 2


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, H, A = cfg.emb, cfg.hidden, cfg.attn
    shapes = {"src_emb": (cfg.src_vocab_size, E), "tgt_emb": (cfg.tgt_vocab_size, E)}
    for pre in ("enc", "dec"):
        for g in "zrh":
            shapes[f"{pre}_W{g}"] = (E + H, H)
            shapes[f"{pre}_b{g}"] = (H,)
    shapes.update({
        "init_W": (H, H), "init_b": (H,),
        "att_Wk": (H, A), "att_Wq": (H, A),
        "out_Wo": (2 * H, H), "out_bo": (H,),
        "out_W": (H, cfg.n_out), "out_b": (cfg.n_out,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ad.ParamStore:
    """Glorot-uniform matrices, zero biases."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            store.add(name, np.zeros(shape))
        else:
            r = np.sqrt(6.0 / (shape[0] + shape[1]))
            store.add(name, rng.uniform(-r, r, size=shape))
    return store


class DirectionalModel:
    def __init__(self, config: ModelConfig, direction: str, params: ad.ParamStore,
                 src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None):
        if direction not in (L2R, R2L):
            raise ValueError(f"direction must be L2R or R2L, got {direction!r}")
        expected = param_shapes(config)
        got = {k: params[k].shape for k in params}
        if got != expected:
            raise ad.ShapeError(f"parameter shapes do not match config: {got} vs {expected}")
        self.config = config
        self.direction = direction
        self.params = params
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    @classmethod
    def create(cls, config: ModelConfig, direction: str = L2R, seed=0,
               src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None):
        return cls(config, direction, init_params(config, seed), src_vocab, tgt_vocab)

    def copy(self):
        return DirectionalModel(self.config, self.direction, self.params.copy(),
                                self.src_vocab, self.tgt_vocab)

    def to_model_order(self, y):
        return tuple(y) if self.direction == L2R else reverse_target(y)

    def check_source(self, x):
        if len(x) == 0:
            raise ValueError("empty source sequence")
        if min(x) < len(RESERVED) or max(x) >= self.config.src_vocab_size:
            raise ValueError(f"source ids out of range: {tuple(x)}")

    def check_target(self, y):
        if len(y) and (min(y) < len(RESERVED) or max(y) >= self.config.tgt_vocab_size):
            raise ValueError(f"target ids out of range: {tuple(y)}")

    def describe(self):
        return {"direction": self.direction, **asdict(self.config)}


# --- inference path (compiled kernels, no gradients) --------------------------


@dataclass(eq=False)
class EncoderStates:
    source: tuple[int, ...]
    states: np.ndarray   # (T, hidden)
    keys: np.ndarray     # (T, attn)
    summary: np.ndarray  # initial decoder state

    def __len__(self):
        return self.states.shape[0]


@dataclass(eq=False)
class DecoderState:
    enc: EncoderStates
    s: np.ndarray


def encode(model: DirectionalModel, x: Sequence[int]) -> EncoderStates:
    x = tuple(int(t) for t in x)
    model.check_source(x)
    states, keys, s0 = kernels.encode(model.params, x)
    return EncoderStates(x, states, keys, s0)


def initial_state(enc: EncoderStates) -> DecoderState:
    return DecoderState(enc, enc.summary.copy())


def decoder_step(model: DirectionalModel, enc: EncoderStates, prev_token: int,
                 state: DecoderState | None = None):
    """Distribution over output symbols (see module docstring) and next state."""
    if state is None:
        state = initial_state(enc)
    elif state.enc is not enc:
        raise ValueError("decoder state belongs to different encoder states")
    if prev_token != BOS:
        model.check_target((prev_token,))
    logp, s = kernels.decoder_step(model.params, enc.states, enc.keys,
                                   np.array([prev_token]), state.s[None, :])
    return np.exp(logp[0]), DecoderState(enc, s[0])


def step_logprobs(model, enc, prev_ids, S):
    """Batched decoder step: (n, n_out) log-probabilities and (n, hidden) states."""
    return kernels.decoder_step(model.params, enc.states, enc.keys, prev_ids, S)


def sequence_logprob(model: DirectionalModel, x: Sequence[int], y: Sequence[int],
                     max_len: int | None = None, enc: EncoderStates | None = None) -> float:
    """Natural-log probability of natural-order ``y`` given ``x``.

    With ``max_len`` set, a sequence of exactly ``max_len`` tokens is treated
    as force-terminated: the final EOS factor is omitted.
    """
    y = tuple(int(t) for t in y)
    model.check_target(y)
    if max_len is not None and len(y) > max_len:
        raise ValueError(f"target length {len(y)} exceeds max_len {max_len}")
    if enc is None:
        enc = encode(model, x)
    seq = model.to_model_order(y)
    forced = max_len is not None and len(y) == max_len
    s = enc.summary[None, :]
    prev = BOS
    total = 0.0
    for tok in seq:
        logp, s = step_logprobs(model, enc, np.array([prev]), s)
        total += logp[0, id_to_out(tok)]
        prev = tok
    if not forced:
        logp, _ = step_logprobs(model, enc, np.array([prev]), s)
        total += logp[0, 0]
    return float(total)


# --- training path (autodiff graph over a padded minibatch) -------------------


def _bias_rows(b, n):
    return ad.embed(ad.reshape(b, (1, b.shape[0])), np.zeros(n, dtype=np.intp))


def _gru(P, pre, x, h, bias, ones):
    xh = ad.concat([x, h], axis=1)
    z = ad.sigmoid(ad.add(ad.matmul(xh, P[pre + "_Wz"]), bias[pre + "_bz"]))
    r = ad.sigmoid(ad.add(ad.matmul(xh, P[pre + "_Wr"]), bias[pre + "_br"]))
    xrh = ad.concat([x, ad.multiply(r, h)], axis=1)
    hc = ad.tanh(ad.add(ad.matmul(xrh, P[pre + "_Wh"]), bias[pre + "_bh"]))
    return ad.add(ad.multiply(ad.add(ones, ad.scale(z, -1.0)), h), ad.multiply(z, hc))


def logprob_graph(model: DirectionalModel, P: dict, xs: Sequence[Sequence[int]],
                  ys: Sequence[Sequence[int]], forced: Sequence[bool] | None = None) -> ad.Node:
    """Graph node of shape (B,) holding log P(y_b | x_b) for every row.

    ``P`` maps parameter names to graph leaves (``model.params.nodes()``).
    ``forced[b]`` omits the EOS factor of row ``b`` (length-capped sequence).
    """
    B = len(xs)
    if B == 0 or len(ys) != B:
        raise ValueError("need a non-empty batch with one target per source")
    forced = [False] * B if forced is None else list(forced)
    for x in xs:
        model.check_source(x)
    for y in ys:
        model.check_target(y)
    Hd = model.config.hidden
    bias = {k: _bias_rows(P[k], B) for k in P if k.endswith(("_bz", "_br", "_bh")) or k in ("init_b", "out_bo", "out_b")}
    ones = ad.constant(np.ones((B, Hd)))

    T = max(len(x) for x in xs)
    src = np.full((B, T), PAD, dtype=np.intp)
    smask = np.zeros((B, T))
    for b, x in enumerate(xs):
        src[b, : len(x)] = x
        smask[b, : len(x)] = 1.0
    h = ad.constant(np.zeros((B, Hd)))
    stacked = []
    for t in range(T):
        e = ad.embed(P["src_emb"], src[:, t])
        h_new = _gru(P, "enc", e, h, bias, ones)
        m = smask[:, t]
        if m.all():
            h = h_new
        else:
            mm = np.repeat(m[:, None], Hd, axis=1)
            h = ad.add(ad.multiply(ad.constant(mm), h_new), ad.multiply(ad.constant(1.0 - mm), h))
        stacked.append(ad.reshape(h, (B, 1, Hd)))
    Hs = stacked[0] if T == 1 else ad.concat(stacked, axis=1)
    keys = ad.matmul(Hs, P["att_Wk"])
    att_bias = ad.constant(np.where(smask > 0, 0.0, _NEG))
    s = ad.tanh(ad.add(ad.matmul(h, P["init_W"]), bias["init_b"]))

    tgt = [model.to_model_order(y) for y in ys]
    steps = [len(y) + (0 if f else 1) for y, f in zip(tgt, forced)]
    total = None
    prev = np.full(B, BOS, dtype=np.intp)
    A = model.config.attn
    for t in range(max(steps)):
        e = ad.embed(P["tgt_emb"], prev)
        s = _gru(P, "dec", e, s, bias, ones)
        q = ad.reshape(ad.matmul(s, P["att_Wq"]), (B, A, 1))
        scores = ad.add(ad.reshape(ad.matmul(keys, q), (B, T)), att_bias)
        alpha = ad.reshape(ad.softmax(scores), (B, 1, T))
        ctx = ad.reshape(ad.matmul(alpha, Hs), (B, Hd))
        o = ad.tanh(ad.add(ad.matmul(ad.concat([s, ctx], axis=1), P["out_Wo"]), bias["out_bo"]))
        logp = ad.log(ad.softmax(ad.add(ad.matmul(o, P["out_W"]), bias["out_b"])))
        gold = np.zeros(B, dtype=np.intp)
        mask = np.zeros(B)
        prev = np.full(B, PAD, dtype=np.intp)
        for b, y in enumerate(tgt):
            if t < len(y):
                gold[b] = id_to_out(y[t])
                prev[b] = y[t]
            if t < steps[b]:
                mask[b] = 1.0
        term = ad.pick(logp, gold)
        if not mask.all():
            term = ad.multiply(term, ad.constant(mask))
        total = term if total is None else ad.add(total, term)
    return total


def logprob_and_grad(model: DirectionalModel, xs, ys, weights=None, forced=None):
    """Values log P(y_b|x_b) and the gradient of sum_b w_b log P(y_b|x_b)."""
    P = model.params.nodes()
    lp = logprob_graph(model, P, xs, ys, forced)
    w = np.ones(len(xs)) if weights is None else np.asarray(weights, dtype=np.float64)
    root = ad.sum_(ad.multiply(lp, ad.constant(w)))
    return lp.value.copy(), ad.backward(root, model.params)
