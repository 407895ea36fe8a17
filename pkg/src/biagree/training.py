"""Optimisation loops: MLE pretraining, helper-regularised phases, joint alternation.

Gradients produced elsewhere are ascent directions of a log-likelihood style
objective; they are averaged over the minibatch and fed to Adam.  Every random
choice (batch indices, pseudo-pair sampling) comes from the checkpoint's own
generator, so a run is reproducible from its checkpoint alone.
"""
from __future__ import annotations

import json
import math
import shlex
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agreement, oracle
from .agreement import RegularizerConfig
from .autodiff import NonFiniteError, ParamStore
from .corpus import Corpus, SentencePair
from .decoding import DecodeConfig, decode, sample_many, translate_all
from .evaluation import corpus_bleu
from .seq2seq import RESERVED, DirectionalModel, ModelConfig, Vocab, sequence_logprob

MAGIC = b"BIAGREE1"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# --- optimiser ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()},
                              self.step, self.lr, self.beta1, self.beta2, self.eps)

    def ascend(self, params: ParamStore, grad: dict[str, np.ndarray]):
        """One Adam step in the direction of ``grad`` (maximisation)."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name in params.names():
            g = grad[name]
            m, v = self.m[name], self.v[name]
            if m.shape != g.shape:
                raise ValueError(f"moment shape mismatch for {name}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    model: DirectionalModel
    optimizer: OptimizerState
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def fresh(cls, model: DirectionalModel, cfg: "TrainConfig"):
        opt = OptimizerState.create(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        return cls(model, opt, np.random.default_rng(cfg.seed), 0)

    def copy(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return Checkpoint(self.model.copy(), self.optimizer.copy(), rng, self.step)

    def equal(self, other: "Checkpoint") -> bool:
        """Bitwise equality of parameters, moments, step counts and rng state."""
        o1, o2 = self.optimizer, other.optimizer
        return (self.model.direction == other.model.direction
                and self.model.params.equal(other.model.params)
                and self.step == other.step and o1.step == o2.step
                and all(np.array_equal(o1.m[k], o2.m[k]) and np.array_equal(o1.v[k], o2.v[k]) for k in o1.m)
                and self.rng.bit_generator.state == other.rng.bit_generator.state)

    def save(self, path):
        m = self.model
        names = m.params.names()
        blocks = ([("param", n, m.params[n]) for n in names] + [("adam_m", n, self.optimizer.m[n]) for n in names]
                  + [("adam_v", n, self.optimizer.v[n]) for n in names])
        o = self.optimizer
        header = {
            "version": FORMAT_VERSION,
            "config": asdict(m.config),
            "direction": m.direction,
            "src_vocab": None if m.src_vocab is None else m.src_vocab.tokens,
            "tgt_vocab": None if m.tgt_vocab is None else m.tgt_vocab.tokens,
            "step": self.step,
            "optimizer": {"step": o.step, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps},
            "rng": self.rng.bit_generator.state,
            "blocks": [{"group": g, "name": n, "shape": list(a.shape)} for g, n, a in blocks],
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            for _, _, a in blocks:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n].decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        pos = 16 + n
        expected = pos + 8 * sum(int(np.prod(b["shape"])) if b["shape"] else 1 for b in header["blocks"])
        if expected != len(data):
            raise ValueError(f"{path}: trailing or missing bytes ({len(data)} present, {expected} declared)")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for b in header["blocks"]:
            count = int(np.prod(b["shape"])) if b["shape"] else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(b["shape"])
            groups[b["group"]][b["name"]] = arr.astype(np.float64)
            pos += 8 * count
        vocab = lambda t: None if t is None else Vocab(t)
        model = DirectionalModel(ModelConfig(**header["config"]), header["direction"],
                                 ParamStore(groups["param"]), vocab(header["src_vocab"]), vocab(header["tgt_vocab"]))
        o = header["optimizer"]
        opt = OptimizerState(groups["adam_m"], groups["adam_v"], o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
        return cls(model, opt, rng, header["step"])


# --- log -------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, np.floating):
        return repr(float(v))
    return shlex.quote(str(v))


def _parse(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(s, s)


class TrainLog:
    """Append-only list of ``kind=... key=value`` records."""

    def __init__(self, records=None):
        self._records: list[dict] = list(records or [])

    def add(self, kind: str, **fields):
        self._records.append({"kind": kind, **fields})

    def records(self, kind: str | None = None) -> list[dict]:
        return [dict(r) for r in self._records if kind is None or r["kind"] == kind]

    def __len__(self):
        return len(self._records)

    def dumps(self) -> str:
        return "".join(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()) + "\n" for r in self._records)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "TrainLog":
        recs = []
        for line in text.splitlines():
            if line.strip():
                recs.append({k: _parse(v) for k, v in (item.split("=", 1) for item in shlex.split(line))})
        return cls(recs)

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# --- configs ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and log_every >= 1 required")


@dataclass
class JointTrainConfig:
    max_iterations: int = 5
    steps_per_phase: int = 2000
    dev_beam: int = 8
    dev_alpha: float = 1.0
    probe_size: int = 10
    probe_max_len: int = 4
    probe_space_limit: int = 5000  # skip the exact KL probe above this many sequences
    kl_samples: int = 20
    seed: int = 0

    def __post_init__(self):
        # zero iterations is accepted: the inputs come back with their Iteration-0 evaluation
        if self.max_iterations < 0 or self.steps_per_phase < 0:
            raise ValueError("max_iterations and steps_per_phase must be non-negative")


# --- loops -----------------------------------------------------------------------


GradFn = Callable[[DirectionalModel, list, np.random.Generator], agreement.GradientEstimate]


def _run_steps(ckpt: Checkpoint, corpus: Corpus, n_steps: int, cfg: TrainConfig, grad_fn: GradFn,
               log: TrainLog | None, phase: str) -> Checkpoint:
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    ck = ckpt.copy()
    pairs = list(corpus)
    B = cfg.batch_size
    generated = kept = 0
    for _ in range(n_steps):
        batch_id = ck.step
        idx = ck.rng.integers(0, len(pairs), size=B)
        batch = [(pairs[i].x, pairs[i].y) for i in idx]
        try:
            est = grad_fn(ck.model, batch, ck.rng)
        except NonFiniteError as e:
            raise TrainingError(f"{phase}: non-finite value at step {ck.step} (batch {batch_id}): {e}") from e
        loss = -est.stats["mle_logprob"] / B
        if not math.isfinite(loss):
            raise TrainingError(f"{phase}: non-finite loss at step {ck.step} (batch {batch_id})")
        ck.optimizer.ascend(ck.model.params, {k: g / B for k, g in est.total.items()})
        ck.step += 1
        generated += est.generated
        kept += est.kept
        if log is not None and ck.step % cfg.log_every == 0:
            rec = {"phase": phase, "direction": ck.model.direction, "step": ck.step, "nll": loss}
            if est.generated:
                rec.update(generated=est.generated, kept=est.kept, keep_rate=est.keep_rate,
                           mean_weight=est.stats.get("mean_weight", 0.0))
            log.add("step", **rec)
    if log is not None and generated:
        log.add("phase", phase=phase, direction=ck.model.direction, step=ck.step,
                generated=generated, kept=kept, keep_rate=kept / generated)
    return ck


def pretrain_mle(direction: str, corpus: Corpus, cfg: TrainConfig, model_config: ModelConfig | None = None,
                 src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None,
                 init: Checkpoint | None = None, log: TrainLog | None = None) -> Checkpoint:
    """Maximum-likelihood training for ``cfg.steps`` minibatches.

    Starts from ``init`` when given (continued training), otherwise from a
    fresh model seeded with ``cfg.seed``.
    """
    if init is None:
        if model_config is None:
            raise ValueError("pretrain_mle needs a model_config or an initial checkpoint")
        model = DirectionalModel.create(model_config, direction, cfg.seed, src_vocab, tgt_vocab)
        init = Checkpoint.fresh(model, cfg)
    elif init.model.direction != direction:
        raise ValueError("initial checkpoint has the wrong direction")
    return _run_steps(init, corpus, cfg.steps, cfg, lambda m, b, rng: agreement.mle_grad(m, b), log, "mle")


def train_direction_with_helper(self_ckpt: Checkpoint, helper: Checkpoint | DirectionalModel, corpus: Corpus,
                                reg_cfg: RegularizerConfig, cfg: TrainConfig, log: TrainLog | None = None,
                                steps: int | None = None) -> Checkpoint:
    """Regularised phase for one direction with ``helper`` held fixed.

    With ``reg_cfg.lam == 0`` this is exactly continued MLE training.
    """
    helper_model = helper.model if isinstance(helper, Checkpoint) else helper
    if helper_model.direction == self_ckpt.model.direction:
        raise ValueError("helper must have the opposite direction")
    fn = lambda m, b, rng: agreement.rt_grad(m, helper_model, b, reg_cfg, rng)
    n = cfg.steps if steps is None else steps
    return _run_steps(self_ckpt, corpus, n, cfg, fn, log, "rt" if reg_cfg.lam else "mle")


def dev_bleu(model: DirectionalModel, dev: Corpus, beam: int = 8, alpha: float = 1.0) -> float:
    hyps = translate_all(model, dev.sources, DecodeConfig(beam, alpha))
    return corpus_bleu([h.tokens for h in hyps], dev.targets).value


def oracle_symmetric_kl(a: DirectionalModel, b: DirectionalModel, sources: Sequence, max_len: int) -> float:
    """Mean exact symmetric KL over ``sources`` (truncated at ``max_len``)."""
    space = oracle.enumerate_space(range(len(RESERVED), a.config.tgt_vocab_size), max_len)
    return float(np.mean([oracle.symmetric_kl(a, b, x, space) for x in sources]))


def sampled_symmetric_kl(a: DirectionalModel, b: DirectionalModel, sources: Sequence, n: int,
                         rng: np.random.Generator) -> float:
    """Monte-Carlo symmetric KL: mean log-ratio under samples of each model."""
    total = 0.0
    for x in sources:
        L = 2 * len(x) + 5
        for p, q in ((a, b), (b, a)):
            for h in sample_many(p, x, n, L, rng):
                ml = None if h.finished else L
                total += h.logprob - sequence_logprob(q, x, h.tokens, ml)
    return total / (n * len(sources))


def _probe(l2r, r2l, dev, jcfg, iteration):
    probe = dev.sources[: jcfg.probe_size]
    n_tok = l2r.config.tgt_vocab_size - len(RESERVED)
    space_size = sum(n_tok ** k for k in range(jcfg.probe_max_len + 1))
    exact = (oracle_symmetric_kl(l2r, r2l, probe, jcfg.probe_max_len)
             if space_size <= jcfg.probe_space_limit else float("nan"))
    rng = np.random.default_rng([jcfg.seed, iteration])
    sampled = sampled_symmetric_kl(l2r, r2l, probe, jcfg.kl_samples, rng) if jcfg.kl_samples else float("nan")
    return exact, sampled


def joint_train(l2r: Checkpoint, r2l: Checkpoint, corpus: Corpus, dev: Corpus, joint_cfg: JointTrainConfig,
                reg_cfg: RegularizerConfig, cfg: TrainConfig, log: TrainLog | None = None,
                on_iteration=None):
    """Alternate regularised phases until dev BLEU stops improving in both directions.

    Each iteration trains L2R against the iteration-start R2L, then R2L
    against the iteration-start L2R.  On a halt the models of the previous
    iteration (the last one that improved) are returned, with the log.  ``on_iteration(k, l2r, r2l)`` is called after
    each iteration (the CLI uses it to checkpoint).
    """
    if l2r.model.direction == r2l.model.direction:
        raise ValueError("joint_train needs one L2R and one R2L checkpoint")
    if l2r.model.tgt_vocab is not None and r2l.model.tgt_vocab is not None and l2r.model.tgt_vocab != r2l.model.tgt_vocab:
        raise ValueError("joint_train: models use different target vocabularies")
    log = log if log is not None else TrainLog()
    jc = joint_cfg

    def evaluate(k, a, b):
        bl, br = dev_bleu(a.model, dev, jc.dev_beam, jc.dev_alpha), dev_bleu(b.model, dev, jc.dev_beam, jc.dev_alpha)
        kl_exact, kl_sampled = _probe(a.model, b.model, dev, jc, k)
        log.add("iteration", iteration=k, dev_bleu_l2r=bl, dev_bleu_r2l=br, kl_oracle=kl_exact, kl_sampled=kl_sampled)
        return bl, br

    prev = evaluate(0, l2r, r2l)
    for k in range(1, jc.max_iterations + 1):
        new_l2r = train_direction_with_helper(l2r, r2l, corpus, reg_cfg, cfg, log, jc.steps_per_phase)
        new_r2l = train_direction_with_helper(r2l, l2r, corpus, reg_cfg, cfg, log, jc.steps_per_phase)
        cur = evaluate(k, new_l2r, new_r2l)
        if on_iteration is not None:
            on_iteration(k, new_l2r, new_r2l)
        if cur[0] <= prev[0] and cur[1] <= prev[1]:
            # early stopping: keep the pair from the last iteration that still improved
            log.add("halt", iteration=k, returned=k - 1, reason="dev-bleu-non-increase")
            break
        l2r, r2l, prev = new_l2r, new_r2l, cur
    else:
        log.add("halt", iteration=jc.max_iterations, returned=jc.max_iterations, reason="max-iterations")
    return l2r, r2l, log


def back_translate_augment(target_to_source: DirectionalModel | Checkpoint, monolingual: Sequence[Sequence[int]],
                           corpus: Corpus, cfg: DecodeConfig | None = None) -> Corpus:
    """Pair each monolingual target with a decoded synthetic source.

    Targets whose decode comes back empty are skipped: an empty source
    cannot be encoded.
    """
    model = target_to_source.model if isinstance(target_to_source, Checkpoint) else target_to_source
    cfg = cfg or DecodeConfig(4, 1.0)
    pairs = list(corpus.pairs)
    for y in monolingual:
        x_hat = decode(model, tuple(y), cfg).tokens
        if x_hat:
            pairs.append(SentencePair(tuple(x_hat), tuple(y), "synthetic-bt"))
    return Corpus(pairs, corpus.split)
