import math
import statistics

import numpy as np
import pytest

from biagree import autodiff as ad
from biagree.agreement import RegularizerConfig
from biagree.corpus import Corpus, SentencePair, TaskSpec, gen_synthetic
from biagree.decoding import DecodeConfig
from biagree.seq2seq import L2R, R2L, ModelConfig, sequence_logprob
from biagree.training import (
    FORMAT_VERSION, MAGIC, Checkpoint, JointTrainConfig, OptimizerState, TrainConfig, TrainingError,
    TrainLog, back_translate_augment, dev_bleu, joint_train, oracle_symmetric_kl, pretrain_mle,
    train_direction_with_helper,
)


@pytest.fixture(scope="module")
def copy_task():
    return gen_synthetic(TaskSpec("copy", vocab_size=4, min_len=1, max_len=4, seed=0), (40, 10, 10))


def mc(task, emb=6, hidden=10, attn=6):
    return ModelConfig(len(task.vocab), len(task.vocab), emb, hidden, attn)


def pre(task, direction=L2R, steps=20, seed=0, log=None, **kw):
    return pretrain_mle(direction, task.train, TrainConfig(steps=steps, seed=seed, log_every=5, **kw),
                        mc(task), task.vocab, task.vocab, log=log)


def params_equal(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params.names())


def corpus_logprob(model, corpus):
    return sum(sequence_logprob(model, p.x, p.y) for p in corpus)


# --- optimizer -------------------------------------------------------------------


def test_adam_first_step_is_sign_step():
    p = ad.ParamStore({"w": np.array([1.0, -2.0, 0.0])})
    opt = OptimizerState.create(p, lr=0.1)
    opt.ascend(p, {"w": np.array([3.0, -0.5, 0.0])})
    np.testing.assert_allclose(p["w"], [1.1, -2.1, 0.0], rtol=0, atol=1e-7)
    assert opt.step == 1


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = ad.ParamStore({"w": rng.normal(size=4)})
    opt = OptimizerState.create(p, lr=0.01, beta1=0.8, beta2=0.9, eps=1e-6)
    w, m, v = p["w"].copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.ascend(p, {"w": g})
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        w = w + 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-6)
    np.testing.assert_allclose(p["w"], w, rtol=1e-13)


def test_adam_moment_shapes_checked():
    p = ad.ParamStore({"w": np.zeros(3)})
    opt = OptimizerState.create(p)
    with pytest.raises(ValueError):
        opt.ascend(ad.ParamStore({"w": np.zeros(4)}), {"w": np.zeros(4)})


# --- checkpoint ------------------------------------------------------------------


def test_checkpoint_round_trip_trains_bitwise(copy_task, tmp_path):
    ck = pre(copy_task, steps=5)
    ck.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    assert loaded.equal(ck)
    cfg = TrainConfig(steps=10, seed=0)
    log_a, log_b = TrainLog(), TrainLog()
    a = pretrain_mle(L2R, copy_task.train, cfg, init=ck, log=log_a)
    b = pretrain_mle(L2R, copy_task.train, cfg, init=loaded, log=log_b)
    assert a.equal(b) and a.step == 15
    assert log_a.dumps() == log_b.dumps()


def test_checkpoint_file_layout(copy_task, tmp_path):
    ck = pre(copy_task, steps=1)
    path = tmp_path / "c.ckpt"
    ck.save(path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    n = int.from_bytes(raw[8:16], "little")
    import json
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    assert header["version"] == FORMAT_VERSION and header["direction"] == L2R
    n_floats = sum(int(np.prod(b["shape"])) for b in header["blocks"])
    assert len(raw) == 16 + n + 8 * n_floats


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError, match="magic"):
        Checkpoint.load(bad)


def test_checkpoint_rejects_truncation(copy_task, tmp_path):
    path = tmp_path / "t.ckpt"
    pre(copy_task, steps=1).save(path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="bytes"):
        Checkpoint.load(path)


def test_zero_steps_equals_initialisation(copy_task):
    cfg = TrainConfig(steps=0, seed=3)
    ck = pretrain_mle(L2R, copy_task.train, cfg, mc(copy_task), copy_task.vocab, copy_task.vocab)
    from biagree.seq2seq import DirectionalModel
    init = DirectionalModel.create(mc(copy_task), L2R, 3, copy_task.vocab, copy_task.vocab)
    assert params_equal(ck.model, init) and ck.step == 0


# --- train log -------------------------------------------------------------------


def test_train_log_round_trip(tmp_path):
    log = TrainLog()
    log.add("step", phase="rt", step=3, nll=0.1 + 0.2, keep_rate=1 / 3, ok=True)
    log.add("note", text="two words", value=float("nan"), big=10 ** 12)
    text = log.dumps()
    back = TrainLog.loads(text)
    assert back.dumps() == text
    r = back.records("step")[0]
    assert r["nll"] == 0.1 + 0.2 and r["keep_rate"] == 1 / 3 and r["ok"] is True and r["step"] == 3
    assert back.records("note")[0]["text"] == "two words"
    assert math.isnan(back.records("note")[0]["value"])
    log.save(tmp_path / "log.txt")
    assert TrainLog.load(tmp_path / "log.txt").dumps() == text


def test_train_log_is_append_only():
    log = TrainLog()
    log.add("a", x=1)
    snapshot = log.records()
    snapshot.append({"kind": "b"})
    assert len(log) == 1


# --- pretraining -----------------------------------------------------------------


def test_pretraining_is_deterministic(copy_task):
    la, lb = TrainLog(), TrainLog()
    a = pre(copy_task, steps=15, seed=4, log=la)
    b = pre(copy_task, steps=15, seed=4, log=lb)
    assert a.equal(b)
    assert la.dumps() == lb.dumps() and len(la.records("step")) == 3


def test_pretraining_improves_copy_likelihood_monotonically():
    task = gen_synthetic(TaskSpec("copy", vocab_size=4, min_len=1, max_len=4, seed=1), (10, 5, 5))
    cfg = TrainConfig(steps=50, seed=0)
    ck = pretrain_mle(L2R, task.train, TrainConfig(steps=0), mc(task, 8, 16, 8), task.vocab, task.vocab)
    curve = [corpus_logprob(ck.model, task.train)]
    for _ in range(10):
        ck = pretrain_mle(L2R, task.train, cfg, init=ck)
        curve.append(corpus_logprob(ck.model, task.train))
    assert ck.step == 500
    assert all(b > a for a, b in zip(curve, curve[1:])), curve


def test_non_finite_aborts_with_location(copy_task):
    ck = pre(copy_task, steps=2)
    ck.model.params["out_b"] = np.full_like(ck.model.params["out_b"], np.nan)
    with pytest.raises(TrainingError, match=r"step 2 \(batch 2\)"):
        pretrain_mle(L2R, copy_task.train, TrainConfig(steps=3), init=ck)


def test_empty_corpus_rejected(copy_task):
    with pytest.raises(ValueError, match="empty"):
        pretrain_mle(L2R, Corpus([]), TrainConfig(steps=1), mc(copy_task), copy_task.vocab, copy_task.vocab)


def test_wrong_direction_init_rejected(copy_task):
    with pytest.raises(ValueError):
        pretrain_mle(R2L, copy_task.train, TrainConfig(steps=1), init=pre(copy_task, steps=0))


@pytest.mark.slow
def test_palindromic_corpus_directions_agree():
    # a palindromic target reads the same both ways, so neither direction is favoured
    diffs = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        def pal():
            half = tuple(int(t) for t in rng.integers(3, 7, size=int(rng.integers(1, 3))))
            return half + half[::-1]
        base = gen_synthetic(TaskSpec("copy", vocab_size=4, min_len=1, max_len=4, seed=seed), (1, 1, 1))
        mk = lambda n: Corpus([SentencePair(y, y) for y in (pal() for _ in range(n))])
        train, dev = mk(60), mk(20)
        bleus = []
        for d in (L2R, R2L):
            ck = pretrain_mle(d, train, TrainConfig(steps=300, seed=seed),
                              ModelConfig(len(base.vocab), len(base.vocab), 8, 16, 8), base.vocab, base.vocab)
            bleus.append(dev_bleu(ck.model, dev, beam=4))
        diffs.append(bleus[0] - bleus[1])
    assert abs(statistics.mean(diffs)) < 0.1, diffs


# --- regularised phase -----------------------------------------------------------


REG = RegularizerConfig(sampler="ancestral", filter_threshold=0.0)


def test_helper_untouched_by_phase(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    snapshot = b.copy()
    train_direction_with_helper(a, b, copy_task.train, REG, TrainConfig(steps=5, seed=0))
    assert b.equal(snapshot)


def test_lambda_zero_equals_mle_continuation(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    cfg = TrainConfig(steps=12, seed=0, log_every=4)
    la, lb = TrainLog(), TrainLog()
    rt = train_direction_with_helper(a, b, copy_task.train, RegularizerConfig(lam=0.0), cfg, la)
    mle = pretrain_mle(L2R, copy_task.train, cfg, init=a, log=lb)
    assert rt.equal(mle)
    assert la.dumps() == lb.dumps()


def test_phase_rejects_same_direction(copy_task):
    a = pre(copy_task, L2R)
    with pytest.raises(ValueError, match="opposite"):
        train_direction_with_helper(a, a, copy_task.train, REG, TrainConfig(steps=1))


def test_keep_rate_accounting(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    log = TrainLog()
    reg = RegularizerConfig(sampler="ancestral", m=2, filter_threshold=0.5)
    train_direction_with_helper(a, b, copy_task.train, reg, TrainConfig(steps=6, seed=0, log_every=2), log)
    steps = log.records("step")
    assert len(steps) == 3
    for r in steps:
        assert r["generated"] == 2 * 2 * 16
        assert 0.0 <= r["keep_rate"] <= 1.0
        assert r["keep_rate"] == r["kept"] / r["generated"]
    (phase,) = log.records("phase")
    assert phase["generated"] == 6 * 64 and phase["keep_rate"] == phase["kept"] / phase["generated"]


def test_rt_phase_is_deterministic(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    runs = []
    for _ in range(2):
        log = TrainLog()
        ck = train_direction_with_helper(a, b, copy_task.train, REG, TrainConfig(steps=4, seed=0, log_every=1), log)
        runs.append((ck, log.dumps()))
    assert runs[0][0].equal(runs[1][0]) and runs[0][1] == runs[1][1]


# --- joint training ---------------------------------------------------------------


def test_joint_zero_iterations_returns_inputs(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    jc = JointTrainConfig(max_iterations=0, steps_per_phase=5, dev_beam=2, probe_size=2, probe_max_len=2,
                          kl_samples=2)
    ra, rb, log = joint_train(a, b, copy_task.train, copy_task.dev, jc, REG, TrainConfig(seed=0))
    assert ra.equal(a) and rb.equal(b)
    (it,) = log.records("iteration")
    assert it["iteration"] == 0
    assert it["dev_bleu_l2r"] == pytest.approx(dev_bleu(a.model, copy_task.dev, 2))
    assert it["kl_oracle"] == pytest.approx(oracle_symmetric_kl(a.model, b.model, copy_task.dev.sources[:2], 2))
    assert log.records("halt")[0]["reason"] == "max-iterations"


def test_joint_stop_rule_and_returned_models(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    seen = {}
    jc = JointTrainConfig(max_iterations=4, steps_per_phase=5, dev_beam=2, probe_size=2, probe_max_len=2,
                          kl_samples=0)
    ra, rb, log = joint_train(a, b, copy_task.train, copy_task.dev, jc, REG, TrainConfig(seed=0),
                              on_iteration=lambda k, x, y: seen.__setitem__(k, (x, y)))
    its = log.records("iteration")
    (halt,) = log.records("halt")
    assert [r["iteration"] for r in its] == list(range(len(its)))
    assert len(its) - 1 <= jc.max_iterations
    # every completed iteration before the last one improved at least one direction
    for prev, cur in zip(its[:-2], its[1:-1]):
        assert cur["dev_bleu_l2r"] > prev["dev_bleu_l2r"] or cur["dev_bleu_r2l"] > prev["dev_bleu_r2l"]
    last, before = its[-1], its[-2]
    if halt["reason"] == "dev-bleu-non-increase":
        assert last["dev_bleu_l2r"] <= before["dev_bleu_l2r"] and last["dev_bleu_r2l"] <= before["dev_bleu_r2l"]
        assert halt["returned"] == halt["iteration"] - 1
    else:
        assert halt["iteration"] == halt["returned"] == jc.max_iterations
    k = halt["returned"]
    expect = (a, b) if k == 0 else seen[k]
    assert ra.equal(expect[0]) and rb.equal(expect[1])


def test_joint_iteration_uses_frozen_iteration_start_helper(copy_task):
    a, b = pre(copy_task, L2R, seed=0), pre(copy_task, R2L, seed=1)
    jc = JointTrainConfig(max_iterations=1, steps_per_phase=3, dev_beam=2, probe_size=1, probe_max_len=1,
                          kl_samples=0)
    cfg = TrainConfig(seed=0)
    seen = {}
    joint_train(a, b, copy_task.train, copy_task.dev, jc, REG, cfg,
                on_iteration=lambda k, x, y: seen.__setitem__(k, (x, y)))
    ea = train_direction_with_helper(a, b, copy_task.train, REG, cfg, steps=3)
    eb = train_direction_with_helper(b, a, copy_task.train, REG, cfg, steps=3)
    assert seen[1][0].equal(ea) and seen[1][1].equal(eb)


def test_joint_rejects_mismatched_directions(copy_task):
    a = pre(copy_task, L2R)
    with pytest.raises(ValueError):
        joint_train(a, a, copy_task.train, copy_task.dev, JointTrainConfig(), REG, TrainConfig())


# --- back-translation -------------------------------------------------------------


def test_bt_zero_monolingual_is_identity(copy_task):
    t2s = pre(copy_task, L2R)
    out = back_translate_augment(t2s, [], copy_task.train)
    assert out.pairs == copy_task.train.pairs


def test_bt_pairs_are_tagged(copy_task):
    t2s = pre(copy_task, L2R, steps=30)
    mono = [(3, 4), (5,), (6, 6, 3)]
    out = back_translate_augment(t2s, mono, copy_task.train, DecodeConfig(2, 1.0))
    new = out.pairs[len(copy_task.train):]
    assert all(p.provenance == "synthetic-bt" for p in new)
    assert all(p.provenance == "real" for p in out.pairs[: len(copy_task.train)])
    assert [p.y for p in new] == [y for y in mono if y in {q.y for q in new}]
    assert all(len(p.x) > 0 for p in new)


@pytest.mark.slow
def test_bt_augmentation_does_not_hurt_in_median():
    gains = []
    for seed in range(3):
        task = gen_synthetic(TaskSpec("reverse", vocab_size=5, min_len=1, max_len=5, seed=seed), (60, 20, 120))
        cfg = TrainConfig(steps=400, seed=seed)
        model_cfg = mc(task, 8, 16, 8)
        # target->source model: trained on swapped pairs
        swapped = Corpus([SentencePair(p.y, p.x) for p in task.train])
        t2s = pretrain_mle(L2R, swapped, cfg, model_cfg, task.vocab, task.vocab)
        mono = [p.y for p in task.test][:120]
        aug = back_translate_augment(t2s, mono, task.train)
        plain = pretrain_mle(L2R, task.train, cfg, model_cfg, task.vocab, task.vocab)
        bt = pretrain_mle(L2R, aug, cfg, model_cfg, task.vocab, task.vocab)
        gains.append(dev_bleu(bt.model, task.dev, 4) - dev_bleu(plain.model, task.dev, 4))
    assert statistics.median(gains) >= 0, gains
