"""Command-line entry point: ``biagree <subcommand> [--config FILE] [--set key=value ...]``.

Every subcommand works inside a run directory ``<paths.runs>/<config-hash>-s<seed>``.
Missing upstream artifacts (data, pretrained checkpoints) are produced on
demand, so any subcommand can be the first one run for a config.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import ConfigError, ExperimentConfig
from .corpus import gen_synthetic, load_parallel, load_vocab, read_lines, save_parallel, save_vocab
from .decoding import NBestList, beam_search, rerank_js, translate_all
from .evaluation import bucket_report, corpus_bleu, iteration_log_report, sentence_bleu
from .oracle import estimator_bias_report
from .seq2seq import L2R, R2L, DirectionalModel
from .training import Checkpoint, TrainLog, joint_train, pretrain_mle

SUBCOMMANDS = ("gen-data", "train-mle", "train-rt", "translate", "rerank-js", "bleu",
               "bucket-report", "oracle-check", "report")
SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run directory plus its lock and provenance bookkeeping."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False, out=sys.stdout):
        self.cfg = cfg
        self.dir = Path(cfg["paths.runs"]) / f"{cfg.digest()}-s{cfg['seed']}"
        self.force = force
        self.out = out
        self.inputs: dict[str, str] = {}
        self._lock = self.dir / "run.lock"

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.dir} is locked by another process ({self._lock})") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        resolved = self.dir / "config.resolved"
        text = self.cfg.render()
        if resolved.exists() and resolved.read_text(encoding="utf-8") != text:
            self._lock.unlink()
            raise RuntimeError(f"{resolved} differs from the current config (hash collision?)")
        resolved.write_text(text, encoding="utf-8")
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)
        return False

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def claim(self, *paths: Path):
        """Ask before overwriting outputs of an explicitly requested step."""
        existing = [p for p in paths if p.exists()]
        if not existing or self.force:
            return
        names = ", ".join(str(p.relative_to(self.dir)) for p in existing)
        if sys.stdin.isatty():
            ans = input(f"overwrite {names} in {self.dir}? [y/N] ")
            if ans.strip().lower() in ("y", "yes"):
                return
            raise UsageError("not overwriting existing outputs")
        raise UsageError(f"{names} already exist in {self.dir}; pass --force to overwrite")

    def use(self, path: Path) -> Path:
        self.inputs[str(path.relative_to(self.dir)) if path.is_relative_to(self.dir) else str(path)] = _sha256(path)
        return path

    def write_versions(self, sub: str):
        lines = [f"subcommand={sub}", f"biagree={__version__}", f"python={platform.python_version()}",
                 f"numpy={np.__version__}", f"kernel_backend={kernels.BACKEND}",
                 f"config_hash={self.cfg.digest()}"]
        lines += [f"input {name} sha256={digest}" for name, digest in sorted(self.inputs.items())]
        self.path("versions", f"{sub}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def say(self, msg: str):
        print(msg, file=self.out)


# --- pipeline steps -----------------------------------------------------------


def step_gen_data(run: Run):
    cfg = run.cfg
    td = gen_synthetic(cfg.task_spec(), cfg.sizes())
    for split in SPLITS:
        corpus = getattr(td, split)
        save_parallel(corpus, run.path("data", f"{split}.src"), run.path("data", f"{split}.tgt"), td.vocab)
    save_vocab(td.vocab, run.path("data", "vocab.txt"))
    run.say(f"wrote {sum(len(getattr(td, s)) for s in SPLITS)} pairs to {run.dir / 'data'}")


def ensure_data(run: Run):
    if not run.dir.joinpath("data", "vocab.txt").exists():
        step_gen_data(run)


def load_split(run: Run, split: str):
    ensure_data(run)
    vocab = load_vocab(run.use(run.path("data", "vocab.txt")))
    src, tgt = run.use(run.path("data", f"{split}.src")), run.use(run.path("data", f"{split}.tgt"))
    return load_parallel(src, tgt, vocab, vocab, split), vocab


def step_train_mle(run: Run):
    cfg = run.cfg
    train, vocab = load_split(run, "train")
    partial_log = run.path("train-mle.partial.log")
    resuming = partial_log.exists()
    if resuming:
        log = TrainLog.load(partial_log)
    else:
        log = TrainLog()
        log.add("config", hash=cfg.digest(), seed=cfg["seed"])
    mc = cfg.model_config(len(vocab), len(vocab))
    save_every = max(1, cfg["train.save_every"])
    for offset, direction in enumerate((L2R, R2L)):
        tc = cfg.train_config(seed_offset=offset)
        final = run.path(f"{direction.lower()}.mle.ckpt")
        partial = run.path(f"{direction.lower()}.mle.partial.ckpt")
        if resuming and final.exists() and not partial.exists():
            run.say(f"{direction}: already finished in the interrupted run")
            continue
        ck = Checkpoint.load(run.use(partial)) if partial.exists() else None
        if ck is None:
            model = DirectionalModel.create(mc, direction, tc.seed, vocab, vocab)
            ck = Checkpoint.fresh(model, tc)
        else:
            run.say(f"resuming {direction} from step {ck.step}")
        while ck.step < tc.steps:
            chunk = min(save_every - ck.step % save_every, tc.steps - ck.step)
            ck = pretrain_mle(direction, train, replace(tc, steps=chunk), init=ck, log=log)
            ck.save(partial)
            log.save(partial_log)
        ck.save(final)
        partial.unlink(missing_ok=True)
        run.say(f"{direction}: {ck.step} steps -> {final.name}")
    log.save(run.path("train-mle.log"))
    partial_log.unlink(missing_ok=True)


def ensure_mle(run: Run):
    if not all(run.dir.joinpath(f"{d}.mle.ckpt").exists() for d in ("l2r", "r2l")):
        step_train_mle(run)


def load_models(run: Run, stage: str):
    if stage == "mle":
        ensure_mle(run)
    elif not all(run.dir.joinpath(f"{d}.rt.ckpt").exists() for d in ("l2r", "r2l")):
        step_train_rt(run)
    return tuple(Checkpoint.load(run.use(run.path(f"{d}.{stage}.ckpt"))).model for d in ("l2r", "r2l"))


def step_train_rt(run: Run):
    cfg = run.cfg
    ensure_mle(run)
    train, _ = load_split(run, "train")
    dev, _ = load_split(run, "dev")
    l2r = Checkpoint.load(run.use(run.path("l2r.mle.ckpt")))
    r2l = Checkpoint.load(run.use(run.path("r2l.mle.ckpt")))
    log = TrainLog()
    log.add("config", hash=cfg.digest(), seed=cfg["seed"])

    def save(k, a, b, tag="rt.partial"):
        # per-iteration snapshots survive an interrupted run
        a.save(run.path(f"l2r.{tag}.ckpt"))
        b.save(run.path(f"r2l.{tag}.ckpt"))
        log.save(run.path("train-rt.log"))

    a, b, log = joint_train(l2r, r2l, train, dev, cfg.joint_config(), cfg.reg_config(), cfg.train_config(), log,
                            on_iteration=save)
    save(None, a, b, "rt")
    for d in ("l2r", "r2l"):
        run.dir.joinpath(f"{d}.rt.partial.ckpt").unlink(missing_ok=True)
    run.say(iteration_log_report(log).rstrip())


def _hyp_path(run, split, stage, system):
    return run.path("translations", f"{split}.{stage}.{system}.txt")


def step_translate(run: Run, split: str, stage: str, system: str):
    data, vocab = load_split(run, split)
    l2r, r2l = load_models(run, stage)
    dcfg = run.cfg.decode_config()
    if system == "js":
        hyps = []
        for x in data.sources:
            cands = list(beam_search(l2r, x, dcfg)) + list(beam_search(r2l, x, dcfg))
            hyps.append(rerank_js(l2r, r2l, x, NBestList.build(x, cands)).tokens)
    else:
        model = l2r if system == "l2r" else r2l
        hyps = [h.tokens for h in translate_all(model, data.sources, dcfg, run.cfg["decode.workers"])]
    out = _hyp_path(run, split, stage, system)
    out.write_text("".join(" ".join(vocab.decode(h)) + "\n" for h in hyps), encoding="utf-8")
    run.say(f"wrote {len(hyps)} translations to {out}")
    return out


def _bleu_row(name, s):
    ps = "\t".join("nan" if p is None else f"{100 * p:.4f}" for p in s.precisions)
    return f"{name}\t{100 * s.value:.4f}\t{ps}\t{s.brevity_penalty:.6f}\t{s.hyp_len}\t{s.ref_len}"


BLEU_HEAD = "system\tbleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len"


def _bleu_rows(name, hyps, refs, mode="corpus", smooth=True, lowercase=False):
    """Corpus mode: one row.  Sentence mode: one row per line, named ``name:<line>``."""
    if len(hyps) != len(refs):
        raise UsageError(f"{name}: {len(hyps)} hypotheses but {len(refs)} references")
    if mode == "corpus":
        return [_bleu_row(name, corpus_bleu(hyps, refs, lowercase))]
    return [_bleu_row(f"{name}:{i}", sentence_bleu(h, r, smooth, lowercase))
            for i, (h, r) in enumerate(zip(hyps, refs), start=1)]


def step_bleu(run: Run, split: str, mode="corpus", smooth=True, lowercase=False):
    files = sorted(run.dir.joinpath("translations").glob(f"{split}.*.txt"))
    if not files:
        raise UsageError(f"no translations for split {split!r} in {run.dir}; run `translate` first")
    refs = read_lines(run.use(run.path("data", f"{split}.tgt")))
    rows = [BLEU_HEAD]
    for f in files:
        hyps = read_lines(run.use(f))
        rows += _bleu_rows(f.name[len(split) + 1:-4], hyps, refs, mode, smooth, lowercase)
    out = run.path(f"bleu.{split}.tsv")
    run.claim(out)
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    run.say("\n".join(rows))


def step_bucket_report(run: Run, split: str, stage: str):
    data, vocab = load_split(run, split)
    systems = {}
    for st in dict.fromkeys(("mle", stage)):
        p = _hyp_path(run, split, st, "l2r")
        if not p.exists():
            step_translate(run, split, st, "l2r")
        systems[f"{st}.l2r"] = [vocab.encode(line) for line in read_lines(run.use(p))]
    rep = bucket_report(data.sources, data.targets, systems, run.cfg["report.bucket_edges"])
    out = run.path(f"buckets.{split}.tsv")
    run.claim(out)
    out.write_text(rep.to_tsv(), encoding="utf-8")
    run.say(rep.render(baseline="mle.l2r").rstrip())


def step_oracle_check(run: Run, stage: str | None):
    cfg = run.cfg
    dev, vocab = load_split(run, "dev")
    if stage is None:
        mc = cfg.model_config(len(vocab), len(vocab))
        l2r = DirectionalModel.create(mc, L2R, cfg["seed"], vocab, vocab)
        r2l = DirectionalModel.create(mc, R2L, cfg["seed"] + 1, vocab, vocab)
    else:
        l2r, r2l = load_models(run, stage)
    i = cfg["oracle.source_index"]
    if not 0 <= i < len(dev):
        raise UsageError(f"oracle.source_index {i} out of range for {len(dev)} dev sources")
    text = []
    for self_m, helper in ((l2r, r2l), (r2l, l2r)):
        rep = estimator_bias_report(self_m, helper, dev.sources[i], cfg.reg_config(), cfg["oracle.n_resamples"],
                                    cfg["seed"], cfg["oracle.max_len"])
        text.append(f"record=direction self={self_m.direction} helper={helper.direction}\n" + rep.render())
    out = run.path("oracle.txt")
    run.claim(out)
    out.write_text("".join(text), encoding="utf-8")
    run.say("".join(text).rstrip())


def step_report(run: Run):
    p = run.dir / "train-rt.log"
    if not p.exists():
        raise UsageError(f"{p} missing; run `train-rt` first")
    table = iteration_log_report(TrainLog.load(run.use(p)))
    rows = ["iteration\tdev_bleu_l2r\tdev_bleu_r2l\tkl_oracle\tkl_sampled"]
    for r in TrainLog.load(p).records("iteration"):
        rows.append("\t".join(str(r[k]) for k in ("iteration", "dev_bleu_l2r", "dev_bleu_r2l", "kl_oracle", "kl_sampled")))
    halts = TrainLog.load(p).records("halt")
    if halts:
        h = halts[-1]
        table += f"halted at iteration {h['iteration']} ({h['reason']}); kept models of iteration {h['returned']}\n"
    run.path("report.txt").write_text(table, encoding="utf-8")
    run.path("report.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    run.say(table.rstrip())


# --- argument handling ----------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="biagree", description="Bidirectional agreement training on toy tasks.")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs without asking")
    common.add_argument("--backend", choices=kernels.available_backends(), help="inference kernel backend")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("translate", "rerank-js", "bleu", "bucket-report"):
            p.add_argument("--split", choices=SPLITS, default="dev")
        if name in ("translate", "rerank-js", "bucket-report"):
            p.add_argument("--stage", choices=("mle", "rt"), default="mle")
        if name == "oracle-check":
            p.add_argument("--stage", choices=("mle", "rt"), default=None,
                           help="use trained checkpoints (default: freshly initialised models)")
        if name == "translate":
            p.add_argument("--model", choices=("l2r", "r2l", "js"), default="l2r")
        if name == "bleu":
            p.add_argument("--hyp", help="hypothesis file; with --ref, score it outside any run directory")
            p.add_argument("--ref", help="reference file")
            p.add_argument("--mode", choices=("corpus", "sentence"), default="corpus")
            p.add_argument("--smooth", action=argparse.BooleanOptionalAction, default=True,
                           help="add-one smoothing of higher-order precisions (sentence mode)")
            p.add_argument("--lowercase", action="store_true", help="compare tokens case-insensitively")
    return ap


def _standalone_bleu(args, out):
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    print(BLEU_HEAD, file=out)
    for row in _bleu_rows(Path(args.hyp).name, hyps, refs, args.mode, args.smooth, args.lowercase):
        print(row, file=out)


def run(argv=None, out=sys.stdout) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "bleu" and args.hyp:
            if not args.ref:
                raise UsageError("--hyp needs --ref")
            _standalone_bleu(args, out)
            return 0
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(args.set).validate()
        if args.backend:
            kernels.use_backend(args.backend)
        with Run(cfg, args.force, out) as r:
            c = args.command
            if c == "gen-data":
                r.claim(r.dir / "data" / "vocab.txt")
                step_gen_data(r)
            elif c == "train-mle":
                if not r.dir.joinpath("train-mle.partial.log").exists():  # resuming needs no --force
                    r.claim(r.dir / "l2r.mle.ckpt", r.dir / "r2l.mle.ckpt")
                step_train_mle(r)
            elif c == "train-rt":
                r.claim(r.dir / "l2r.rt.ckpt", r.dir / "r2l.rt.ckpt")
                step_train_rt(r)
            elif c in ("translate", "rerank-js"):
                system = "js" if c == "rerank-js" else args.model
                r.claim(_hyp_path(r, args.split, args.stage, system))
                step_translate(r, args.split, args.stage, system)
            elif c == "bleu":
                step_bleu(r, args.split, args.mode, args.smooth, args.lowercase)
            elif c == "bucket-report":
                step_bucket_report(r, args.split, args.stage)
            elif c == "oracle-check":
                step_oracle_check(r, args.stage)
            elif c == "report":
                step_report(r)
            r.write_versions(c)
        return 0
    except (ConfigError, UsageError) as e:
        print(f"biagree: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report, keep whatever checkpoints exist
        print(f"biagree: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
