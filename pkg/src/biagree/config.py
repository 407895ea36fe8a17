"""Flat experiment configuration in a line-oriented ``key = value`` format.

    # comment
    seed = 3
    [reg]
    lam = 0.5          -> key "reg.lam"

Keys inside a ``[section]`` get the section name as prefix.  Every key has a
declared type and default; unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import math
from pathlib import Path

from .agreement import RegularizerConfig
from .corpus import TaskSpec
from .decoding import DecodeConfig
from .seq2seq import ModelConfig
from .training import JointTrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _opt(conv):
    def parse(s):
        if isinstance(s, str) and s.strip().lower() in ("none", "null", ""):
            return None
        return conv(s)
    parse.__name__ = f"optional {conv.__name__}"
    return parse


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _edges(s):
    if isinstance(s, (list, tuple)):
        return tuple(float(v) for v in s)
    return tuple(math.inf if v.strip() in ("inf", "+inf") else float(v) for v in str(s).split(","))


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "task.kind": (str, "copy"),
    "task.vocab_size": (int, 8),
    "task.min_len": (int, 2),
    "task.max_len": (int, 8),
    "task.noise": (float, 0.0),
    "task.train_size": (int, 2000),
    "task.dev_size": (int, 100),
    "task.test_size": (int, 100),
    "model.emb": (int, 32),
    "model.hidden": (int, 64),
    "model.attn": (int, 64),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 16),
    "train.lr": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.log_every": (int, 50),
    "train.save_every": (int, 500),
    "reg.lam": (float, 1.0),
    "reg.m": (int, 1),
    "reg.candidate_beam": (int, 4),
    "reg.filter_threshold": (_opt(float), 0.30),
    "reg.filter_smooth": (_bool, True),
    "reg.weight_clip": (_opt(float), 5.0),
    "reg.sampler": (str, "beam-best"),
    "reg.max_len": (_opt(int), None),
    "joint.max_iterations": (int, 5),
    "joint.steps_per_phase": (int, 2000),
    "joint.dev_beam": (int, 8),
    "joint.dev_alpha": (float, 1.0),
    "joint.probe_size": (int, 10),
    "joint.probe_max_len": (int, 4),
    "joint.probe_space_limit": (int, 5000),
    "joint.kl_samples": (int, 20),
    "decode.beam_size": (int, 8),
    "decode.alpha": (float, 1.0),
    "decode.max_len": (_opt(int), None),
    "decode.mode": (str, "beam"),
    "decode.workers": (int, 1),
    "oracle.max_len": (int, 3),
    "oracle.n_resamples": (int, 10000),
    "oracle.source_index": (int, 0),
    "report.bucket_edges": (_edges, (1.0, 4.0, 6.0, math.inf)),
    "paths.runs": (str, "runs"),
}


def _render_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join("inf" if math.isinf(e) else repr(e) for e in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class ExperimentConfig:
    """Resolved mapping from every schema key to a typed value."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parse = SCHEMA[key][0]
        try:
            self.values[key] = None if raw is None else parse(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides):
        out = ExperimentConfig(dict(self.values))
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            out.set(k, v.strip())
        return out

    def render(self) -> str:
        """Canonical text: top-level keys first, then one block per section."""
        lines = []
        section = None
        for key in sorted(self.values, key=lambda k: ("." in k, k)):
            sec, _, name = key.rpartition(".")
            if sec != section and sec:
                lines.append(f"[{sec}]")
                section = sec
            lines.append(f"{name} = {_render_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of everything except ``paths.*`` (where a run lives is not what it is)."""
        text = "".join(f"{k}={_render_value(v)}\n" for k, v in sorted(self.values.items())
                       if not k.startswith("paths."))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "ExperimentConfig":
        cfg = cls()
        section = ""
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            key = f"{section}.{k.strip()}" if section else k.strip()
            try:
                cfg.set(key, v.strip())
            except ConfigError as e:
                raise ConfigError(f"{origin}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    # typed views ------------------------------------------------------------

    def task_spec(self) -> TaskSpec:
        v = self.values
        return TaskSpec(v["task.kind"], v["task.vocab_size"], v["task.min_len"], v["task.max_len"],
                        v["task.noise"], v["seed"])

    def sizes(self):
        return {s: self.values[f"task.{s}_size"] for s in ("train", "dev", "test")}

    def model_config(self, src_size: int, tgt_size: int) -> ModelConfig:
        v = self.values
        return ModelConfig(src_size, tgt_size, v["model.emb"], v["model.hidden"], v["model.attn"])

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.steps"], v["train.batch_size"], v["train.lr"], v["train.beta1"],
                           v["train.beta2"], v["train.eps"], v["seed"] + seed_offset, v["train.log_every"])

    def reg_config(self) -> RegularizerConfig:
        v = self.values
        return RegularizerConfig(v["reg.lam"], v["reg.m"], v["reg.candidate_beam"], v["reg.filter_threshold"],
                                 v["reg.filter_smooth"], v["reg.weight_clip"], v["reg.sampler"], v["reg.max_len"])

    def joint_config(self) -> JointTrainConfig:
        v = self.values
        return JointTrainConfig(v["joint.max_iterations"], v["joint.steps_per_phase"], v["joint.dev_beam"],
                                v["joint.dev_alpha"], v["joint.probe_size"], v["joint.probe_max_len"],
                                v["joint.probe_space_limit"], v["joint.kl_samples"], v["seed"])

    def decode_config(self) -> DecodeConfig:
        v = self.values
        return DecodeConfig(v["decode.beam_size"], v["decode.alpha"], v["decode.max_len"], v["decode.mode"])

    def validate(self):
        """Build every typed view once so bad combinations fail early."""
        try:
            self.task_spec()
            self.model_config(4, 4)
            self.train_config()
            self.reg_config()
            self.joint_config()
            self.decode_config()
            _edges(self.values["report.bucket_edges"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self
