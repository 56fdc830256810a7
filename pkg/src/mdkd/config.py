"""Experiment configuration: a YAML file with one section per stage.

Example (paths are relative to the config file)::

    seed: 1
    data:
      generic: {train: [g.train.src, g.train.tgt], dev: [...], test: [...]}
      domains:
        - tag: med
          train: [med.train.src, med.train.tgt]
          dev: [med.dev.src, med.dev.tgt]
          test: [med.test.src, med.test.tgt]
    preprocess: {bpe_merges: 0, max_len: 250, max_ratio: 1.5, reverse_source: true}
    model: {embed_dim: 32, hidden_dim: 32, max_decode_len: 12}
    loss: {lambda: 0.7, label_smoothing: 0.1, top_k: 8}
    selection: {alpha: 0.5, beta: 0.7, nu: 1, integer_exponent: false, lm_order: 3}
    train: {...}

Every key and its default is listed in :data:`DEFAULTS`.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 1,
    "data": {"generic": None, "domains": []},
    "preprocess": {
        "bpe_merges": 0,
        "max_len": 250,
        "max_ratio": 1.5,
        "reverse_source": True,
    },
    "model": {"embed_dim": 32, "hidden_dim": 32, "max_decode_len": 12},
    # student dimensions; null entries fall back to "model"
    "student_model": {"embed_dim": None, "hidden_dim": None},
    "loss": {"lambda": 0.7, "label_smoothing": 0.1, "top_k": 8},
    "selection": {
        "alpha": 0.5,
        "beta": 0.7,
        "nu": 1,
        "integer_exponent": False,
        "lm_order": 3,
        "normalized": True,
    },
    "train": {
        "batch_size": 32,
        "warmup": 200,
        "lr_scale": 0.5,
        "dropout": 0.1,
        "generic_steps": 10000,
        "checkpoint_every": 250,
        "average_last": 3,
        "generic_patience": 5,
        "teacher_epochs": 20,
        "teacher_patience": 5,
        "teacher_label_smoothing": 0.0,
        "student_epochs": 50,
        "student_patience": 10,
        "generic_subset_fraction": 0.1,
    },
}

# keys whose values must be lists/dicts and are not descended into by overrides
_OPAQUE = {("data", "generic"), ("data", "domains")}

HELP: dict[str, str] = {
    "seed": "master seed for initialisation, batch order and the generic subset",
    "data.generic": "generic corpus: {train, dev, test} each a [source, target] path pair",
    "data.domains": "list of {tag, train, dev, test} specialised corpora",
    "preprocess.bpe_merges": "number of joint BPE merge operations",
    "preprocess.max_len": "drop training pairs with a side longer than this many tokens",
    "preprocess.max_ratio": "drop training pairs whose side-length ratio exceeds this",
    "preprocess.reverse_source": "feed source tokens right-to-left to the encoder",
    "model.embed_dim": "embedding size (generic model and teachers)",
    "model.hidden_dim": "RNN state size; also the Noam model dimension",
    "model.max_decode_len": "greedy decoding length limit",
    "student_model.embed_dim": "student embedding size (null: same as model)",
    "student_model.hidden_dim": "student state size (null: same as model)",
    "loss.lambda": "weight of the teacher term in the student loss",
    "loss.label_smoothing": "label smoothing on the ground-truth term (generic model, student, baseline)",
    "loss.top_k": "teacher probabilities kept per target position",
    "selection.alpha": "relative start size of the selected generic subset",
    "selection.beta": "retention rate of the selection schedule",
    "selection.nu": "epochs per selection step",
    "selection.integer_exponent": "use (i-1)//nu instead of (i-1)/nu",
    "selection.lm_order": "n-gram order of the selection language models",
    "selection.normalized": "per-word (true) or total (false) cross-entropy",
    "train.batch_size": "sentences per batch",
    "train.warmup": "Noam warmup steps",
    "train.lr_scale": "Noam scale factor",
    "train.dropout": "accepted but not applied (the toy model has no dropout)",
    "train.generic_steps": "optimizer steps for the generic model",
    "train.checkpoint_every": "generic checkpoint interval in steps",
    "train.average_last": "number of final generic checkpoints averaged",
    "train.generic_patience": "stop generic training after this many checkpoints without dev-loss gain",
    "train.teacher_epochs": "dynamic-selection finetuning epochs per teacher",
    "train.teacher_patience": "teacher early-stop patience in epochs",
    "train.teacher_label_smoothing": "label smoothing for teachers (0: hard teachers)",
    "train.student_epochs": "student / baseline epochs",
    "train.student_patience": "student early-stop patience in epochs",
    "train.generic_subset_fraction": "fraction of the generic corpus mixed into student training",
}


def _merge(base: dict, upd: dict, prefix: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        path = prefix + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        if isinstance(base[k], dict) and path not in _OPAQUE:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path)!r} must be a mapping")
            out[k] = _merge(base[k], v, path)
        else:
            out[k] = v
    return out


def apply_override(raw: dict, override: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not KEY=VALUE")
    key, value = override.split("=", 1)
    parts = key.strip().split(".")
    node: dict = DEFAULTS
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    upd: dict = {}
    cur = upd
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = yaml.safe_load(value)
    merged = _merge(DEFAULTS, raw)
    return _merge(merged, upd)


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    def __getitem__(self, section: str):
        return self.raw[section]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def domain_tags(self) -> list[str]:
        return [d["tag"] for d in self.raw["data"]["domains"]]

    def corpus_paths(self, tag: str, split: str) -> tuple[Path, Path]:
        entry = self.raw["data"]["generic"] if tag == "generic" else next(
            d for d in self.raw["data"]["domains"] if d["tag"] == tag
        )
        src, tgt = entry[split]
        return self.base_dir / src, self.base_dir / tgt

    def section_hash(self, *sections: str) -> str:
        blob = json.dumps({s: self.raw[s] for s in sections}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self, check_files: bool = True) -> None:
        data = self.raw["data"]
        if not data.get("generic"):
            raise ConfigError("data.generic is required")
        if not data.get("domains"):
            raise ConfigError("at least one entry in data.domains is required")
        tags = self.domain_tags
        if len(set(tags)) != len(tags) or "generic" in tags:
            raise ConfigError("domain tags must be unique and not 'generic'")
        for tag in ["generic", *tags]:
            for split in ("train", "dev", "test"):
                entry = data["generic"] if tag == "generic" else next(d for d in data["domains"] if d["tag"] == tag)
                if split not in entry or len(entry[split]) != 2:
                    raise ConfigError(f"{tag}.{split} must be a [source, target] pair")
                if check_files:
                    for path in self.corpus_paths(tag, split):
                        if not path.exists():
                            raise FileNotFoundError(f"missing input file: {path}")
        lam = self.raw["loss"]["lambda"]
        if not 0 <= lam <= 1:
            raise ConfigError("loss.lambda must be in [0, 1]")
        if not 0 < self.raw["train"]["generic_subset_fraction"] <= 1:
            raise ConfigError("train.generic_subset_fraction must be in (0, 1]")

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def load_config(path: str | Path, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        user = yaml.safe_load(f) or {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = _merge(DEFAULTS, user)
    for o in overrides or []:
        raw = apply_override(raw, o)
    if seed is not None:
        raw["seed"] = int(seed)
    return ExperimentConfig(raw, path.resolve().parent)


def from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    return ExperimentConfig(_merge(DEFAULTS, raw), Path(base_dir).resolve())
