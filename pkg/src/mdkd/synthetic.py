"""Synthetic multi-domain translation task for end-to-end runs.

Every sentence is a short string of one-character words. Shared words copy
through unchanged. Each domain owns a few trigger words whose translation
is a domain-specific substitution. In-domain sentences always contain
triggers of their own domain; a small fraction of the generic corpus carries
triggers of some domain, which is the material data selection should find.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# one-character words copied through unchanged; Greek letters extend the pool
SHARED_POOL = tuple(string.ascii_lowercase) + tuple(chr(c) for c in range(0x3B1, 0x3CA) if c != 0x3C2)
TRIGGER_SRC = tuple(string.ascii_uppercase)
TRIGGER_TGT = tuple(string.digits + "#$%&@+=?!*")


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int = 2
    shared_words: int = 40
    triggers_per_domain: int = 4
    train_per_domain: int = 500
    generic_train: int = 1500
    dev_size: int = 60
    test_size: int = 100
    min_len: int = 3
    max_len: int = 5
    generic_trigger_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_domains * self.triggers_per_domain <= len(TRIGGER_TGT):
            raise ValueError("too many triggers for the symbol inventory")
        if not 1 <= self.shared_words <= len(SHARED_POOL):
            raise ValueError(f"shared_words must be in [1, {len(SHARED_POOL)}]")


def domain_tags(n: int) -> list[str]:
    return [f"dom{k}" for k in range(n)]


def lexicon(spec: SyntheticSpec) -> dict[str, dict[str, str]]:
    """Per-domain trigger -> translation maps."""
    t = spec.triggers_per_domain
    return {
        tag: {TRIGGER_SRC[k * t + j]: TRIGGER_TGT[k * t + j] for j in range(t)}
        for k, tag in enumerate(domain_tags(spec.n_domains))
    }


def _sentence(rng: np.random.Generator, spec: SyntheticSpec, triggers: dict[str, str] | None):
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    shared = SHARED_POOL[:spec.shared_words]
    src = [shared[i] for i in rng.integers(0, len(shared), n)]
    if triggers:
        keys = sorted(triggers)
        k = int(rng.integers(1, 3))
        for pos in rng.choice(n, size=min(k, n), replace=False):
            src[pos] = keys[int(rng.integers(len(keys)))]
    tgt = [triggers.get(w, w) if triggers else w for w in src]
    return " ".join(src), " ".join(tgt)


def _corpus(rng, spec, size, triggers_fn):
    return [_sentence(rng, spec, triggers_fn()) for _ in range(size)]


def generate(spec: SyntheticSpec) -> dict[str, dict[str, list[tuple[str, str]]]]:
    """``{tag: {"train"|"dev"|"test": [(src, tgt), ...]}}`` for "generic" and each domain."""
    rng = np.random.default_rng(spec.seed)
    lex = lexicon(spec)
    tags = list(lex)

    def generic_triggers():
        if rng.random() < spec.generic_trigger_rate:
            return lex[tags[int(rng.integers(len(tags)))]]
        return None

    data = {"generic": {
        "train": _corpus(rng, spec, spec.generic_train, generic_triggers),
        "dev": _corpus(rng, spec, spec.dev_size, generic_triggers),
        "test": _corpus(rng, spec, spec.test_size, generic_triggers),
    }}
    for tag in tags:
        data[tag] = {
            "train": _corpus(rng, spec, spec.train_per_domain, lambda: lex[tag]),
            "dev": _corpus(rng, spec, spec.dev_size, lambda: lex[tag]),
            "test": _corpus(rng, spec, spec.test_size, lambda: lex[tag]),
        }
    return data


def write_task(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, dict[str, tuple[str, str]]]:
    """Write every split as ``<tag>.<split>.src/.tgt``; returns the path table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, dict[str, tuple[str, str]]] = {}
    for tag, splits in generate(spec).items():
        paths[tag] = {}
        for split, pairs in splits.items():
            src, tgt = out_dir / f"{tag}.{split}.src", out_dir / f"{tag}.{split}.tgt"
            src.write_text("".join(s + "\n" for s, _ in pairs), encoding="utf-8")
            tgt.write_text("".join(t + "\n" for _, t in pairs), encoding="utf-8")
            paths[tag][split] = (str(src), str(tgt))
    return paths
