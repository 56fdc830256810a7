"""Cross-entropy-difference ranking of generic data and gradual (dynamic) finetuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .corpus import ParallelCorpus, SentencePair, content
from .errors import ConfigError, FingerprintMismatch
from .lm import NGramLM, cross_entropy, train_ngram
from .model import ModelParams
from .training import DataSource, EpochRunResult, TrainConfig, train_epochs

logger = logging.getLogger(__name__)


@dataclass
class CedRanker:
    lm_in_src: NGramLM
    lm_gen_src: NGramLM
    lm_in_tgt: NGramLM
    lm_gen_tgt: NGramLM
    normalized: bool = True

    def __post_init__(self):
        fps = {lm.vocab_fingerprint for lm in self.lms()}
        if len(fps) != 1:
            raise FingerprintMismatch("the four selection LMs were built on different vocabularies")

    def lms(self) -> tuple[NGramLM, ...]:
        return self.lm_in_src, self.lm_gen_src, self.lm_in_tgt, self.lm_gen_tgt

    @property
    def fingerprint(self) -> bytes:
        return self.lm_in_src.vocab_fingerprint


def build_ranker(
    in_domain: ParallelCorpus,
    generic: ParallelCorpus,
    order: int = 3,
    normalized: bool = True,
    vocab_size: int = 0,
    fingerprint: bytes = b"",
) -> CedRanker:
    def lm(c: ParallelCorpus, side: str) -> NGramLM:
        return train_ngram(
            [content(getattr(p, side)) for p in c.pairs], order,
            vocab_size=vocab_size, vocab_fingerprint=fingerprint,
        )

    return CedRanker(lm(in_domain, "source"), lm(generic, "source"),
                     lm(in_domain, "target"), lm(generic, "target"), normalized)


def ced_score(r: CedRanker, pair: SentencePair, fingerprint: bytes | None = None) -> float:
    """[H_I(src) - H_G(src)] + [H_I(tgt) - H_G(tgt)]; lower means more in-domain."""
    if fingerprint is not None and fingerprint != r.fingerprint:
        raise FingerprintMismatch(
            f"pair vocabulary {fingerprint.hex()} != ranker vocabulary {r.fingerprint.hex()}"
        )
    src, tgt = content(pair.source), content(pair.target)
    n = r.normalized
    return (cross_entropy(r.lm_in_src, src, n) - cross_entropy(r.lm_gen_src, src, n)) + (
        cross_entropy(r.lm_in_tgt, tgt, n) - cross_entropy(r.lm_gen_tgt, tgt, n)
    )


def rank_by_ced(r: CedRanker, g: ParallelCorpus, fingerprint: bytes | None = None) -> list[int]:
    """Generic indices by ascending CED; equal scores keep corpus order."""
    scores = [ced_score(r, p, fingerprint) for p in g.pairs]
    return sorted(range(len(scores)), key=lambda i: (scores[i], i))


@dataclass(frozen=True)
class SelectionSchedule:
    alpha: float
    beta: float
    nu: int
    generic_size: int
    integer_exponent: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.nu < 1:
            raise ConfigError(f"nu must be >= 1, got {self.nu}")
        if self.generic_size < 0:
            raise ConfigError("generic_size must be >= 0")


def selection_size(s: SelectionSchedule, epoch: int) -> int:
    """alpha * |G| * beta ** ((epoch - 1) / nu), rounded half up and floored at 1.

    With ``integer_exponent`` the exponent is (epoch - 1) // nu, which keeps the
    subset fixed for blocks of ``nu`` epochs.
    """
    if epoch < 1:
        raise ValueError("epoch is 1-based")
    exponent = (epoch - 1) // s.nu if s.integer_exponent else (epoch - 1) / s.nu
    n = math.floor(s.alpha * s.generic_size * s.beta ** exponent + 0.5)
    return min(max(n, 1), s.generic_size)


def select_subset(ranked: Sequence[int], g: ParallelCorpus, n: int) -> ParallelCorpus:
    if n > len(g):
        logger.warning("selection size %d exceeds generic corpus size %d; clamping", n, len(g))
        n = len(g)
    return g.subset(ranked[:max(n, 0)])


@dataclass
class FinetuneResult:
    params: ModelParams
    checkpoints: list[ModelParams]
    subsets: list[list[int]]  # selected generic indices per epoch, in rank order
    run: EpochRunResult


def dynamic_finetune(
    base: ModelParams,
    in_domain: ParallelCorpus,
    generic: ParallelCorpus,
    s: SelectionSchedule,
    epochs: int,
    train_cfg: TrainConfig,
    seed: int = 0,
    ranking: Sequence[int] | None = None,
    lm_order: int = 3,
    criterion: Callable[[ModelParams], float] | None = None,
    patience: int | None = None,
    ckpt_dir: str | Path | None = None,
) -> FinetuneResult:
    """Finetune ``base`` on in-domain data plus a shrinking CED-ranked generic subset.

    Ranking happens once (the LMs never change); epoch ``i`` trains one pass over
    ``in_domain`` and the top ``selection_size(s, i)`` generic pairs.
    """
    if ranking is None:
        ranking = rank_by_ced(build_ranker(in_domain, generic, lm_order), generic)
    ranking = list(ranking)
    subsets: dict[int, list[int]] = {}

    def sources(i: int) -> list[DataSource]:
        chosen = ranking[:selection_size(s, i)] if len(generic) else []
        subsets[i] = chosen
        mixed = ParallelCorpus(in_domain.pairs + [generic.pairs[j] for j in chosen], in_domain.domain_tag)
        return [DataSource(mixed, name=in_domain.domain_tag)]

    run = train_epochs(base, sources, train_cfg, epochs, seed,
                       criterion=criterion, patience=patience, ckpt_dir=ckpt_dir)
    for i in range(1, len(run.checkpoints) + 1):
        if i not in subsets:  # epochs restored from disk
            subsets[i] = ranking[:selection_size(s, i)] if len(generic) else []
    return FinetuneResult(run.params, run.checkpoints, [subsets[i] for i in sorted(subsets)], run)
