"""Corpus-level BLEU on whitespace tokens, model evaluation and checkpoint ranking."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .corpus import ParallelCorpus, Vocabulary, decode_ids
from .model import ModelParams, greedy_decode_batch


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, ...]  # percentages, like sacrebleu
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precisions"] = list(self.precisions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BleuScore":
        return cls(d["score"], tuple(d["precisions"]), d["brevity_penalty"], d["hyp_len"], d["ref_len"])


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hyps: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    max_n: int = 4,
    smooth: bool = False,
) -> BleuScore:
    """Single-reference corpus BLEU.

    Clipped n-gram matches and totals are summed over the corpus before the
    geometric mean. ``smooth`` adds one to the matches and totals of orders
    n >= 2 (sacrebleu's ``add-k`` with k=1). Inputs may be token lists or
    plain strings, which are split on whitespace.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    hyps = [h.split() if isinstance(h, str) else list(h) for h in hyps]
    refs = [r.split() if isinstance(r, str) else list(r) for r in refs]

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)

    precisions = []
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        precisions.append(m / t if t else 0.0)

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0

    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuScore(score, tuple(100.0 * p for p in precisions), bp, hyp_len, ref_len)


def translate(
    models: ModelParams | Sequence[ModelParams],
    test: ParallelCorpus,
    vocab: Vocabulary,
    max_len: int | None = None,
    batch_size: int = 128,
) -> list[str]:
    """Greedy translations (BPE undone); a list of models decodes as an ensemble."""
    models = [models] if isinstance(models, ModelParams) else list(models)
    max_len = max_len or models[0].cfg.max_decode_len
    out: list[str] = []
    for start in range(0, len(test), batch_size):
        srcs = [p.source for p in test.pairs[start:start + batch_size]]
        out.extend(decode_ids(ids, vocab) for ids in greedy_decode_batch(models, srcs, max_len))
    return out


def evaluate_model(
    m: ModelParams | Sequence[ModelParams],
    test: ParallelCorpus,
    vocab: Vocabulary,
    max_len: int | None = None,
) -> BleuScore:
    hyps = translate(m, test, vocab, max_len)
    return corpus_bleu(hyps, [p.raw_target for p in test.pairs])


def rank_checkpoints(scores: Sequence[Sequence[float]]) -> int:
    """Index of the checkpoint with the best mean BLEU over domains; ties go to the later one."""
    if not scores:
        raise ValueError("no checkpoints to rank")
    best, best_mean = 0, -math.inf
    for i, per_domain in enumerate(scores):
        mean = sum(per_domain) / len(per_domain)
        if mean >= best_mean:
            best, best_mean = i, mean
    return best


def compute_delta(bleu_kd: dict[str, float], bleu_ft: dict[str, float]) -> float:
    """Average per-domain BLEU gain of the distilled student over the finetuned baseline."""
    if set(bleu_kd) != set(bleu_ft):
        raise ValueError(f"domain sets differ: {sorted(bleu_kd)} vs {sorted(bleu_ft)}")
    if not bleu_kd:
        raise ValueError("no domains")
    return sum(bleu_kd[d] - bleu_ft[d] for d in bleu_kd) / len(bleu_kd)


def write_report(path: str | Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
