"""Interpolated n-gram language models over token ids, used for cross-entropy scoring.

Orders 1..n are mixed with fixed (Jelinek-Mercer) weights. The unigram level is
add-one smoothed over the observed types plus UNK and EOS, so every
conditional is a proper distribution. A higher-order component whose context
was never seen falls back to the next lower order. All logs are natural.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import BOS, EOS, UNK
from .errors import ConfigError


@dataclass
class NGramLM:
    order: int
    interp_weights: tuple[float, ...]
    vocab_size: int
    vocab_fingerprint: bytes = b""
    # context tuple (length 0..order-1) -> Counter of next-token counts
    counts: dict[tuple[int, ...], Counter] = field(default_factory=dict)
    _totals: dict[tuple[int, ...], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ConfigError("order must be >= 1")
        w = tuple(float(x) for x in self.interp_weights)
        if len(w) != self.order:
            raise ConfigError(f"need {self.order} interpolation weights, got {len(w)}")
        if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ConfigError("interpolation weights must be nonnegative and sum to 1")
        self.interp_weights = w
        self.counts.setdefault((), Counter())
        self._totals = {ctx: sum(c.values()) for ctx, c in self.counts.items()}

    # -- counting

    def observe(self, history: Sequence[int], w: int) -> None:
        """Record one occurrence of ``w`` after ``history`` at every order."""
        for k in range(min(self.order, len(history) + 1)):
            ctx = tuple(history[len(history) - k:]) if k else ()
            self.counts.setdefault(ctx, Counter())[w] += 1
            self._totals[ctx] = self._totals.get(ctx, 0) + 1

    # -- probabilities

    def support(self) -> set[int]:
        """Tokens that carry probability mass: observed types plus UNK and EOS."""
        return set(self.counts[()]) | {UNK, EOS}

    def _map(self, t: int, support: set[int]) -> int:
        return t if t in support or t == BOS else UNK

    def _unigram(self, w: int, support: set[int]) -> float:
        return (self.counts[()][w] + 1) / (self._totals.get((), 0) + len(support))

    def prob(self, w: int, history: Sequence[int], support: set[int] | None = None) -> float:
        """P(w | history), where ``history`` is already BOS-padded on the left."""
        if support is None:
            support = self.support()
        w = self._map(w, support)
        history = [self._map(t, support) for t in history[max(0, len(history) - self.order + 1):]]
        p_lower = self._unigram(w, support)
        total = self.interp_weights[0] * p_lower
        for k in range(1, self.order):
            ctx = tuple(history[len(history) - k:]) if len(history) >= k else None
            n = self._totals.get(ctx, 0) if ctx is not None else 0
            if n > 0:
                p_lower = self.counts[ctx][w] / n
            total += self.interp_weights[k] * p_lower
        return total


@dataclass(frozen=True)
class SentenceScore:
    total_logprob: float
    num_tokens: int

    @property
    def per_word_cross_entropy(self) -> float:
        return -self.total_logprob / self.num_tokens


def _padded(tokens: Sequence[int], order: int) -> list[int]:
    return [BOS] * (order - 1) + list(tokens) + [EOS]


def train_ngram(
    corpus: Iterable[Sequence[int]],
    order: int = 3,
    interp_weights: Sequence[float] | None = None,
    vocab_size: int = 0,
    vocab_fingerprint: bytes = b"",
) -> NGramLM:
    """Count k-grams (k = 1..order) over BOS-padded, EOS-terminated sentences."""
    sentences = [list(s) for s in corpus]
    if not sentences:
        raise ConfigError("cannot train a language model on an empty corpus")
    if interp_weights is None:
        interp_weights = [1.0 / order] * order
    lm = NGramLM(order, tuple(interp_weights), vocab_size, vocab_fingerprint)
    for s in sentences:
        seq = _padded(s, order)
        for i in range(order - 1, len(seq)):
            lm.observe(seq[:i], seq[i])
    return lm


def sentence_logprob(lm: NGramLM, tokens: Sequence[int]) -> SentenceScore:
    """Sum of log P(w_t | context) over the tokens plus the final EOS."""
    if len(tokens) == 0:
        raise ValueError("tokens must be non-empty")
    support = lm.support()
    seq = _padded(tokens, lm.order)
    total = 0.0
    for i in range(lm.order - 1, len(seq)):
        total += math.log(lm.prob(seq[i], seq[:i], support))
    return SentenceScore(total, len(seq) - lm.order + 1)


def cross_entropy(lm: NGramLM, tokens: Sequence[int], normalized: bool = True) -> float:
    s = sentence_logprob(lm, tokens)
    return s.per_word_cross_entropy if normalized else -s.total_logprob


def save_ngram(lm: NGramLM, path: str | Path) -> None:
    weights = " ".join(repr(w) for w in lm.interp_weights)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(
            f"order {lm.order}; weights {weights}; "
            f"vocab_fingerprint {lm.vocab_fingerprint.hex()}; vocab_size {lm.vocab_size}\n"
        )
        for ctx in sorted(lm.counts, key=lambda c: (len(c), c)):
            for w in sorted(lm.counts[ctx]):
                f.write(" ".join(str(t) for t in (*ctx, w, lm.counts[ctx][w])) + "\n")


def load_ngram(path: str | Path) -> NGramLM:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        fields = {}
        for part in header.split(";"):
            key, _, value = part.strip().partition(" ")
            fields[key] = value
        try:
            order = int(fields["order"])
            weights = tuple(float(x) for x in fields["weights"].split())
            fp = bytes.fromhex(fields.get("vocab_fingerprint", ""))
            vocab_size = int(fields.get("vocab_size", 0))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"{path}: malformed LM header") from e
        counts: dict[tuple[int, ...], Counter] = {}
        for line in f:
            try:
                nums = [int(x) for x in line.split()]
            except ValueError as e:
                raise ConfigError(f"{path}: malformed count line {line!r}") from e
            if not nums:
                continue
            if len(nums) < 2 or len(nums) > order + 1:
                raise ConfigError(f"{path}: malformed count line {line!r}")
            *ctx, w, n = nums
            counts.setdefault(tuple(ctx), Counter())[w] = n
    return NGramLM(order, weights, vocab_size, fp, counts)
