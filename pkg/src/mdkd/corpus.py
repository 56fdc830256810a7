"""Parallel corpora: loading, length filtering, joint BPE and the shared vocabulary."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import AlignmentError, ConfigError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
EOW = "</w>"
BPE_HEADER = "#version: mdkd-bpe 1"

_SPECIAL = {PAD, BOS, EOS, "<pad>", "<s>", "</s>"}


@dataclass(frozen=True)
class SentencePair:
    """One aligned sentence pair.

    ``source``/``target`` hold either BPE token strings (after
    :func:`tokenize_corpus`) or vocabulary ids (after :func:`encode_corpus`).
    """

    source: tuple = ()
    target: tuple = ()
    raw_source: str = ""
    raw_target: str = ""


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair] = field(default_factory=list)
    domain_tag: str = ""

    @property
    def size(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[SentencePair]:
        return iter(self.pairs)

    def __getitem__(self, i: int) -> SentencePair:
        return self.pairs[i]

    def subset(self, indices: Iterable[int]) -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in indices], self.domain_tag)


def content(seq: Sequence) -> list:
    """Strip PAD/BOS/EOS markers (ids or strings); UNK counts as content."""
    return [t for t in seq if t not in _SPECIAL]


def _read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [ln.rstrip("\r") for ln in lines]


def load_parallel(src_path: str | Path, tgt_path: str | Path, domain_tag: str) -> ParallelCorpus:
    src = _read_lines(src_path)
    tgt = _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise AlignmentError(
            f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}"
        )
    pairs = [
        SentencePair(tuple(s.split()), tuple(t.split()), s, t) for s, t in zip(src, tgt)
    ]
    return ParallelCorpus(pairs, domain_tag)


def write_parallel(c: ParallelCorpus, src_path: str | Path, tgt_path: str | Path) -> None:
    """Write the token sides of ``c``, space-joined, one sentence per line."""
    for path, side in ((src_path, "source"), (tgt_path, "target")):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for p in c.pairs:
                f.write(" ".join(str(t) for t in getattr(p, side)) + "\n")


def filter_corpus(c: ParallelCorpus, max_len: int = 250, max_ratio: float = 1.5) -> ParallelCorpus:
    """Drop over-long pairs and pairs whose side lengths differ by more than ``max_ratio``.

    The ratio is symmetric: max(|src|, |tgt|) / min(|src|, |tgt|). Pairs with an
    empty side are dropped as well.
    """
    kept = []
    for p in c.pairs:
        ls, lt = len(content(p.source)), len(content(p.target))
        if ls == 0 or lt == 0:
            continue
        if ls > max_len or lt > max_len:
            continue
        if max(ls, lt) / min(ls, lt) > max_ratio:
            continue
        kept.append(p)
    return ParallelCorpus(kept, c.domain_tag)


# --------------------------------------------------------------------------- BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...] = ()

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def ranks(self) -> dict[tuple[str, str], int]:
        return {m: i for i, m in enumerate(self.merges)}


def word_symbols(word: str) -> tuple[str, ...]:
    """Characters of ``word`` with the end-of-word marker glued to the last one."""
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    stats: Counter = Counter()
    for syms, freq in words.items():
        for a, b in zip(syms, syms[1:]):
            stats[a, b] += freq
    return stats


def _merge_word(syms: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def learn_bpe_from_texts(texts: Iterable[str], num_merges: int) -> BpeModel:
    """Greedy pair-merge BPE over whitespace words of ``texts``.

    Ties on frequency go to the lexicographically smallest (left, right) pair.
    Learning stops early once no pair occurs at least twice.
    """
    word_freq = Counter(w for t in texts for w in t.split())
    words = {word_symbols(w): f for w, f in word_freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        stats = _pair_counts(words)
        if not stats:
            break
        top = max(stats.values())
        if top < 2:
            break
        best = min(p for p, n in stats.items() if n == top)
        merges.append(best)
        words = {_merge_word(s, best): f for s, f in words.items()}
    return BpeModel(tuple(merges))


def learn_bpe(c: ParallelCorpus | Iterable[ParallelCorpus], num_merges: int) -> BpeModel:
    """Joint BPE over the raw text of both sides of one or several corpora."""
    corpora = [c] if isinstance(c, ParallelCorpus) else list(c)
    texts = []
    for corpus in corpora:
        for p in corpus.pairs:
            texts.append(p.raw_source)
            texts.append(p.raw_target)
    return learn_bpe_from_texts(texts, num_merges)


def _segment_word(word: str, ranks: dict[tuple[str, str], int]) -> tuple[str, ...]:
    # ranks must strictly increase: a later merge may recreate an earlier pair,
    # which an in-order replay would not revisit
    syms = word_symbols(word)
    last = -1
    while len(syms) > 1:
        candidates = [
            (ranks[p], p) for p in zip(syms, syms[1:]) if ranks.get(p, -1) > last
        ]
        if not candidates:
            break
        last, best = min(candidates)
        syms = _merge_word(syms, best)
    return syms


class BpeApplier:
    """Caching segmenter equivalent to replaying the merges in learned order."""

    def __init__(self, model: BpeModel):
        self.model = model
        self._ranks = model.ranks()
        self._cache: dict[str, tuple[str, ...]] = {}

    def __call__(self, text: str) -> list[str]:
        out: list[str] = []
        for w in text.split():
            seg = self._cache.get(w)
            if seg is None:
                seg = self._cache[w] = _segment_word(w, self._ranks)
            out.extend(seg)
        return out


def apply_bpe(m: BpeModel, text: str) -> list[str]:
    return BpeApplier(m)(text)


def detokenize(tokens: Iterable[str]) -> str:
    """Undo BPE: concatenate and split words at end-of-word markers."""
    joined = "".join(t for t in tokens if t not in RESERVED_TOKENS)
    return " ".join(w for w in joined.split(EOW) if w)


def save_bpe(m: BpeModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(BPE_HEADER + "\n")
        for a, b in m.merges:
            f.write(f"{a} {b}\n")


def load_bpe(path: str | Path) -> BpeModel:
    lines = _read_lines(path)
    if not lines or lines[0] != BPE_HEADER:
        raise ConfigError(f"{path}: not a BPE model file (bad header)")
    merges = []
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split(" ")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{n}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges))


def tokenize_corpus(c: ParallelCorpus, m: BpeModel) -> ParallelCorpus:
    seg = BpeApplier(m)
    pairs = [
        SentencePair(tuple(seg(p.raw_source)), tuple(seg(p.raw_target)), p.raw_source, p.raw_target)
        for p in c.pairs
    ]
    return ParallelCorpus(pairs, c.domain_tag)


# --------------------------------------------------------------------- vocabulary


class Vocabulary:
    """Bijective token <-> id map; ids 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[:4] != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the four reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}
        self.fingerprint = hashlib.sha256("\n".join(tokens).encode("utf-8")).digest()[:8]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, fingerprint={self.fingerprint.hex()})"

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(_read_lines(path))


def build_vocab(corpora: Iterable[ParallelCorpus]) -> Vocabulary:
    counts: Counter = Counter()
    for c in corpora:
        for p in c.pairs:
            counts.update(p.source)
            counts.update(p.target)
    for t in RESERVED_TOKENS:
        counts.pop(t, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED_TOKENS + tuple(ordered))


def encode_pair(p: SentencePair, vocab: Vocabulary, reverse_source: bool = False) -> SentencePair:
    """Token strings -> ids. Source gets a trailing EOS; target is wrapped in BOS ... EOS.

    ``reverse_source`` feeds the source tokens right-to-left (EOS still last),
    which shortens the path from the first source words to the first target
    words in an encoder without attention.
    """
    src_ids = vocab.encode(content(p.source))
    if reverse_source:
        src_ids.reverse()
    tgt = (BOS,) + tuple(vocab.encode(content(p.target))) + (EOS,)
    return SentencePair(tuple(src_ids) + (EOS,), tgt, p.raw_source, p.raw_target)


def encode_corpus(c: ParallelCorpus, vocab: Vocabulary, reverse_source: bool = False) -> ParallelCorpus:
    return ParallelCorpus([encode_pair(p, vocab, reverse_source) for p in c.pairs], c.domain_tag)


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Model output ids -> plain text (specials dropped, BPE undone)."""
    return detokenize(vocab.token(i) for i in ids if i not in (PAD, BOS, EOS))
