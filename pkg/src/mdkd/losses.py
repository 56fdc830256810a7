"""Word-level losses: label-smoothed NLL, teacher-matching cross-entropy and their mix.

Every loss has the form ``-sum_j sum_k w_jk log p_jk`` for some target weight
matrix ``w``; :func:`target_weights` builds that matrix and is what the model's
backward pass differentiates against. No temperature is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS
from .errors import ConfigError

LOG_FLOOR = -745.0


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.7
    label_smoothing_eps: float = 0.1
    top_k: int = 8
    vocab_size: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ConfigError(f"label smoothing must be in [0, 1), got {self.label_smoothing_eps}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.vocab_size and self.top_k > self.vocab_size:
            raise ConfigError(f"top_k={self.top_k} exceeds vocabulary size {self.vocab_size}")


@dataclass(frozen=True)
class SoftTargets:
    """Top-K teacher distribution for each target position of one sentence."""

    ids: np.ndarray  # (T, K) int
    probs: np.ndarray  # (T, K) float

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros((len(self.ids), vocab_size))
        np.put_along_axis(out, self.ids.astype(np.intp), self.probs, axis=1)
        return out


def safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), LOG_FLOOR)


def _gold(tgt, n_positions: int) -> np.ndarray:
    """Gold output tokens; a full ``BOS ... EOS`` target is accepted and its BOS dropped."""
    tgt = np.asarray(tgt, dtype=np.intp)
    if len(tgt) == n_positions + 1 and tgt[0] == BOS:
        tgt = tgt[1:]
    if len(tgt) != n_positions:
        raise ValueError(f"{n_positions} distributions but {len(tgt)} target tokens")
    return tgt


def smoothed_targets(gold: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    """One-hot rows with 1-eps on the gold token and eps/(|V|-1) everywhere else."""
    q = np.full((len(gold), vocab_size), eps / (vocab_size - 1) if eps else 0.0)
    q[np.arange(len(gold)), gold] = 1.0 - eps
    return q


def target_weights(
    gold: np.ndarray,
    vocab_size: int,
    lam: float,
    eps: float,
    soft: SoftTargets | None = None,
) -> np.ndarray:
    """(1-lam) * smoothed one-hot + lam * teacher top-K, as a dense (T, |V|) matrix."""
    q = smoothed_targets(gold, vocab_size, eps)
    if lam == 0.0:
        return q
    if soft is None:
        raise ConfigError("lambda > 0 requires soft targets")
    if len(soft) != len(gold):
        raise ConfigError(f"soft targets cover {len(soft)} positions, target has {len(gold)}")
    return (1.0 - lam) * q + lam * soft.dense(vocab_size)


def nll_loss(dist: np.ndarray, tgt, eps: float = 0.0) -> float:
    dist = np.asarray(dist, dtype=float)
    gold = _gold(tgt, len(dist))
    q = smoothed_targets(gold, dist.shape[1], eps)
    return float(-(q * safe_log(dist)).sum())


def kd_loss(student: np.ndarray, teacher: SoftTargets) -> float:
    student = np.asarray(student, dtype=float)
    if len(teacher) != len(student):
        raise ValueError("student and teacher positions are not aligned")
    # dense layout, so lambda = 1 in combined_loss reproduces this bit for bit
    return float(-(teacher.dense(student.shape[1]) * safe_log(student)).sum())


def combined_loss(student: np.ndarray, teacher: SoftTargets | None, tgt, cfg: LossConfig) -> float:
    student = np.asarray(student, dtype=float)
    gold = _gold(tgt, len(student))
    w = target_weights(gold, student.shape[1], cfg.lam, cfg.label_smoothing_eps, teacher)
    return float(-(w * safe_log(student)).sum())


def topk_extract(dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` most probable ids (ties -> lowest id), renormalised to sum to one.

    Works on a single distribution (|V|,) or row-wise on (T, |V|).
    """
    dist = np.asarray(dist, dtype=float)
    if k < 1 or k > dist.shape[-1]:
        raise ValueError(f"k must be in [1, {dist.shape[-1]}], got {k}")
    order = np.argsort(-dist, axis=-1, kind="stable")[..., :k]
    probs = np.take_along_axis(dist, order, axis=-1)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    return order, probs


def soft_targets_from(dist: np.ndarray, k: int) -> SoftTargets:
    ids, probs = topk_extract(np.atleast_2d(dist), k)
    return SoftTargets(ids, probs)
