"""Mini-batch training: Adam + Noam schedule over domain-homogeneous batches.

Batch order is a pure function of ``(seed, epoch)``, and checkpoints carry the
optimizer state, so an interrupted run resumed from its last checkpoint ends
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ParallelCorpus
from .errors import DivergenceError
from .model import (
    Batch,
    ModelParams,
    OptimizerState,
    adam_step,
    backward_batch,
    batch_weights,
    forward_batch,
    load_checkpoint,
    make_batch,
    noam_lr,
    save_checkpoint,
)
from .store import SoftTargetStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    warmup: int = 200
    lr_scale: float = 2.0
    label_smoothing: float = 0.1
    dropout: float = 0.1  # accepted for config compatibility; the model has no dropout
    # added to the step number seen by the Noam schedule; finetuning stages set
    # it to the parent model's step count so the learning rate keeps decaying
    step_offset: int = 0


@dataclass
class DataSource:
    """A corpus trained with one loss: NLL only, or mixed with a teacher store."""

    corpus: ParallelCorpus
    store: SoftTargetStore | None = None
    lam: float = 0.0
    name: str = ""


# (source index, sentence indices within that source)
BatchSpec = tuple[int, tuple[int, ...]]


def epoch_plan(sizes: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[BatchSpec]:
    """Shuffle each source, cut it into batches, then shuffle the batch order."""
    rng = np.random.default_rng([seed, epoch])
    plan: list[BatchSpec] = []
    for s, n in enumerate(sizes):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            plan.append((s, tuple(int(i) for i in perm[start:start + batch_size])))
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


def build_batch(src: DataSource, indices: Sequence[int]) -> tuple[Batch, list[float]]:
    pairs = [src.corpus.pairs[i] for i in indices]
    use_store = src.lam > 0.0
    if use_store and src.store is None:
        raise ValueError(f"source {src.name!r} has lambda > 0 but no store")
    soft = [src.store[i] if use_store else None for i in indices]
    batch = make_batch([p.source for p in pairs], [p.target for p in pairs], soft)
    return batch, [src.lam] * len(pairs)


class BatchLog:
    """Hash chain over every batch seen; equal digests mean identical data exposure."""

    def __init__(self, digest: str = ""):
        self.digest = digest

    def update(self, tag: str, batch: Batch) -> None:
        h = hashlib.sha256(self.digest.encode())
        h.update(tag.encode())
        h.update(batch.src.tobytes())
        h.update(batch.tgt_out.tobytes())
        self.digest = h.hexdigest()


class Trainer:
    def __init__(self, params: ModelParams, cfg: TrainConfig, state: OptimizerState | None = None):
        self.params = params
        self.cfg = cfg
        self.state = state or OptimizerState.zeros(len(params))
        self.batch_log = BatchLog()

    @property
    def step_count(self) -> int:
        return self.state.step

    def step(self, batch: Batch, lams: Sequence[float], tag: str = "") -> float:
        self.batch_log.update(tag, batch)
        W = batch_weights(batch, self.params.cfg.vocab_size, lams, self.cfg.label_smoothing)
        g, loss = backward_batch(self.params, batch, W)
        g.flat /= len(batch)
        lr = noam_lr(self.state.step + 1 + self.cfg.step_offset, self.cfg.warmup, self.params.cfg.hidden_dim, self.cfg.lr_scale)
        self.params, self.state = adam_step(self.params, g, self.state, lr)
        return loss / len(batch)


def dev_loss(p: ModelParams, corpus: ParallelCorpus, batch_size: int = 128) -> float:
    """Per-token NLL (no smoothing) over a corpus."""
    total, tokens = 0.0, 0
    for start in range(0, len(corpus), batch_size):
        pairs = corpus.pairs[start:start + batch_size]
        batch = make_batch([q.source for q in pairs], [q.target for q in pairs])
        logp = forward_batch(p, batch)
        for i, n in enumerate(batch.lengths):
            gold = batch.tgt_out[i, :n]
            total -= float(logp[i, np.arange(n), gold].sum())
            tokens += int(n)
    return total / max(tokens, 1)


# -------------------------------------------------------------- checkpoint files


def _save(ckpt_dir: Path, stem: str, t: Trainer, extra: dict | None = None) -> Path:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"{stem}.ckpt"
    save_checkpoint(t.params, path)
    t.state.save(ckpt_dir / f"{stem}.opt.npz")
    # the json file marks the checkpoint complete, so it is written last and atomically
    tmp = ckpt_dir / f"{stem}.json.tmp"
    with open(tmp, "w") as f:
        json.dump({"step": t.state.step, "batch_log": t.batch_log.digest, **(extra or {})}, f)
    tmp.replace(ckpt_dir / f"{stem}.json")
    return path


def _latest(ckpt_dir: Path | None, prefix: str, limit: int) -> int:
    """Largest checkpoint number <= limit with a complete set of files, else 0."""
    if ckpt_dir is None or not ckpt_dir.is_dir():
        return 0
    best = 0
    for f in ckpt_dir.glob(f"{prefix}_*.json"):
        m = re.fullmatch(rf"{prefix}_(\d+)\.json", f.name)
        if not m:
            continue
        n = int(m.group(1))
        stem = ckpt_dir / f"{prefix}_{n}"
        if n <= limit and stem.with_suffix(".ckpt").exists() and Path(f"{stem}.opt.npz").exists():
            best = max(best, n)
    return best


def _restore(ckpt_dir: Path, stem: str, cfg: TrainConfig) -> tuple[Trainer, dict]:
    params = load_checkpoint(ckpt_dir / f"{stem}.ckpt")
    state = OptimizerState.load(ckpt_dir / f"{stem}.opt.npz")
    with open(ckpt_dir / f"{stem}.json") as f:
        meta = json.load(f)
    t = Trainer(params, cfg, state)
    t.batch_log = BatchLog(meta["batch_log"])
    return t, meta


# --------------------------------------------------------------------- step loop


@dataclass
class StepRunResult:
    params: ModelParams
    checkpoints: list[tuple[int, ModelParams]]
    losses: list[float]
    steps: int
    batch_log: str
    criteria: list[float] = field(default_factory=list)


def _stalled(criteria: Sequence[float], patience: int | None) -> bool:
    """True once the last ``patience`` values failed to beat the best value before them."""
    if patience is None or len(criteria) <= patience:
        return False
    return min(criteria[-patience:]) >= min(criteria[:-patience])


def train_steps(
    params: ModelParams,
    sources: Sequence[DataSource],
    cfg: TrainConfig,
    steps: int,
    seed: int,
    checkpoint_every: int = 100,
    ckpt_dir: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
    criterion: Callable[[ModelParams], float] | None = None,
    patience: int | None = None,
) -> StepRunResult:
    """Train for a fixed number of optimizer steps, checkpointing every ``checkpoint_every``.

    ``criterion`` (lower is better) is evaluated at every checkpoint; training
    stops early once it has not improved for ``patience`` checkpoints. With
    ``ckpt_dir`` the run resumes from the newest complete checkpoint found there.
    """
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    trainer = Trainer(params.copy(), cfg)
    checkpoints: list[tuple[int, ModelParams]] = []
    criteria: list[float] = []
    start = _latest(ckpt_dir, "step", steps)
    if start:
        trainer, _ = _restore(ckpt_dir, f"step_{start}", cfg)
        saved = sorted(int(f.stem.split("_")[1]) for f in ckpt_dir.glob("step_*.ckpt"))
        for n in saved:
            if n > start:
                continue
            checkpoints.append((n, load_checkpoint(ckpt_dir / f"step_{n}.ckpt")))
            with open(ckpt_dir / f"step_{n}.json") as f:
                crit = json.load(f).get("criterion")
            criteria.append(math.nan if crit is None else crit)
        logger.info("resumed at step %d from %s", start, ckpt_dir)
    sizes = [len(s.corpus) for s in sources]
    if steps > 0 and sum(sizes) == 0:
        raise ValueError("no training data")
    losses: list[float] = []
    step, epoch = 0, 0
    stop = criterion is not None and _stalled(criteria, patience)
    while step < steps and not stop:
        for s_idx, indices in epoch_plan(sizes, cfg.batch_size, seed, epoch):
            if step >= steps or stop:
                break
            step += 1
            if step <= start:
                continue
            batch, lams = build_batch(sources[s_idx], indices)
            loss = trainer.step(batch, lams, sources[s_idx].name)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if step % checkpoint_every == 0 or step == steps:
                checkpoints.append((step, trainer.params.copy()))
                crit = criterion(trainer.params) if criterion is not None else math.nan
                criteria.append(crit)
                if ckpt_dir is not None:
                    _save(ckpt_dir, f"step_{step}", trainer,
                          {"criterion": None if math.isnan(crit) else crit})
                if criterion is not None and _stalled(criteria, patience):
                    logger.info("early stop at step %d", step)
                    stop = True
        epoch += 1
    return StepRunResult(trainer.params, checkpoints, losses, trainer.step_count,
                         trainer.batch_log.digest, criteria)


# -------------------------------------------------------------------- epoch loop


@dataclass
class EpochRunResult:
    params: ModelParams
    checkpoints: list[ModelParams]
    criteria: list[float]
    best: int  # index into checkpoints
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    batch_log: str = ""


def train_epochs(
    params: ModelParams,
    sources_for_epoch: Callable[[int], Sequence[DataSource]],
    cfg: TrainConfig,
    epochs: int,
    seed: int,
    criterion: Callable[[ModelParams], float] | None = None,
    patience: int | None = None,
    ckpt_dir: str | Path | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> EpochRunResult:
    """Epoch-based training with one checkpoint per epoch.

    ``sources_for_epoch(i)`` (i is 1-based) gives the data of epoch ``i``.
    ``criterion`` (lower is better) is evaluated after every epoch; training
    stops early once it has not improved for ``patience`` epochs. ``best`` is
    the argmin, later epochs winning ties.
    """
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    trainer = Trainer(params.copy(), cfg)
    checkpoints: list[ModelParams] = []
    criteria: list[float] = []
    losses: list[float] = []
    start = _latest(ckpt_dir, "epoch", epochs)
    if start:
        for i in range(1, start + 1):
            checkpoints.append(load_checkpoint(ckpt_dir / f"epoch_{i}.ckpt"))
            with open(ckpt_dir / f"epoch_{i}.json") as f:
                crit = json.load(f).get("criterion")
            criteria.append(math.nan if crit is None else crit)
        trainer, _ = _restore(ckpt_dir, f"epoch_{start}", cfg)
        logger.info("resumed after epoch %d from %s", start, ckpt_dir)

    for i in range(start + 1, epochs + 1):
        if criterion is not None and _stalled(criteria, patience):
            logger.info("early stop before epoch %d", i)
            break
        sources = list(sources_for_epoch(i))
        sizes = [len(s.corpus) for s in sources]
        for s_idx, indices in epoch_plan(sizes, cfg.batch_size, seed, i):
            batch, lams = build_batch(sources[s_idx], indices)
            loss = trainer.step(batch, lams, sources[s_idx].name)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {i}")
            losses.append(loss)
        checkpoints.append(trainer.params.copy())
        crit = criterion(trainer.params) if criterion is not None else math.nan
        criteria.append(crit)
        if ckpt_dir is not None:
            _save(ckpt_dir, f"epoch_{i}", trainer, {"criterion": None if math.isnan(crit) else crit})
        if on_epoch is not None:
            on_epoch(i, trainer.params)

    best = _argmin_later(criteria) if checkpoints else -1
    final = checkpoints[best] if checkpoints else trainer.params
    return EpochRunResult(final, checkpoints, criteria, best, losses, trainer.step_count,
                          trainer.batch_log.digest)


def _argmin_later(values: Sequence[float]) -> int:
    """Index of the smallest non-NaN value, later on ties; last index if all are NaN."""
    best = None
    for i, v in enumerate(values):
        if not math.isnan(v) and (best is None or v <= values[best]):
            best = i
    return len(values) - 1 if best is None else best
