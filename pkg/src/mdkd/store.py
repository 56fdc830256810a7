"""Persistent top-K teacher distributions for word-level distillation.

File layout (little-endian)::

    "KDST" | u32 version | u32 |V| | u32 K | 8-byte vocab fingerprint | u64 count
    count x ( u64 sentence index | u32 T | T*K x (u32 token id, f32 prob) )

Sentences are written in ascending index order. Probabilities are the
teacher's top-K renormalised to sum to one (before the f32 cast).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ParallelCorpus
from .errors import ConfigError, FingerprintMismatch
from .losses import SoftTargets, topk_extract
from .model import ModelParams, forward_batch, make_batch

MAGIC = b"KDST"
VERSION = 1
_HEAD = struct.Struct("<4sIII8sQ")
_SENT = struct.Struct("<QI")
_RECORD = np.dtype([("id", "<u4"), ("p", "<f4")])


@dataclass
class SoftTargetStore:
    vocab_size: int
    k: int
    fingerprint: bytes
    teacher_tag: str = ""
    entries: dict[int, SoftTargets] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> SoftTargets:
        return self.entries[i]

    def __contains__(self, i: int) -> bool:
        return i in self.entries

    def check_vocab(self, fingerprint: bytes, vocab_size: int | None = None) -> None:
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"store {self.teacher_tag!r} was built for vocabulary {self.fingerprint.hex()}, "
                f"expected {fingerprint.hex()}"
            )
        if vocab_size is not None and vocab_size != self.vocab_size:
            raise FingerprintMismatch(f"store has |V|={self.vocab_size}, expected {vocab_size}")


def build_soft_target_store(
    teacher: ModelParams,
    d: ParallelCorpus,
    k: int,
    fingerprint: bytes,
    teacher_tag: str = "",
    batch_size: int = 64,
) -> SoftTargetStore:
    """Teacher-forced forward over every pair of ``d``; keep the top-K of each position."""
    V = teacher.cfg.vocab_size
    if not 1 <= k <= V:
        raise ConfigError(f"K must be in [1, {V}], got {k}")
    store = SoftTargetStore(V, k, fingerprint, teacher_tag)
    for start in range(0, len(d), batch_size):
        chunk = d.pairs[start:start + batch_size]
        batch = make_batch([p.source for p in chunk], [p.target for p in chunk])
        probs = np.exp(forward_batch(teacher, batch))
        for j in range(len(chunk)):
            ids, ps = topk_extract(probs[j, :batch.lengths[j]], k)
            store.entries[start + j] = SoftTargets(ids, ps)
    return store


def write_store(store: SoftTargetStore, path: str | Path) -> None:
    if len(store.fingerprint) != 8:
        raise ConfigError("vocabulary fingerprint must be 8 bytes")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, store.vocab_size, store.k, store.fingerprint, len(store)))
        for idx in sorted(store.entries):
            st = store.entries[idx]
            if st.k != store.k:
                raise ConfigError(f"sentence {idx} has K={st.k}, store has K={store.k}")
            rec = np.empty(st.ids.size, dtype=_RECORD)
            rec["id"] = st.ids.ravel()
            rec["p"] = st.probs.ravel()
            f.write(_SENT.pack(idx, len(st)))
            f.write(rec.tobytes())


def read_store(
    path: str | Path,
    expected_fingerprint: bytes | None = None,
    teacher_tag: str = "",
) -> SoftTargetStore:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ConfigError(f"{path}: truncated soft-target store")
    magic, version, V, K, fp, count = _HEAD.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ConfigError(f"{path}: not a soft-target store (magic/version)")
    store = SoftTargetStore(V, K, fp, teacher_tag)
    if expected_fingerprint is not None:
        store.check_vocab(expected_fingerprint)
    off = _HEAD.size
    for _ in range(count):
        if off + _SENT.size > len(data):
            raise ConfigError(f"{path}: truncated soft-target store")
        idx, T = _SENT.unpack_from(data, off)
        off += _SENT.size
        n = T * K
        if off + n * _RECORD.itemsize > len(data):
            raise ConfigError(f"{path}: truncated soft-target store")
        rec = np.frombuffer(data, dtype=_RECORD, count=n, offset=off)
        off += n * _RECORD.itemsize
        ids = rec["id"].astype(np.intp).reshape(T, K)
        if n and ids.max() >= V:
            raise ConfigError(f"{path}: token id out of range in sentence {idx}")
        probs = rec["p"].astype(np.float64).reshape(T, K)
        if n and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
            raise ConfigError(f"{path}: probabilities of sentence {idx} do not sum to one")
        store.entries[idx] = SoftTargets(ids, probs)
    if off != len(data):
        raise ConfigError(f"{path}: trailing bytes after {count} sentences")
    return store
