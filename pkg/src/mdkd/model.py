"""A small tanh RNN encoder-decoder trained with hand-written backpropagation.

    encoder   h_t = tanh(W_hh^enc h_{t-1} + W_hx^enc x_t + b_h^enc),  h_0 = 0
    decoder   s_0 = h_{L_x},  s_t = tanh(W_hh^dec s_{t-1} + W_hx^dec y_{t-1} + b_h^dec)
    output    p_t = softmax(W_hy s_t + b_y)

During training the decoder is teacher-forced. All parameters live in one flat
float64 vector; the named matrices are views into it, so a single index space
covers every scalar (used by gradient checks, Adam and checkpoint averaging).

Work is batched over padded sentences. Sources are right-padded and the
encoder state is frozen past each sentence's end, so padding never changes a
sentence's result. Padded target positions get zero loss weight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BOS, EOS, PAD
from .errors import ConfigError, DivergenceError
from .losses import LossConfig, SoftTargets, _gold, target_weights

PARAM_NAMES = (
    "src_emb", "tgt_emb",
    "enc_Whh", "enc_Whx", "enc_b",
    "dec_Whh", "dec_Whx", "dec_b",
    "Why", "by",
)

CKPT_MAGIC = b"MDKDCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 32
    max_decode_len: int = 50
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) < 1:
            raise ConfigError("vocab_size, embed_dim and hidden_dim must be >= 1")
        if self.max_decode_len < 2:
            raise ConfigError("max_decode_len must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, E, H = self.vocab_size, self.embed_dim, self.hidden_dim
        return {
            "src_emb": (V, E), "tgt_emb": (V, E),
            "enc_Whh": (H, H), "enc_Whx": (H, E), "enc_b": (H,),
            "dec_Whh": (H, H), "dec_Whx": (H, E), "dec_b": (H,),
            "Why": (V, H), "by": (V,),
        }

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


class ModelParams:
    """Flat parameter vector plus named matrix views (``p.enc_Whh`` ...)."""

    def __init__(self, cfg: ModelConfig, flat: np.ndarray | None = None):
        n = cfg.num_params()
        if flat is None:
            flat = np.zeros(n)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {flat.shape}")
        self.cfg = cfg
        self.flat = flat
        self._views = {}
        off = 0
        for name, shape in cfg.shapes().items():
            size = int(np.prod(shape))
            self._views[name] = flat[off:off + size].reshape(shape)
            off += size

    def __getattr__(self, name: str) -> np.ndarray:
        views = self.__dict__.get("_views")
        if views is not None and name in views:
            return views[name]
        raise AttributeError(name)

    def __len__(self) -> int:
        return len(self.flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.flat.copy())

    def named(self) -> dict[str, np.ndarray]:
        return dict(self._views)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())


def init_model(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    return ModelParams(cfg, rng.uniform(-0.1, 0.1, cfg.num_params()))


# ----------------------------------------------------------------------- batching


@dataclass
class Batch:
    src: np.ndarray  # (B, Ls) ids, PAD-padded
    src_mask: np.ndarray  # (B, Ls) 1.0 on real tokens
    tgt_in: np.ndarray  # (B, Lt) decoder inputs: BOS y_1 .. y_{n}
    tgt_out: np.ndarray  # (B, Lt) gold outputs: y_1 .. y_n EOS
    out_mask: np.ndarray  # (B, Lt)
    lengths: np.ndarray  # (B,) number of output positions per sentence
    soft: list[SoftTargets | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.src)


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.intp)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def make_batch(
    srcs: Sequence[Sequence[int]],
    tgts: Sequence[Sequence[int]],
    soft: Sequence[SoftTargets | None] | None = None,
) -> Batch:
    if not srcs or len(srcs) != len(tgts):
        raise ValueError("need equally many (>= 1) sources and targets")
    if any(len(s) == 0 for s in srcs):
        raise ValueError("empty source sentence")
    for t in tgts:
        if len(t) < 2 or t[0] != BOS:
            raise ValueError("targets must start with BOS and have at least one output token")
    src, src_mask = _pad(srcs)
    tgt_in, _ = _pad([t[:-1] for t in tgts])
    tgt_out, out_mask = _pad([t[1:] for t in tgts])
    lengths = np.array([len(t) - 1 for t in tgts])
    soft = list(soft) if soft is not None else [None] * len(srcs)
    return Batch(src, src_mask, tgt_in, tgt_out, out_mask, lengths, soft)


# ------------------------------------------------------------------------ forward


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encode_batch(p: ModelParams, src: np.ndarray, src_mask: np.ndarray):
    B, L = src.shape
    xin = p.src_emb[src] @ p.enc_Whx.T + p.enc_b  # (B, L, H)
    h = np.zeros((B, p.cfg.hidden_dim))
    hs, hns = [h], []
    for t in range(L):
        hn = np.tanh(h @ p.enc_Whh.T + xin[:, t])
        m = src_mask[:, t, None]
        h = m * hn + (1.0 - m) * h
        hs.append(h)
        hns.append(hn)
    return hs, hns


def _dec_step(p: ModelParams, s: np.ndarray, y_prev: np.ndarray) -> np.ndarray:
    return np.tanh(s @ p.dec_Whh.T + p.tgt_emb[y_prev] @ p.dec_Whx.T + p.dec_b)


def forward_batch(p: ModelParams, batch: Batch, keep: bool = False):
    """Teacher-forced log-probabilities, shape (B, Lt, |V|).

    With ``keep`` the intermediate states needed by :func:`backward_batch` are
    returned as well.
    """
    hs, hns = _encode_batch(p, batch.src, batch.src_mask)
    yin = p.tgt_emb[batch.tgt_in] @ p.dec_Whx.T + p.dec_b  # (B, Lt, H)
    s = hs[-1]
    ss = [s]
    for t in range(batch.tgt_in.shape[1]):
        s = np.tanh(s @ p.dec_Whh.T + yin[:, t])
        ss.append(s)
    S = np.stack(ss[1:], axis=1)  # (B, Lt, H)
    logp = _log_softmax(S @ p.Why.T + p.by)
    if keep:
        return logp, (hs, hns, ss, S)
    return logp


def encode(p: ModelParams, src: Sequence[int]) -> np.ndarray:
    """Encoder states h_1 .. h_{L_x} for one sentence, shape (L_x, H)."""
    if len(src) == 0:
        raise ValueError("empty source")
    src_ids, mask = _pad([src])
    hs, _ = _encode_batch(p, src_ids, mask)
    return np.stack([h[0] for h in hs[1:]])


def forward(p: ModelParams, src: Sequence[int], tgt: Sequence[int]) -> np.ndarray:
    """Per-position output distributions (len(tgt)-1, |V|) under teacher forcing."""
    return np.exp(forward_batch(p, make_batch([src], [tgt]))[0])


def ensemble_forward(models: Sequence[ModelParams], src, tgt) -> np.ndarray:
    if not models:
        raise ValueError("empty ensemble")
    dists = [forward(m, src, tgt) for m in models]
    return np.sum(dists, axis=0) / len(dists)


# ----------------------------------------------------------------------- backward


def batch_weights(batch: Batch, vocab_size: int, lam: float | Sequence[float], eps: float) -> np.ndarray:
    """Dense loss-target weights (B, Lt, |V|); zero rows on padding."""
    B, Lt = batch.tgt_out.shape
    lams = [lam] * B if np.isscalar(lam) else list(lam)
    W = np.zeros((B, Lt, vocab_size))
    for i in range(B):
        n = batch.lengths[i]
        W[i, :n] = target_weights(batch.tgt_out[i, :n], vocab_size, lams[i], eps, batch.soft[i])
    return W


def backward_batch(p: ModelParams, batch: Batch, W: np.ndarray) -> tuple[ModelParams, float]:
    """Gradient and value of ``-sum W * log p`` summed over the batch."""
    logp, (hs, hns, ss, S) = forward_batch(p, batch, keep=True)
    loss = float(-(W * logp).sum())
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = ModelParams(p.cfg)
    B, Lt = batch.tgt_in.shape
    H = p.cfg.hidden_dim

    # d loss / d logits = p * sum_k W - W
    dz = np.exp(logp) * W.sum(axis=-1, keepdims=True) - W
    g.Why[...] = np.einsum("btv,bth->vh", dz, S)
    g.by[...] = dz.sum(axis=(0, 1))
    dS = dz @ p.Why  # (B, Lt, H)

    dWhh = np.zeros((H, H))
    da_all = np.empty((B, Lt, H))
    ds = np.zeros((B, H))
    for t in range(Lt - 1, -1, -1):
        s = ss[t + 1]
        da = (dS[:, t] + ds) * (1.0 - s * s)
        dWhh += da.T @ ss[t]
        da_all[:, t] = da
        ds = da @ p.dec_Whh
    g.dec_Whh[...] = dWhh
    g.dec_b[...] = da_all.sum(axis=(0, 1))
    g.dec_Whx[...] = np.einsum("bth,bte->he", da_all, p.tgt_emb[batch.tgt_in])
    np.add.at(g.tgt_emb, batch.tgt_in.ravel(), (da_all @ p.dec_Whx).reshape(-1, p.cfg.embed_dim))

    Ls = batch.src.shape[1]
    dh = ds
    dWhh = np.zeros((H, H))
    dx_all = np.empty((B, Ls, H))
    for t in range(Ls - 1, -1, -1):
        m = batch.src_mask[:, t, None]
        hn = hns[t]
        da = m * dh * (1.0 - hn * hn)
        dWhh += da.T @ hs[t]
        dx_all[:, t] = da
        dh = (1.0 - m) * dh + da @ p.enc_Whh
    g.enc_Whh[...] = dWhh
    g.enc_b[...] = dx_all.sum(axis=(0, 1))
    g.enc_Whx[...] = np.einsum("bth,bte->he", dx_all, p.src_emb[batch.src])
    np.add.at(g.src_emb, batch.src.ravel(), (dx_all @ p.enc_Whx).reshape(-1, p.cfg.embed_dim))
    return g, loss


def backward(
    p: ModelParams,
    src: Sequence[int],
    tgt: Sequence[int],
    loss_cfg: LossConfig,
    soft_targets: SoftTargets | None = None,
) -> tuple[ModelParams, float]:
    """Gradient of the mixed NLL / teacher-matching loss for one sentence pair."""
    batch = make_batch([src], [tgt], [soft_targets])
    W = batch_weights(batch, p.cfg.vocab_size, loss_cfg.lam, loss_cfg.label_smoothing_eps)
    return backward_batch(p, batch, W)


def sentence_loss(p: ModelParams, src, tgt, loss_cfg: LossConfig, soft_targets: SoftTargets | None = None) -> float:
    """Loss value only; the scalar function that :func:`backward` differentiates."""
    logp = forward_batch(p, make_batch([src], [tgt]))[0]
    gold = _gold(tgt, len(logp))
    W = target_weights(gold, p.cfg.vocab_size, loss_cfg.lam, loss_cfg.label_smoothing_eps, soft_targets)
    return float(-(W * logp).sum())


# ----------------------------------------------------------------------- decoding


def greedy_decode_batch(
    models: Sequence[ModelParams], srcs: Sequence[Sequence[int]], max_len: int
) -> list[list[int]]:
    """Greedy decoding from the mean distribution of ``models`` (one model = plain greedy).

    Each step takes the argmax (ties -> lowest id); a sentence stops after
    emitting EOS or ``max_len`` tokens. EOS is included in the output.
    """
    if not models:
        raise ValueError("no models")
    src, mask = _pad(srcs)
    B = len(srcs)
    states = [_encode_batch(m, src, mask)[0][-1] for m in models]
    prev = np.full(B, BOS, dtype=np.intp)
    out: list[list[int]] = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        probs = np.zeros((B, models[0].cfg.vocab_size))
        for j, m in enumerate(models):
            states[j] = _dec_step(m, states[j], prev)
            probs += np.exp(_log_softmax(states[j] @ m.Why.T + m.by))
        probs /= len(models)
        nxt = probs.argmax(axis=1)
        for i in np.flatnonzero(alive):
            out[i].append(int(nxt[i]))
        alive &= nxt != EOS
        if not alive.any():
            break
        prev = nxt
    return out


def greedy_decode(p: ModelParams, src: Sequence[int], max_len: int | None = None) -> list[int]:
    if len(src) == 0:
        raise ValueError("empty source")
    return greedy_decode_batch([p], [src], max_len or p.cfg.max_decode_len)[0]


# ---------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), **kw)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(f, m=self.m, v=self.v,
                     meta=np.array([self.step, self.beta1, self.beta2, self.eps]))

    @classmethod
    def load(cls, path: str | Path) -> "OptimizerState":
        with np.load(path) as z:
            step, b1, b2, eps = z["meta"]
            return cls(z["m"].copy(), z["v"].copy(), int(step), float(b1), float(b2), float(eps))


def adam_step(
    p: ModelParams, g: ModelParams, o: OptimizerState, lr: float
) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam; returns new params and state, inputs untouched."""
    if g.flat.shape != p.flat.shape or o.m.shape != p.flat.shape:
        raise ValueError("parameter, gradient and optimizer shapes differ")
    if not np.isfinite(g.flat).all():
        raise DivergenceError("non-finite gradient")
    step = o.step + 1
    m = o.beta1 * o.m + (1.0 - o.beta1) * g.flat
    v = o.beta2 * o.v + (1.0 - o.beta2) * g.flat * g.flat
    m_hat = m / (1.0 - o.beta1 ** step)
    v_hat = v / (1.0 - o.beta2 ** step)
    new = ModelParams(p.cfg, p.flat - lr * m_hat / (np.sqrt(v_hat) + o.eps))
    if not new.is_finite():
        raise DivergenceError("parameters became non-finite")
    return new, OptimizerState(m, v, step, o.beta1, o.beta2, o.eps)


def noam_lr(step: int, warmup: int, model_dim: int, scale: float = 2.0) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# -------------------------------------------------------------------- checkpoints


def average_checkpoints(ckpts: Sequence[ModelParams]) -> ModelParams:
    """Coordinate-wise mean.

    Values are sorted per coordinate before summing, so the result does not
    depend on the order of ``ckpts`` down to the last bit.
    """
    if not ckpts:
        raise ValueError("nothing to average")
    cfg = ckpts[0].cfg
    if any(c.flat.shape != ckpts[0].flat.shape for c in ckpts):
        raise ValueError("checkpoint shapes differ")
    if any(c.cfg.shapes() != cfg.shapes() for c in ckpts):
        raise ValueError("checkpoint layouts differ")
    stacked = np.sort(np.stack([c.flat for c in ckpts]), axis=0)
    return ModelParams(cfg, stacked.sum(axis=0) / len(ckpts))


_CKPT_HEAD = struct.Struct("<8sI5Q")


def save_checkpoint(p: ModelParams, path: str | Path) -> None:
    """Binary checkpoint: magic, u32 version, five u64 config fields
    (vocab_size, embed_dim, hidden_dim, max_decode_len, seed), u64 parameter
    count, then every matrix of ``PARAM_NAMES`` in order, row-major, as
    little-endian float64.
    """
    c = p.cfg
    with open(path, "wb") as f:
        f.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, c.vocab_size, c.embed_dim,
                                c.hidden_dim, c.max_decode_len, c.seed))
        f.write(struct.pack("<Q", len(p.flat)))
        f.write(p.flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size + 8:
        raise ConfigError(f"{path}: truncated checkpoint")
    magic, version, V, E, H, L, seed = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ConfigError(f"{path}: not a checkpoint (magic/version)")
    (n,) = struct.unpack_from("<Q", data, _CKPT_HEAD.size)
    cfg = ModelConfig(V, E, H, L, seed)
    body = data[_CKPT_HEAD.size + 8:]
    if n != cfg.num_params() or len(body) != 8 * n:
        raise ConfigError(f"{path}: parameter count does not match its config")
    return ModelParams(cfg, np.frombuffer(body, dtype="<f8").astype(np.float64))
