"""Shared oracles for the test suite."""

import numpy as np

from mdkd.corpus import BOS, EOS
from mdkd.losses import LossConfig, soft_targets_from
from mdkd.model import ModelConfig, ModelParams, backward, sentence_loss


def random_case(rng: np.random.Generator):
    """A random tiny model (|V| <= 8, dims <= 6) with one pair of at most 5 tokens per side."""
    V = int(rng.integers(5, 9))
    cfg = ModelConfig(V, int(rng.integers(1, 7)), int(rng.integers(1, 7)), 8, int(rng.integers(0, 1000)))
    p = ModelParams(cfg, rng.uniform(-0.8, 0.8, cfg.num_params()))
    ls, lt = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    src = list(rng.integers(3, V, ls - 1)) + [EOS]
    tgt = [BOS] + list(rng.integers(3, V, lt - 1)) + [EOS]
    K = int(rng.integers(1, V + 1))
    teacher = rng.gamma(1.0, size=(lt, V)) + 1e-3
    soft = soft_targets_from(teacher / teacher.sum(axis=1, keepdims=True), K)
    return p, src, tgt, soft


def numeric_gradient(p: ModelParams, src, tgt, cfg: LossConfig, soft, h: float = 1e-4) -> np.ndarray:
    q = p.copy()
    out = np.empty(len(p))
    for i in range(len(p)):
        x = q.flat[i]
        q.flat[i] = x + h
        up = sentence_loss(q, src, tgt, cfg, soft)
        q.flat[i] = x - h
        down = sentence_loss(q, src, tgt, cfg, soft)
        q.flat[i] = x
        out[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); coordinates where both are exactly zero count as 0.

    Central differences with h = 1e-4 carry ~1e-11 of round-off on losses of
    order 1-10, so relative error is meaningless for gradients much below
    1e-7; the floor keeps such coordinates from dominating.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.where(diff == 0, 0.0, diff / scale)


def gradient_check(p, src, tgt, lam, eps, soft, h=1e-4) -> float:
    cfg = LossConfig(lam=lam, label_smoothing_eps=eps)
    g, _ = backward(p, src, tgt, cfg, soft if lam > 0 else None)
    n = numeric_gradient(p, src, tgt, cfg, soft if lam > 0 else None, h)
    return float(relative_error(g.flat, n).max())


SMALL_TRAIN = {
    "batch_size": 16, "warmup": 20, "generic_steps": 60, "checkpoint_every": 20, "average_last": 2,
    "generic_patience": 3, "teacher_epochs": 2, "teacher_patience": 2,
    "student_epochs": 2, "student_patience": 2, "generic_subset_fraction": 0.2,
}


def small_task(out_dir, seed: int = 0, n_domains: int = 2, **train) -> dict:
    """Write a tiny synthetic task under ``out_dir`` and return a fast config dict."""
    from mdkd.synthetic import SyntheticSpec, domain_tags, write_task

    spec = SyntheticSpec(n_domains=n_domains, train_per_domain=40, generic_train=120,
                         dev_size=10, test_size=12, seed=seed)
    paths = write_task(spec, out_dir)
    return {
        "seed": seed,
        "data": {"generic": paths["generic"],
                 "domains": [{"tag": t, **paths[t]} for t in domain_tags(n_domains)]},
        "model": {"embed_dim": 8, "hidden_dim": 8, "max_decode_len": 8},
        "loss": {"top_k": 4},
        "selection": {"lm_order": 2},
        "train": SMALL_TRAIN | train,
    }


# criterion number -> (title, passed, detail); printed by the terminal-summary hook in conftest
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def verdict(n: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[n] = (title, bool(ok), detail)
    assert ok, f"criterion {n} ({title}) failed: {detail}"
