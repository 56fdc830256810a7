import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mdkd.model import ModelConfig, ModelParams, init_model

settings.register_profile(
    "default", max_examples=60, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_model(vocab_size=6, embed_dim=3, hidden_dim=4, seed=0, scale=0.5) -> ModelParams:
    """Random model with weights large enough that gradients are not vanishingly small."""
    cfg = ModelConfig(vocab_size, embed_dim, hidden_dim, max_decode_len=8, seed=seed)
    p = init_model(cfg)
    p.flat[:] = np.random.default_rng(seed + 1000).uniform(-scale, scale, len(p))
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
