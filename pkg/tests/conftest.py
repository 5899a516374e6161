import numpy as np
import pytest

from disvae.model import ModelConfig

ACCEPTANCE_RESULTS: list[str] = []


def tiny_config(**overrides) -> ModelConfig:
    """Full topology, very narrow layers: fast enough for per-test forward passes."""
    base = dict(conv_channels=12, enc_lstm_hidden=6, enc_fc=16, dec_fc=16, dec_seq_width=8,
                dec_lstm1_hidden=10, dec_lstm2_hidden=12, postnet_channels=12)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. every entry of arr (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
