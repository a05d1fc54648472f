import numpy as np
import pytest
import torch

from vstain.encoders import AttnEncoderConfig, ConvEncoderConfig
from vstain.implicit_head import ModelConfig


def small_model_config(**kw):
    base = dict(
        conv=ConvEncoderConfig(num_layers=2, base_channels=4, output_channels=4),
        attn=AttnEncoderConfig(num_heads=2, depth=2, embed_dim=8, window_size=4, output_channels=4),
        pos_dim=4,
        hidden=[16, 16],
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def desk_model_config(**kw):
    """Sixteen-channel backbones, depth-2 attention: the desk-scale learning setup."""
    base = dict(
        conv=ConvEncoderConfig(num_layers=4, base_channels=16, output_channels=16),
        attn=AttnEncoderConfig(num_heads=4, depth=2, embed_dim=32, window_size=8, output_channels=16),
        pos_dim=16,
        hidden=[128, 128, 128],
    )
    base.update(kw)
    return ModelConfig(**base)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record ``(passed, detail)`` per criterion number; printed at the end of the run."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
