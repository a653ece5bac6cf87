import numpy as np
import pytest
import torch

from mdmlab.model import ModelConfig, init_params
from mdmlab.tasks import VOCAB, DatasetSpec, SequenceLayout, generate_dataset

torch.set_default_dtype(torch.float64)


def spread_params(cfg: ModelConfig, seed: int, scale: float = 8.0):
    """Seeded parameters with larger weights than the 0.02 init, so outputs are not near-uniform."""
    p = init_params(cfg, seed)
    g = torch.Generator().manual_seed(10_000 + seed)
    out = {}
    for k, v in p.items():
        if k.endswith((".g",)):
            out[k] = v + 0.1 * torch.randn(v.shape, generator=g)
        elif k.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")) or k == "head.b":
            out[k] = 0.05 * torch.randn(v.shape, generator=g)
        else:
            out[k] = v * scale
    return out


@pytest.fixture
def tiny_layout():
    return SequenceLayout(prompt_len=8, response_len=8)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=len(VOCAB), d_model=16, n_layers=2, n_heads=2, max_len=16)


@pytest.fixture
def tiny_params(tiny_cfg):
    return spread_params(tiny_cfg, 0)


@pytest.fixture(scope="session")
def add_problems():
    return generate_dataset(DatasetSpec(count=400, answer_width=3), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
