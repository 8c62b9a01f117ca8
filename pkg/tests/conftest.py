from pathlib import Path

import numpy as np
import pytest
import torch

from guideline_distill.data_synth import generate_dataset, load_dataset
from guideline_distill.guideline_network import GuidelineNetConfig
from guideline_distill.instructions import default_tokenizer, load_registry

TINY_SPLITS = dict(n_train=20, n_val=10, n_test=10)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    generate_dataset(root, seed=3, **TINY_SPLITS)
    return root


@pytest.fixture(scope="session")
def tiny_train(tiny_dataset):
    return load_dataset(tiny_dataset, "train")


@pytest.fixture(scope="session")
def tiny_val(tiny_dataset):
    return load_dataset(tiny_dataset, "val")


@pytest.fixture(scope="session")
def tokenizer():
    return default_tokenizer()


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture
def small_cfg(tokenizer):
    return GuidelineNetConfig(
        encoder_layers=1, encoder_dim=32, encoder_heads=2,
        decoder_layers=2, decoder_dim=32, decoder_heads=2,
        vocab_size=tokenizer.vocab_size,
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def repo_root():
    return Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- acceptance lines

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, passed, detail)`` records one acceptance line and returns ``passed``."""

    def record(n: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[n] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
