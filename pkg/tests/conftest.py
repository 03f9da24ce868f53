import numpy as np
import pytest

from arat import nn
from arat.attacks import AttackConfig
from arat.data import make_splits
from arat.losses import LossAssembly
from arat.nn import Arch
from arat.trainer import TrainConfig, train

TINY = Arch(in_channels=1, image_size=8, widths=(4, 8), blocks_per_stage=1, num_classes=3)


def tiny_splits(seed=0):
    return make_splits(classes=3, train_per_class=40, test_per_class=20, size=8, seed=seed, noise=0.1)


def tiny_config(**kw):
    base = dict(
        epochs=2, base_lr=0.05, lr_drop_epochs=(), batch_size=32,
        attack=AttackConfig(epsilon=8 / 255, step_size=4 / 255, iterations=2),
        eval_attack=AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=3),
        loss=LossAssembly("V3", capture_tags=(TINY.penultimate,), gamma=5.0),
        eval_every=1, probe_size=16,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def trained_tiny():
    """A briefly adversarially trained tiny V3 model with its data splits."""
    train_ds, test_ds = tiny_splits()
    cfg = tiny_config(epochs=4, diagnostics=False, eval_every=0)
    model = nn.init_model(TINY, 0, [TINY.penultimate])
    result = train(model, train_ds, cfg, test_ds)
    return result.model, train_ds, test_ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record and print one PASS/FAIL line, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
