"""Reduced ablation experiment used by the acceptance suite.

Four training objectives on the same seeded data and initialisation:
V0 (full invariance term), V1 (purify term only), the isolated corrupt
term, and V3 (predictor + split BN).  Runs regularise the penultimate
layer only with fixed alpha = beta = 1, so the shared-versus-split BN and the
stop-gradient are the only differences between them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attacks import AttackConfig
from .data import Dataset, make_splits
from .losses import LossAssembly
from .nn import Branch
from .trainer import TrainConfig, evaluate, train

DATA = dict(classes=4, train_per_class=100, test_per_class=250, size=12,
            noise=0.15, contrast=0.08, phase_jitter=1.0)
WIDTHS = (8, 16, 32)
EPS = 8 / 255
ARMS = {
    "V0": dict(variant="V0"),
    "V1": dict(variant="V1"),
    "corrupt": dict(variant="V1", term="corrupt"),
    "V3": dict(variant="V3"),
}


def arch() -> nn.Arch:
    return nn.Arch(in_channels=1, image_size=DATA["size"], widths=WIDTHS, num_classes=DATA["classes"])


def splits(seed: int) -> tuple[Dataset, Dataset]:
    return make_splits(seed=seed, **DATA)


def train_config(arm: str, seed: int, epochs: int = 30) -> TrainConfig:
    a = arch()
    loss = LossAssembly(gamma=30.0, capture_tags=(a.penultimate,), **ARMS[arm])
    drops = tuple(sorted({round(epochs * 22 / 30), round(epochs * 27 / 30)} - {epochs}))
    return TrainConfig(
        epochs=epochs, base_lr=0.05, lr_drop_epochs=drops, batch_size=64,
        attack=AttackConfig(epsilon=EPS, step_size=2.5 * EPS / 5, iterations=5, seed=seed),
        eval_attack=AttackConfig(epsilon=EPS, step_size=2 / 255, iterations=20, seed=seed),
        loss=loss, auto_balance=False, seed=seed, eval_every=0,
    )


@dataclass
class ArmResult:
    arm: str
    seed: int
    grad_cosines: list[float]
    bn_variance: dict[tuple[str, str], list[float]]  # (layer, branch) -> per-epoch value
    clean_acc: float
    robust_acc: float
    branch_eval: dict[str, tuple[float, float]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.grad_cosines))


def run_arm(arm: str, seed: int, epochs: int = 30) -> ArmResult:
    start = time.perf_counter()
    cfg = train_config(arm, seed, epochs)
    train_ds, test_ds = splits(seed)
    predictor_tags = list(cfg.loss.tags) if cfg.loss.predictor else []
    model = nn.init_model(arch(), seed, predictor_tags)
    result = train(model, train_ds, cfg, test_ds)
    cosines, bn = [], {}
    for rec in result.history:
        for d in rec.diagnostics:
            if d["instrument"] == "gradient_conflict":
                cosines.append(d["global_cosine"])
            elif d["instrument"] == "bn_stat_variance":
                bn.setdefault((d["layer"], d["branch"]), []).append(d["value"])
    last = result.history[-1]
    out = ArmResult(arm, seed, cosines, bn, last.test_clean_acc, last.test_robust_acc)
    if cfg.loss.split_bn:
        for b in Branch:
            out.branch_eval[b.value] = evaluate(model, test_ds, b, cfg.eval_attack)
    out.seconds = time.perf_counter() - start
    return out


def run_grid(seeds=range(5), arms=tuple(ARMS), epochs: int = 30) -> dict[tuple[str, int], ArmResult]:
    return {(arm, s): run_arm(arm, s, epochs) for s in seeds for arm in arms}
