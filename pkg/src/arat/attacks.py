"""FGSM and PGD under L-inf or L2 budgets.

Attacks read BatchNorm running statistics (eval mode) and never modify the
model.  Randomness comes only from the call's own generator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .losses import cross_entropy
from .nn import Branch, Mode, Model

NORMS = ("Linf", "L2")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "Linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    random_init: bool = True
    loss_kind: str = "CrossEntropy"
    branch: Branch = Branch.MAIN
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise AttackError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.epsilon < 0:
            raise AttackError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 0:
            raise AttackError(f"iterations must be non-negative, got {self.iterations}")
        if self.iterations > 0 and self.step_size <= 0:
            raise AttackError("step_size must be positive when iterations > 0")
        if self.loss_kind != "CrossEntropy":
            raise AttackError(f"unsupported attack loss {self.loss_kind!r}")
        object.__setattr__(self, "branch", Branch(self.branch))


def _per_sample_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (a.ndim - 1))


def project(delta, epsilon: float, norm: str = "Linf") -> np.ndarray:
    """Project each sample's perturbation onto the epsilon ball."""
    if epsilon < 0:
        raise AttackError(f"epsilon must be non-negative, got {epsilon}")
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "Linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "L2":
        if delta.ndim == 1:
            return project(delta[None], epsilon, norm)[0]
        n = _per_sample_norm(delta)
        scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        return delta * scale
    raise AttackError(f"unknown norm {norm!r}")


def _random_start(shape, epsilon: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    if norm == "Linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    d = int(np.prod(shape[1:]))
    g = rng.standard_normal(shape)
    g /= np.maximum(_per_sample_norm(g), 1e-30)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(shape[0],)) ** (1.0 / d)
    return g * radius.reshape((-1,) + (1,) * (len(shape) - 1))


def input_gradient(model: Model, x: np.ndarray, y, branch: Branch) -> np.ndarray:
    """d CE(f(x), y) / dx with frozen (eval) BatchNorm statistics."""
    xin = T.Tensor(x, requires_grad=True)
    with T.Tape(watch=[xin]) as tape:
        logits, _ = nn.forward(model, xin, branch, Mode.EVAL)
        loss = cross_entropy(logits, y)
    return tape.gradient(loss, [xin])[0]


def pgd(model: Model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected gradient ascent on cross-entropy; returns x' clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim < 1 or x.shape[0] == 0:
        raise AttackError("pgd: empty batch")
    if y.shape != (x.shape[0],):
        raise AttackError(f"pgd: labels shape {y.shape} does not match batch of {x.shape[0]}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    eps = cfg.epsilon
    x_adv = x.copy()
    if cfg.random_init and cfg.iterations > 0:
        delta = project(_random_start(x.shape, eps, cfg.norm, rng), eps, cfg.norm)
        x_adv = np.clip(x + delta, 0.0, 1.0)
    for _ in range(cfg.iterations):
        g = input_gradient(model, x_adv, y, cfg.branch)
        if cfg.norm == "Linf":
            step = cfg.step_size * np.sign(g)
        else:
            step = cfg.step_size * g / np.maximum(_per_sample_norm(g), 1e-12)
        delta = project(x_adv + step - x, eps, cfg.norm)
        x_adv = np.clip(x + delta, 0.0, 1.0)
    return x_adv


def fgsm(model: Model, x, y, epsilon: float, branch: Branch = Branch.MAIN) -> np.ndarray:
    cfg = AttackConfig(
        norm="Linf", epsilon=epsilon, step_size=epsilon if epsilon > 0 else 1.0,
        iterations=1, random_init=False, branch=branch,
    )
    return pgd(model, x, y, cfg)


def with_branch(cfg: AttackConfig, branch: Branch) -> AttackConfig:
    return replace(cfg, branch=Branch(branch))
