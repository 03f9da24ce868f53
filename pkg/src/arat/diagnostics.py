"""Measurement instruments: gradient conflict, feature distances, BN-statistics variance.

Every instrument can be serialised with :func:`record` as one JSON-lines
object ``{"epoch", "instrument", "layer"?, "branch"?, ...values}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .attacks import AttackConfig, pgd, with_branch
from .data import Dataset, iterate_batches
from .losses import LossAssembly, compute_loss
from .nn import Branch, Mode, Model


class DiagnosticsError(ValueError):
    pass


@dataclass
class GradientPair:
    grad_cls: dict[str, np.ndarray]
    grad_inv: dict[str, np.ndarray]

    def __post_init__(self):
        if set(self.grad_cls) != set(self.grad_inv):
            raise DiagnosticsError("gradient maps cover different parameter sets")
        if not self.grad_cls:
            raise DiagnosticsError("empty gradient maps")


@dataclass
class ConflictReport:
    global_cosine: float
    conflict_fraction: float
    per_parameter: dict[str, float | None] = field(default_factory=dict)
    counted: int = 0

    def as_dict(self) -> dict:
        return {
            "global_cosine": self.global_cosine,
            "conflict_fraction": self.conflict_fraction,
            "counted": self.counted,
            "per_parameter": self.per_parameter,
        }


def _cos(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = float(np.sqrt(np.dot(a, a))), float(np.sqrt(np.dot(b, b)))
    if na == 0 or nb == 0:
        return None
    return float(np.dot(a, b)) / (na * nb)


def conflict_report(pair: GradientPair, granularity: str = "tensor") -> ConflictReport:
    """Cosine between classification and invariance gradients plus the conflicting share.

    ``granularity="tensor"`` counts parameter tensors whose two gradients have
    a negative dot product; ``"scalar"`` counts individual coordinates.
    Tensors (or coordinates) where either gradient is zero are left out.
    """
    if granularity not in ("tensor", "scalar"):
        raise DiagnosticsError(f"unknown granularity {granularity!r}")
    names = list(pair.grad_cls)
    per: dict[str, float | None] = {}
    conflicts = counted = 0
    flat_a, flat_b = [], []
    for name in names:
        a = np.asarray(pair.grad_cls[name], dtype=np.float64).reshape(-1)
        b = np.asarray(pair.grad_inv[name], dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise DiagnosticsError(f"shape mismatch for {name}: {a.shape} vs {b.shape}")
        flat_a.append(a)
        flat_b.append(b)
        per[name] = _cos(a, b)
        if granularity == "tensor":
            if per[name] is not None:
                counted += 1
                conflicts += float(np.dot(a, b)) < 0
        else:
            prod = a * b
            live = (a != 0) & (b != 0)
            counted += int(live.sum())
            conflicts += int((prod[live] < 0).sum())
    g = _cos(np.concatenate(flat_a), np.concatenate(flat_b))
    return ConflictReport(
        global_cosine=0.0 if g is None else g,
        conflict_fraction=conflicts / counted if counted else 0.0,
        per_parameter=per,
        counted=counted,
    )


def gradient_pair(model: Model, forwards, tape: T.Tape,
                  params: Mapping[str, T.Tensor] | None = None) -> GradientPair:
    """Split gradients of a recorded loss into classification and (gamma-free) invariance parts."""
    params = model.backbone_parameters() if params is None else params
    br = forwards.breakdown
    names, tensors = list(params), list(params.values())
    g_cls = tape.gradient(br.classification, tensors)
    g_inv = tape.gradient(br.invariance, tensors)
    return GradientPair(dict(zip(names, g_cls)), dict(zip(names, g_inv)))


def measure_conflict(model: Model, x, x_adv, y, assembly: LossAssembly,
                     granularity: str = "tensor") -> ConflictReport:
    """Conflict meter on a frozen model (train-mode forwards on a copy; the model is untouched)."""
    probe = model.copy()
    with T.Tape() as tape:
        fw = compute_loss(probe, x, x_adv, y, assembly, Mode.TRAIN)
    pair = gradient_pair(probe, fw, tape)
    return conflict_report(pair, granularity)


def loss_gradient_norm(grads: Mapping[str, np.ndarray] | GradientPair) -> float:
    """Global L2 norm over the flattened gradient map (classification + invariance for a pair)."""
    if isinstance(grads, GradientPair):
        grads = {k: grads.grad_cls[k] + grads.grad_inv[k] for k in grads.grad_cls}
    total = 0.0
    for g in grads.values():
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        total += float(np.dot(g, g))
    return math.sqrt(total)


def penultimate_pair(model: Model, x, y, attack: AttackConfig, clean_branch: Branch = Branch.MAIN,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode penultimate representations of clean x (on ``clean_branch``) and x' (on main)."""
    tag = model.arch.penultimate
    x_adv = pgd(model, x, y, with_branch(attack, Branch.MAIN), rng)
    _, clean = nn.forward(model, x, clean_branch, Mode.EVAL, [tag])
    _, adv = nn.forward(model, x_adv, Branch.MAIN, Mode.EVAL, [tag])
    return clean[tag].data, adv[tag].data


def feature_distance(model: Model, x, y, attack: AttackConfig, clean_branch: Branch = Branch.MAIN,
                     rng: np.random.Generator | None = None) -> float:
    """Batch mean of ||z - z'||_2 at the penultimate layer."""
    z, z_adv = penultimate_pair(model, x, y, attack, clean_branch, rng)
    return float(np.mean(np.sqrt(((z - z_adv) ** 2).sum(axis=1))))


def _row_cosines(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.sqrt((u * u).sum(axis=1))
    nv = np.sqrt((v * v).sum(axis=1))
    denom = nu * nv
    # a zero row has no direction; count it as orthogonal
    return np.where(denom > 0, (u * v).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)


def representation_similarity(model: Model, ds: Dataset, attack: AttackConfig,
                              batch_size: int = 128, clean_branch: Branch = Branch.MAIN) -> float:
    """Mean cosine similarity between clean and adversarial penultimate features over ``ds``."""
    sims = []
    for b, (_, x, y) in enumerate(iterate_batches(ds, batch_size, shuffle=False)):
        rng = np.random.default_rng([attack.seed, b])
        z, z_adv = penultimate_pair(model, x, y, attack, clean_branch, rng)
        sims.append(_row_cosines(z, z_adv))
    return float(np.mean(np.concatenate(sims)))


def representation_drift(z_t: np.ndarray, z_next: np.ndarray) -> float:
    """Mean cosine distance between matched rows of two captures of the same probe batch."""
    z_t, z_next = np.asarray(z_t), np.asarray(z_next)
    if z_t.shape != z_next.shape:
        raise DiagnosticsError(f"row mismatch: {z_t.shape} vs {z_next.shape}")
    return float(np.mean(1.0 - _row_cosines(z_t, z_next)))


def bn_stat_variance(history: Sequence, mode: str = "channels") -> list[float]:
    """Per-epoch variance of a BN layer's running-mean vector.

    ``history[t]`` holds one or more running-mean snapshots taken during epoch
    ``t``.  ``"channels"`` is the population variance across channels
    (averaged over the epoch's snapshots); ``"temporal"`` is the variance of
    each channel across the epoch's snapshots, averaged over channels.
    """
    out = []
    for snaps in history:
        snaps = np.atleast_2d(np.asarray(snaps, dtype=np.float64))
        if mode == "channels":
            out.append(float(np.mean(np.var(snaps, axis=1))))
        elif mode == "temporal":
            out.append(float(np.mean(np.var(snaps, axis=0))))
        else:
            raise DiagnosticsError(f"unknown bn_stat_variance mode {mode!r}")
    return out


def bn_running_means(model: Model) -> dict[tuple[str, str], np.ndarray]:
    """Copy of every BN running mean keyed by (layer tag, branch)."""
    return {
        (tag, b.value): bn.running_mean[b].copy()
        for tag, bn in model.bns.items()
        for b in Branch
    }


def record(epoch: int, instrument: str, layer: str | None = None, branch: str | None = None,
           **values) -> dict:
    rec: dict = {"epoch": epoch, "instrument": instrument}
    if layer is not None:
        rec["layer"] = layer
    if branch is not None:
        rec["branch"] = branch
    rec.update(values)
    return rec


def probe_indices(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Fixed seeded subset of the training split used by drift/distance probes."""
    rng = np.random.default_rng([seed, 0x50524F42])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def mean_over(records: Iterable[dict], instrument: str, key: str = "value") -> float:
    vals = [r[key] for r in records if r["instrument"] == instrument and r.get(key) is not None]
    return float(np.mean(vals)) if vals else float("nan")
