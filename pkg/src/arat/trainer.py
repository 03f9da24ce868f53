"""Adversarial training loop: SGD, step schedule, auto-balance, SWA and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import diagnostics as D
from . import nn
from . import tensor as T
from .attacks import AttackConfig, pgd, with_branch
from .data import AugmentationConfig, Dataset, augment, iterate_batches
from .losses import LossAssembly, compute_loss
from .nn import Branch, Mode, Model

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


class NumericAbort(RuntimeError):
    """Raised when the loss turns NaN/Inf; carries the offending epoch and batch."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.05
    lr_drop_epochs: tuple[int, ...] = (22, 27)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    attack: AttackConfig = field(default_factory=AttackConfig)
    loss: LossAssembly = field(default_factory=LossAssembly)
    auto_balance: bool = True
    auto_balance_init: float = 0.5  # stands in for the undefined Acc(-1)
    swa_start: int | None = None
    seed: int = 0
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(iterations=20))
    eval_every: int = 1  # robust evaluation cadence in epochs; the last epoch is always evaluated
    eval_batch_size: int = 200
    augment: AugmentationConfig | None = None
    diagnostics: bool = True
    conflict_granularity: str = "tensor"
    probe_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.epochs <= 0:
            raise TrainError(f"epochs must be positive, got {self.epochs}")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise TrainError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and (drops[0] < 0 or drops[-1] >= self.epochs):
            raise TrainError(f"lr_drop_epochs must lie in [0, {self.epochs}), got {drops}")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise TrainError("base_lr, momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise TrainError("batch sizes must be positive")
        if not 0.0 <= self.auto_balance_init <= 1.0:
            raise TrainError("auto_balance_init must lie in [0, 1]")
        if self.swa_start is not None and not 0 <= self.swa_start < self.epochs:
            raise TrainError(f"swa_start must lie in [0, {self.epochs}), got {self.swa_start}")
        if self.eval_every < 0:
            raise TrainError("eval_every must be non-negative")


def auto_balance_update(prev_clean_acc: float) -> tuple[float, float]:
    """Shift weight from the clean to the adversarial term as clean accuracy rises."""
    if not 0.0 <= prev_clean_acc <= 1.0 or math.isnan(prev_clean_acc):
        raise TrainError(f"clean accuracy must lie in [0, 1], got {prev_clean_acc}")
    return float(prev_clean_acc), 1.0 - float(prev_clean_acc)


def lr_at_epoch(cfg: TrainConfig, t: int) -> float:
    if not 0 <= t < cfg.epochs:
        raise TrainError(f"epoch {t} outside [0, {cfg.epochs})")
    drops = sum(1 for e in cfg.lr_drop_epochs if e <= t)
    return cfg.base_lr * cfg.lr_factor**drops


class SGD:
    """Heavy-ball SGD: ``buf <- momentum*buf + g``; ``p <- p - lr*(buf + wd*p)``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, T.Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            g = grads[name]
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data -= lr * (buf + self.weight_decay * p.data)


# -- stochastic weight averaging -----------------------------------------------------


@dataclass
class SwaState:
    average: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0


def swa_update(state: SwaState, params: Mapping[str, np.ndarray]) -> SwaState:
    """Fold one snapshot into the running mean (a new state is returned)."""
    if state.count and set(params) != set(state.average):
        raise TrainError("swa_update: snapshot names differ from the running average")
    avg = {}
    n = state.count
    for k, v in params.items():
        v = np.asarray(v, dtype=np.float64)
        if n == 0:
            avg[k] = v.copy()
            continue
        if v.shape != state.average[k].shape:
            raise TrainError(f"swa_update: shape mismatch for {k}: {v.shape} vs {state.average[k].shape}")
        avg[k] = (state.average[k] * n + v) / (n + 1)
    return SwaState(avg, n + 1)


def swa_model(template: Model, state: SwaState, train_ds: Dataset, cfg: TrainConfig) -> Model:
    """Model carrying the averaged parameters with BN statistics recalibrated on the training stream.

    Each branch sees the stream it sees during training: main gets attacked
    inputs (crafted against the averaged weights read with the live model's
    statistics), the clean branch gets clean inputs.  Running statistics are
    a cumulative average over all batches.
    """
    if state.count == 0:
        raise TrainError("SWA state is empty")
    attacker = template.copy()
    attacker.load_arrays({**state.average, **{k: v.copy() for k, v in template.buffers().items()}})
    model = attacker.copy()
    model.reset_bn_stats()
    clean_branch = cfg.loss.clean_branch
    atk = with_branch(cfg.attack, Branch.MAIN)
    for b, (_, x, y) in enumerate(iterate_batches(train_ds, cfg.batch_size, seed=cfg.seed, epoch=cfg.epochs)):
        rng = np.random.default_rng([cfg.attack.seed, cfg.seed, 0x5357, b])
        x_adv = pgd(attacker, x, y, atk, rng)
        m = b / (b + 1)
        nn.forward(model, x_adv, Branch.MAIN, Mode.TRAIN, bn_momentum=m)
        if clean_branch is not Branch.MAIN:
            nn.forward(model, x, clean_branch, Mode.TRAIN, bn_momentum=m)
    return model


# -- evaluation ----------------------------------------------------------------------


def evaluate(model: Model, ds: Dataset, branch: Branch = Branch.MAIN, attack: AttackConfig | None = None,
             batch_size: int = 200) -> tuple[float, float]:
    """(clean, robust) accuracy over the full split; robust inputs are crafted against ``branch``."""
    branch = Branch(branch)
    if len(ds) == 0:
        raise TrainError("evaluate: empty split")
    clean = robust = 0
    for b, (_, x, y) in enumerate(iterate_batches(ds, batch_size, shuffle=False)):
        logits, _ = nn.forward(model, x, branch, Mode.EVAL)
        pred = logits.data.argmax(axis=1)
        clean += int((pred == y).sum())
        if attack is None:
            continue
        rng = np.random.default_rng([attack.seed, b])
        x_adv = pgd(model, x, y, with_branch(attack, branch), rng)
        adv_logits, _ = nn.forward(model, x_adv, branch, Mode.EVAL)
        robust += int((adv_logits.data.argmax(axis=1) == y).sum())
    n = len(ds)
    return clean / n, (clean if attack is None else robust) / n


# -- training ------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    alpha: float
    beta: float
    loss_total: float = 0.0
    loss_adv_cls: float = 0.0
    loss_clean_cls: float = 0.0
    loss_invariance: float = 0.0
    train_clean_acc: float = 0.0
    train_adv_acc: float = 0.0
    test_clean_acc: float | None = None
    test_robust_acc: float | None = None
    diagnostics: list[dict] = field(default_factory=list)
    bn_snapshots: dict[tuple[str, str], list[np.ndarray]] = field(default_factory=dict, repr=False)

    def summary_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "clean_acc": self.test_clean_acc,
            "robust_acc": self.test_robust_acc,
            "alpha": self.alpha,
            "beta": self.beta,
            "lr": self.lr,
            "loss_total": self.loss_total,
            "loss_adv_cls": self.loss_adv_cls,
            "loss_clean_cls": self.loss_clean_cls,
            "loss_invariance": self.loss_invariance,
            "train_clean_acc": self.train_clean_acc,
            "train_adv_acc": self.train_adv_acc,
        }


@dataclass
class Probe:
    """Fixed training subset for drift and feature-distance measurements."""

    x: np.ndarray
    y: np.ndarray
    prev_adv: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, ds: Dataset, size: int, seed: int) -> "Probe":
        idx = D.probe_indices(len(ds), size, seed)
        return cls(ds.images[idx].copy(), ds.labels[idx].copy())


def _probe_records(model: Model, probe: Probe, cfg: TrainConfig, epoch: int) -> list[dict]:
    rng = np.random.default_rng([cfg.attack.seed, cfg.seed, 0x50524F42])
    clean_branch = cfg.loss.clean_branch
    z, z_adv = D.penultimate_pair(model, probe.x, probe.y, cfg.attack, clean_branch, rng)
    layer = model.arch.penultimate
    recs = [
        D.record(epoch, "feature_distance", layer, clean_branch.value,
                 value=float(np.mean(np.sqrt(((z - z_adv) ** 2).sum(axis=1))))),
        D.record(epoch, "representation_similarity", layer, clean_branch.value,
                 value=float(np.mean(D._row_cosines(z, z_adv)))),
    ]
    if probe.prev_adv is not None:
        recs.append(D.record(epoch, "representation_drift", layer, Branch.MAIN.value,
                             value=D.representation_drift(probe.prev_adv, z_adv)))
    probe.prev_adv = z_adv
    return recs


def train_epoch(
    model: Model,
    train_ds: Dataset,
    cfg: TrainConfig,
    epoch: int,
    alpha: float,
    beta: float,
    opt: SGD,
    probe: Probe | None = None,
    observer=None,
) -> MetricsRecord:
    """One pass over the training split; the model is updated in place."""
    lr = lr_at_epoch(cfg, epoch)
    assembly = cfg.loss.with_weights(alpha, beta)
    rec = MetricsRecord(epoch, lr, alpha, beta)
    atk = with_branch(cfg.attack, Branch.MAIN)
    params = model.parameters()
    names, tensors = list(params), list(params.values())
    snaps = {key: [] for key in D.bn_running_means(model)}
    if cfg.diagnostics and probe is not None:
        rec.diagnostics.extend(_probe_records(model, probe, cfg, epoch))
    sums = np.zeros(4)
    n_seen = clean_hits = adv_hits = 0
    for b, (_, x, y) in enumerate(iterate_batches(train_ds, cfg.batch_size, seed=cfg.seed, epoch=epoch)):
        if cfg.augment is not None:
            x = augment(x, cfg.augment, np.random.default_rng([cfg.augment.seed, cfg.seed, epoch, b]))
        rng = np.random.default_rng([cfg.attack.seed, cfg.seed, epoch, b])
        x_adv = pgd(model, x, y, atk, rng)
        with T.Tape() as tape:
            fw = compute_loss(model, x, x_adv, y, assembly, Mode.TRAIN, observer)
        br = fw.breakdown
        total = float(br.total.data)
        if not math.isfinite(total):
            raise NumericAbort(epoch, b, total)
        grads = dict(zip(names, tape.gradient(br.total, tensors)))
        if b == 0 and cfg.diagnostics:
            pair = D.gradient_pair(model, fw, tape)
            report = D.conflict_report(pair, cfg.conflict_granularity)
            rec.diagnostics.append(D.record(
                epoch, "gradient_conflict", granularity=cfg.conflict_granularity,
                global_cosine=report.global_cosine, conflict_fraction=report.conflict_fraction,
                counted=report.counted,
            ))
            rec.diagnostics.append(D.record(epoch, "loss_gradient_norm", value=D.loss_gradient_norm(grads)))
        opt.step(params, grads, lr)
        for key, value in D.bn_running_means(model).items():
            snaps[key].append(value)
        k = len(y)
        n_seen += k
        sums += k * np.array([total, float(br.adv_cls.data), float(br.clean_cls.data), float(br.invariance.data)])
        clean_hits += int((fw.logits_clean.data.argmax(axis=1) == y).sum())
        adv_hits += int((fw.logits_adv.data.argmax(axis=1) == y).sum())
    if n_seen == 0:
        raise TrainError("training split produced no batches")
    rec.loss_total, rec.loss_adv_cls, rec.loss_clean_cls, rec.loss_invariance = (sums / n_seen).tolist()
    rec.train_clean_acc = clean_hits / n_seen
    rec.train_adv_acc = adv_hits / n_seen
    rec.bn_snapshots = {key: np.stack(v) for key, v in snaps.items()}
    if cfg.diagnostics:
        for (tag, branch), hist in rec.bn_snapshots.items():
            rec.diagnostics.append(D.record(
                epoch, "bn_stat_variance", tag, branch,
                value=D.bn_stat_variance([hist])[0],
                temporal=D.bn_stat_variance([hist], "temporal")[0],
            ))
    return rec


@dataclass
class TrainResult:
    model: Model
    history: list[MetricsRecord]
    swa: SwaState | None = None
    swa_model: Model | None = None


def train(
    model: Model,
    train_ds: Dataset,
    cfg: TrainConfig,
    test_ds: Dataset | None = None,
    on_epoch: Callable[[MetricsRecord, Model], None] | None = None,
    observer=None,
) -> TrainResult:
    """Full schedule.  ``on_epoch`` sees each finished record and the live model."""
    opt = SGD(cfg.momentum, cfg.weight_decay)
    probe = Probe.from_dataset(train_ds, cfg.probe_size, cfg.seed) if cfg.diagnostics else None
    history: list[MetricsRecord] = []
    swa = SwaState() if cfg.swa_start is not None else None
    if cfg.auto_balance:
        alpha, beta = auto_balance_update(cfg.auto_balance_init)
    else:
        alpha, beta = cfg.loss.alpha, cfg.loss.beta
    for epoch in range(cfg.epochs):
        rec = train_epoch(model, train_ds, cfg, epoch, alpha, beta, opt, probe, observer)
        if test_ds is not None:
            last = epoch == cfg.epochs - 1
            robust = cfg.eval_every and (epoch + 1) % cfg.eval_every == 0
            attack = cfg.eval_attack if (robust or last) else None
            clean, rob = evaluate(model, test_ds, Branch.MAIN, attack, cfg.eval_batch_size)
            rec.test_clean_acc = clean
            rec.test_robust_acc = rob if attack is not None else None
        if swa is not None and epoch >= cfg.swa_start:
            swa = swa_update(swa, {k: p.data for k, p in model.parameters().items()})
        log.info("epoch %d lr %.4g alpha %.3f loss %.4f train clean %.3f adv %.3f test %s/%s",
                 epoch, rec.lr, rec.alpha, rec.loss_total, rec.train_clean_acc, rec.train_adv_acc,
                 rec.test_clean_acc, rec.test_robust_acc)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
        if cfg.auto_balance:
            alpha, beta = auto_balance_update(rec.train_clean_acc)
    result = TrainResult(model, history, swa)
    if swa is not None:
        result.swa_model = swa_model(model, swa, train_ds, cfg)
    return result
