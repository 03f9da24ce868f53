"""Flat ``key = value`` run configuration with dotted keys.

Every key has a type and a default; unknown or repeated keys are errors.
Blank lines and ``#`` comments are ignored.  Float values may be written as
fractions (``attack.epsilon = 8/255``).  Empty values mean "unset" for the
optional keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from .attacks import AttackConfig
from .data import AugmentationConfig
from .losses import LossAssembly
from .nn import Arch
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float(s: str) -> float:
    if "/" in s:
        num, den = s.split("/", 1)
        return float(Fraction(num.strip()) / Fraction(den.strip()))
    return float(s)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s == "" else parse(s)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    doc: str
    choices: tuple | None = None


KEYS: dict[str, Key] = {}


def _key(name, default, parse, doc, choices=None):
    KEYS[name] = Key(name, default, parse, doc, choices)


# data
_key("data.train", "", str, "training split container (empty: generate synthetic data in memory)")
_key("data.test", "", str, "test split container (empty: generate synthetic data in memory)")
_key("data.classes", 4, int, "synthetic: number of classes")
_key("data.train_per_class", 500, int, "synthetic: training samples per class")
_key("data.test_per_class", 200, int, "synthetic: test samples per class")
_key("data.size", 16, int, "synthetic: image side length")
_key("data.channels", 1, int, "synthetic: channels")
_key("data.noise", 0.1, _float, "synthetic: pixel noise std")
_key("data.contrast", 0.3, _float, "synthetic: grating amplitude")
_key("data.phase_jitter", 0.0, _float, "synthetic: random phase range as a fraction of 2pi")
_key("data.seed", 0, int, "synthetic: generator seed")
# model
_key("model.widths", (16, 32, 64), _ints, "channels per stage")
_key("model.blocks_per_stage", 2, int, "conv-BN-ReLU blocks per stage")
_key("model.bn_momentum", 0.9, _float, "running-statistics momentum m in mu <- m*mu + (1-m)*mu_B")
_key("model.bn_eps", 1e-5, _float, "BatchNorm epsilon")
_key("model.seed", 0, int, "weight initialisation seed")
# trainer
_key("trainer.epochs", 30, int, "training epochs")
_key("trainer.base_lr", 0.05, _float, "initial learning rate")
_key("trainer.lr_drop_epochs", (22, 27), _ints, "epochs at which the rate is multiplied by lr_factor")
_key("trainer.lr_factor", 0.1, _float, "step-schedule factor")
_key("trainer.momentum", 0.9, _float, "SGD momentum")
_key("trainer.weight_decay", 5e-4, _float, "weight decay on every parameter")
_key("trainer.batch_size", 64, int, "training batch size")
_key("trainer.auto_balance", True, _bool, "set (alpha, beta) from the previous epoch's clean accuracy")
_key("trainer.auto_balance_init", 0.5, _float, "accuracy assumed before epoch 0 for auto-balance")
_key("trainer.swa_start", None, _optional(int), "first epoch folded into the weight average (empty: no SWA)")
_key("trainer.seed", 0, int, "batch order and attack seed")
_key("trainer.eval_every", 1, int, "robust test evaluation every N epochs (0: last epoch only)")
_key("trainer.eval_batch_size", 200, int, "evaluation batch size")
_key("trainer.diagnostics", True, _bool, "record conflict, distance, drift and BN-variance instruments")
_key("trainer.conflict_granularity", "tensor", str, "conflict fraction over parameter tensors or scalars",
     ("tensor", "scalar"))
_key("trainer.probe_size", 64, int, "fixed probe subset size for drift and distance")
_key("trainer.augment", False, _bool, "pad-crop and flip augmentation")
_key("trainer.checkpoint_every", 1, int, "write a checkpoint every N epochs (0: final only)")
_key("augment.pad_crop", 4, int, "augmentation padding")
_key("augment.horizontal_flip", True, _bool, "augmentation flip")
_key("augment.seed", 0, int, "augmentation seed")
# attacks
for _p, _iters in (("attack", 10), ("eval", 20)):
    _key(f"{_p}.norm", "Linf", str, f"{_p} threat model", ("Linf", "L2"))
    _key(f"{_p}.epsilon", 8 / 255, _float, f"{_p} budget")
    _key(f"{_p}.step_size", 2 / 255, _float, f"{_p} PGD step")
    _key(f"{_p}.iterations", _iters, int, f"{_p} PGD steps")
    _key(f"{_p}.random_init", True, _bool, f"{_p} random start inside the ball")
    _key(f"{_p}.seed", 0, int, f"{_p} random-start seed")
# loss
_key("loss.variant", "V3", str, "loss preset", ("V0", "V1", "V2", "V3", "AsymTRADES"))
_key("loss.alpha", 1.0, _float, "adversarial CE weight when auto-balance is off")
_key("loss.beta", 1.0, _float, "clean CE weight when auto-balance is off")
_key("loss.gamma", 30.0, _float, "invariance weight")
_key("loss.tags", ("stage3.block1", "stage3.block2"), _strs, "regularised layers")
_key("loss.term", None, _optional(str), "override: full, purify or corrupt", (None, "full", "purify", "corrupt"))
_key("loss.predictor", None, _optional(_bool), "override: predictor head on z'")
_key("loss.split_bn", None, _optional(_bool), "override: clean pass through the auxiliary BN")


def defaults() -> dict[str, Any]:
    return {k: v.default for k, v in KEYS.items()}


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Values set in ``text`` only (typed); see :func:`resolve` for the full configuration."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name, value = (s.strip() for s in line.split("=", 1))
        out.update(_set(out, name, value, f"{source}:{lineno}"))
    return out


def _set(current: dict, name: str, value: str, where: str) -> dict:
    if name not in KEYS:
        raise ConfigError(f"{where}: unknown key {name!r}")
    if name in current:
        raise ConfigError(f"{where}: key {name!r} given twice")
    key = KEYS[name]
    try:
        parsed = key.parse(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: bad value for {name}: {exc}") from exc
    if key.choices is not None and parsed not in key.choices:
        raise ConfigError(f"{where}: {name} must be one of {[c for c in key.choices if c]}, got {value!r}")
    return {name: parsed}


def resolve(overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    cfg = defaults()
    cfg.update(overrides or {})
    return cfg


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """``["attack.epsilon=0", ...]`` from the command line."""
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        name, value = (s.strip() for s in pair.split("=", 1))
        out.update(_set(out, name, value, "command line"))
    return out


def load(path, extra: list[str] | None = None) -> tuple[str, dict[str, Any]]:
    """Verbatim text and resolved configuration; I/O errors propagate as OSError."""
    text = Path(path).read_text()
    values = parse_text(text, str(path))
    values.update(parse_overrides(extra or []))
    return text, resolve(values)


def format_resolved(cfg: dict[str, Any]) -> str:
    lines = [f"# {k.doc}\n{name} = {_fmt(cfg[name])}" for name, k in KEYS.items()]
    return "\n".join(lines) + "\n"


# -- object construction ---------------------------------------------------------------


def _attack(cfg: dict, prefix: str) -> AttackConfig:
    return AttackConfig(
        norm=cfg[f"{prefix}.norm"], epsilon=cfg[f"{prefix}.epsilon"], step_size=cfg[f"{prefix}.step_size"],
        iterations=cfg[f"{prefix}.iterations"], random_init=cfg[f"{prefix}.random_init"],
        seed=cfg[f"{prefix}.seed"],
    )


def attack_config(cfg: dict, prefix: str = "eval") -> AttackConfig:
    try:
        return _attack(cfg, prefix)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_arch(cfg: dict) -> Arch:
    try:
        return Arch(
            in_channels=cfg["data.channels"], image_size=cfg["data.size"], widths=tuple(cfg["model.widths"]),
            blocks_per_stage=cfg["model.blocks_per_stage"], num_classes=cfg["data.classes"],
            bn_momentum=cfg["model.bn_momentum"], bn_eps=cfg["model.bn_eps"],
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_train_config(cfg: dict) -> TrainConfig:
    try:
        loss = LossAssembly(
            variant=cfg["loss.variant"], alpha=cfg["loss.alpha"], beta=cfg["loss.beta"], gamma=cfg["loss.gamma"],
            capture_tags=cfg["loss.tags"], term=cfg["loss.term"], predictor=cfg["loss.predictor"],
            split_bn=cfg["loss.split_bn"],
        )
        aug = None
        if cfg["trainer.augment"]:
            aug = AugmentationConfig(cfg["augment.pad_crop"], cfg["augment.horizontal_flip"], cfg["augment.seed"])
        return TrainConfig(
            epochs=cfg["trainer.epochs"], base_lr=cfg["trainer.base_lr"], lr_drop_epochs=cfg["trainer.lr_drop_epochs"],
            lr_factor=cfg["trainer.lr_factor"], momentum=cfg["trainer.momentum"],
            weight_decay=cfg["trainer.weight_decay"], batch_size=cfg["trainer.batch_size"],
            attack=_attack(cfg, "attack"), loss=loss, auto_balance=cfg["trainer.auto_balance"],
            auto_balance_init=cfg["trainer.auto_balance_init"], swa_start=cfg["trainer.swa_start"],
            seed=cfg["trainer.seed"], eval_attack=_attack(cfg, "eval"), eval_every=cfg["trainer.eval_every"],
            eval_batch_size=cfg["trainer.eval_batch_size"], augment=aug, diagnostics=cfg["trainer.diagnostics"],
            conflict_granularity=cfg["trainer.conflict_granularity"], probe_size=cfg["trainer.probe_size"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
