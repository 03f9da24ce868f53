"""Layers and the desk-scale CNN used throughout the lab.

The model is ``stages`` groups of ``conv3x3 -> DualBatchNorm -> ReLU`` blocks,
with 2x2 average pooling between stages, a global average pool and a dense
classifier.  Every ReLU output is addressable by a capture tag
(``"stage3.block2"`` and so on) and owns a predictor head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Branch(str, Enum):
    MAIN = "main"
    AUX = "aux"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    in_channels: int = 1
    image_size: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 4
    kernel_size: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ModelError(f"widths must be positive, got {self.widths}")
        if self.blocks_per_stage < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise ModelError("blocks_per_stage, num_classes and in_channels must be positive")
        if self.kernel_size % 2 != 1:
            raise ModelError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.image_size < 1 or self.image_size % (2 ** (len(self.widths) - 1)):
            raise ModelError(
                f"image_size {self.image_size} must be divisible by {2 ** (len(self.widths) - 1)}"
            )
        if not 0.0 < self.bn_momentum < 1.0 or self.bn_eps <= 0:
            raise ModelError("bn_momentum must lie in (0, 1) and bn_eps must be positive")

    def tags(self) -> list[str]:
        return [
            f"stage{s + 1}.block{b + 1}"
            for s in range(len(self.widths))
            for b in range(self.blocks_per_stage)
        ]

    def tag_width(self, tag: str) -> int:
        stage = int(tag.split(".")[0].removeprefix("stage"))
        return self.widths[stage - 1]

    @property
    def penultimate(self) -> str:
        return self.tags()[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(**{**d, "widths": tuple(d["widths"])})


class DualBatchNorm:
    """BatchNorm with two independent parameter/statistics sets.

    ``main`` normalises adversarial inputs, ``aux`` clean inputs.  A forward
    on one branch never touches the other branch's state.
    """

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = {b: Tensor(np.ones(num_features), requires_grad=True) for b in Branch}
        self.beta = {b: Tensor(np.zeros(num_features), requires_grad=True) for b in Branch}
        self.running_mean = {b: np.zeros(num_features) for b in Branch}
        self.running_var = {b: np.ones(num_features) for b in Branch}

    def __call__(self, x: Tensor, branch: Branch, mode: Mode, momentum: float | None = None):
        branch = Branch(branch)
        if Mode(mode) is Mode.EVAL:
            y, _, _ = T.batch_norm(
                x, self.gamma[branch], self.beta[branch],
                self.running_mean[branch], self.running_var[branch], self.eps,
            )
            return y
        if x.shape[0] == 0:
            raise ModelError("BatchNorm in train mode needs a non-empty batch")
        y, mu, var = T.batch_norm(x, self.gamma[branch], self.beta[branch], eps=self.eps)
        m = self.momentum if momentum is None else momentum
        rm, rv = self.running_mean[branch], self.running_var[branch]
        rm[...] = m * rm + (1.0 - m) * mu
        rv[...] = m * rv + (1.0 - m) * var
        return y


class Predictor:
    """dense(d -> ceil(d/4)) -> ReLU -> dense(ceil(d/4) -> d)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        hidden = math.ceil(dim / 4)
        self.dim, self.hidden = dim, hidden
        self.w1 = Tensor(rng.normal(0.0, math.sqrt(2.0 / dim), (dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise T.ShapeError(f"predictor: expected (batch, {self.dim}), got shape {z.shape}")
        return T.relu(z @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class Model:
    arch: Arch
    convs: dict[str, Tensor]
    bns: dict[str, DualBatchNorm]
    fc_weight: Tensor
    fc_bias: Tensor
    predictors: dict[str, Predictor] = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor by checkpoint name, in a fixed order."""
        out: dict[str, Tensor] = {}
        for tag in self.arch.tags():
            out[f"{tag}.conv.weight"] = self.convs[tag]
            bn = self.bns[tag]
            for b in Branch:
                out[f"{tag}.bn.{b.value}.weight"] = bn.gamma[b]
                out[f"{tag}.bn.{b.value}.bias"] = bn.beta[b]
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        for tag, p in self.predictors.items():
            out[f"predictor.{tag}.fc1.weight"] = p.w1
            out[f"predictor.{tag}.fc1.bias"] = p.b1
            out[f"predictor.{tag}.fc2.weight"] = p.w2
            out[f"predictor.{tag}.fc2.bias"] = p.b2
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for tag in self.arch.tags():
            bn = self.bns[tag]
            for b in Branch:
                out[f"{tag}.bn.{b.value}.running_mean"] = bn.running_mean[b]
                out[f"{tag}.bn.{b.value}.running_var"] = bn.running_var[b]
        return out

    def backbone_parameters(self) -> dict[str, Tensor]:
        """Parameters of the classifier network itself (predictor heads excluded)."""
        return {k: v for k, v in self.parameters().items() if not k.startswith("predictor.")}

    def branch_parameters(self, branch: Branch) -> dict[str, Tensor]:
        """Parameters a forward on ``branch`` reads: shared ones plus that branch's BN."""
        other = Branch.AUX if Branch(branch) is Branch.MAIN else Branch.MAIN
        return {
            k: v for k, v in self.backbone_parameters().items() if f".bn.{other.value}." not in k
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**{k: v.data for k, v in self.parameters().items()}, **self.buffers()}

    def copy(self) -> "Model":
        clone = init_model(self.arch, seed=0, predictor_tags=list(self.predictors))
        clone.load_arrays(self.state_arrays())
        return clone

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in place; every name must exist with a matching shape."""
        targets = {**{k: v.data for k, v in self.parameters().items()}, **self.buffers()}
        missing = set(targets) - set(arrays)
        extra = set(arrays) - set(targets)
        if missing or extra:
            raise ModelError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, dst in targets.items():
            src = np.asarray(arrays[k], dtype=np.float64)
            if src.shape != dst.shape:
                raise ModelError(f"shape mismatch for {k}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def reset_bn_stats(self, branch: Branch | None = None) -> None:
        for bn in self.bns.values():
            for b in Branch if branch is None else (Branch(branch),):
                bn.running_mean[b][...] = 0.0
                bn.running_var[b][...] = 1.0


def init_model(arch: Arch, seed: int, predictor_tags: Iterable[str] | None = None) -> Model:
    """Fan-in scaled normal weights, identity BN, both BN branches equal."""
    rng = np.random.default_rng(seed)
    convs, bns = {}, {}
    c_in = arch.in_channels
    k = arch.kernel_size
    for tag in arch.tags():
        width = arch.tag_width(tag)
        fan_in = c_in * k * k
        convs[tag] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (width, c_in, k, k)), requires_grad=True)
        bns[tag] = DualBatchNorm(width, arch.bn_momentum, arch.bn_eps)
        c_in = width
    fc_w = Tensor(rng.normal(0.0, math.sqrt(1.0 / c_in), (c_in, arch.num_classes)), requires_grad=True)
    fc_b = Tensor(np.zeros(arch.num_classes), requires_grad=True)
    tags = arch.tags() if predictor_tags is None else list(predictor_tags)
    predictors = {}
    for tag in tags:
        if tag not in arch.tags():
            raise ModelError(f"unknown predictor tag {tag!r}")
        predictors[tag] = Predictor(arch.tag_width(tag), rng)
    model = Model(arch, convs, bns, fc_w, fc_b, predictors)
    for name, p in model.parameters().items():
        p.name = name
    return model


BnObserver = Callable[[str, Branch, np.ndarray], None]


def forward(
    model: Model,
    x,
    branch: Branch = Branch.MAIN,
    mode: Mode = Mode.EVAL,
    capture: Iterable[str] = (),
    observer: BnObserver | None = None,
    bn_momentum: float | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the network; returns logits and the spatially pooled captured ReLU outputs.

    ``observer`` is called with ``(tag, branch, pre_bn_activation)`` for every
    BatchNorm in train mode, before the running statistics are updated.
    """
    arch = model.arch
    branch, mode = Branch(branch), Mode(mode)
    capture = list(capture)
    known = set(arch.tags())
    for tag in capture:
        if tag not in known:
            raise ModelError(f"unknown capture tag {tag!r}; known tags: {sorted(known)}")
    x = T.as_tensor(x)
    expect = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise T.ShapeError(f"forward: expected input (batch, {expect}), got shape {x.shape}")
    if mode is Mode.TRAIN and x.shape[0] == 0:
        raise ModelError("empty batch in train mode")
    reps: dict[str, Tensor] = {}
    h = x
    pad = arch.kernel_size // 2
    for tag in arch.tags():
        if tag.endswith(".block1") and not tag.startswith("stage1."):
            h = T.avg_pool2d(h, 2)
        h = T.conv2d(h, model.convs[tag], padding=pad)
        if observer is not None and mode is Mode.TRAIN:
            observer(tag, branch, h.data)
        h = model.bns[tag](h, branch, mode, bn_momentum)
        h = T.relu(h)
        if tag in capture:
            reps[tag] = T.global_avg_pool(h)
    pooled = reps[arch.penultimate] if arch.penultimate in reps else T.global_avg_pool(h)
    logits = pooled @ model.fc_weight + model.fc_bias
    return logits, reps


def predictor_forward(model: Model, tag: str, z_adv: Tensor) -> Tensor:
    try:
        head = model.predictors[tag]
    except KeyError:
        raise ModelError(f"no predictor attached to tag {tag!r}") from None
    return head(z_adv)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
