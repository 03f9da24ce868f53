"""Scalar objectives and the assembled invariance-regularised training losses.

Presets::

    variant      invariance term           predictor  split-BN  level
    V0           Dist(z', z)               no         no        representation
    V1           Dist(z', sg(z))           no         no        representation
    V2           Dist(h(z'), sg(z))        yes        no        representation
    V3           Dist(h(z'), sg(z_aux))    yes        yes       representation
    AsymTRADES   KL(f(x') || sg(f_aux(x)))  no         yes       logits

Any preset flag can be overridden, which spans the full ablation grid
(``term`` is ``"full"``, ``"purify"`` or ``"corrupt"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .nn import Branch, Mode, Model
from .tensor import Tensor, stop_gradient

VARIANTS = ("V0", "V1", "V2", "V3", "AsymTRADES")
TERMS = ("full", "purify", "corrupt")

_PRESETS = {
    "V0": dict(term="full", predictor=False, split_bn=False, logit_level=False),
    "V1": dict(term="purify", predictor=False, split_bn=False, logit_level=False),
    "V2": dict(term="purify", predictor=True, split_bn=False, logit_level=False),
    "V3": dict(term="purify", predictor=True, split_bn=True, logit_level=False),
    "AsymTRADES": dict(term="purify", predictor=False, split_bn=True, logit_level=True),
}

COSINE_EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossAssembly:
    variant: str = "V3"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 30.0
    capture_tags: tuple[str, ...] = ("stage3.block1", "stage3.block2")
    term: str | None = None
    predictor: bool | None = None
    split_bn: bool | None = None
    logit_level: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.variant not in _PRESETS:
            raise LossError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        preset = _PRESETS[self.variant]
        for key in ("term", "predictor", "split_bn"):
            if getattr(self, key) is None:
                object.__setattr__(self, key, preset[key])
        object.__setattr__(self, "logit_level", preset["logit_level"])
        object.__setattr__(self, "capture_tags", tuple(self.capture_tags))
        if self.term not in TERMS:
            raise LossError(f"unknown invariance term {self.term!r}; expected one of {TERMS}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise LossError("alpha, beta and gamma must be non-negative")
        if not self.logit_level and not self.capture_tags:
            raise LossError(f"{self.variant} needs at least one capture tag")

    def with_weights(self, alpha: float, beta: float) -> "LossAssembly":
        return replace(self, alpha=alpha, beta=beta)

    @property
    def clean_branch(self) -> Branch:
        return Branch.AUX if self.split_bn else Branch.MAIN

    @property
    def tags(self) -> tuple[str, ...]:
        return () if self.logit_level else self.capture_tags


@dataclass
class LossBreakdown:
    total: Tensor
    adv_cls: Tensor
    clean_cls: Tensor
    invariance: Tensor
    per_tag_invariance: list[Tensor]
    classification: Tensor  # alpha * adv_cls + beta * clean_cls, recorded on the same tape

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "adv_cls": float(self.adv_cls.data),
            "clean_cls": float(self.clean_cls.data),
            "invariance": float(self.invariance.data),
        }


# -- primitives ------------------------------------------------------------------


def _one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LossError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LossError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(logits, y) -> Tensor:
    """Batch mean of -log softmax(logits)[y], via log-sum-exp."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(y):
        raise LossError(f"cross_entropy: logits {logits.shape} do not match {len(y)} labels")
    onehot = _one_hot(y, logits.shape[1])
    return -T.mean(T.sum(T.log_softmax(logits) * onehot, axis=1))


def kl_div(p_logits, q_logits) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    p_logits, q_logits = T.as_tensor(p_logits), T.as_tensor(q_logits)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise LossError(f"kl_div: shape mismatch {p_logits.shape} vs {q_logits.shape}")
    logp = T.log_softmax(p_logits)
    logq = T.log_softmax(q_logits)
    return T.mean(T.sum(T.exp(logp) * (logp - logq), axis=1))


def normalize_rows(z, eps: float = COSINE_EPS) -> Tensor:
    """Rows scaled to unit length.

    An all-zero row has no direction; it maps to zero and passes no gradient
    (otherwise the 1/eps slope at the origin swamps every other term).
    """
    z = T.as_tensor(z)
    live = (np.abs(z.data).sum(axis=1, keepdims=True) > 0).astype(np.float64)
    scaled = z / (T.l2_norm(z, axis=1, keepdims=True) + eps)
    return scaled if live.all() else scaled * live


def cosine_distance(u, v, eps: float = COSINE_EPS) -> Tensor:
    """Batch mean of 1 - <u, v> / (|u| |v| + eps); lies in [0, 2]."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape != v.shape or u.ndim != 2:
        raise LossError(f"cosine_distance: shape mismatch {u.shape} vs {v.shape}")
    dot = T.sum(u * v, axis=1)
    denom = T.l2_norm(u, axis=1) * T.l2_norm(v, axis=1) + eps
    return T.mean(1.0 - dot / denom)


def representation_distance(z_adv, z_clean, term: str = "purify") -> Tensor:
    """Cosine distance between L2-normalised representations with the chosen gradient routing."""
    a, c = normalize_rows(z_adv), normalize_rows(z_clean)
    if term == "full":
        return cosine_distance(a, c)
    if term == "purify":
        return cosine_distance(a, stop_gradient(c))
    if term == "corrupt":
        return cosine_distance(stop_gradient(a), c)
    raise LossError(f"unknown invariance term {term!r}")


def decomposition_terms(z, z_adv) -> tuple[Tensor, Tensor, Tensor]:
    """(Dist(z', sg(z)), Dist(sg(z'), z), Dist(z', z)); the last equals the mean of the first two."""
    z, z_adv = T.as_tensor(z), T.as_tensor(z_adv)
    if z.shape != z_adv.shape:
        raise LossError(f"decomposition_terms: shape mismatch {z.shape} vs {z_adv.shape}")
    d_purify = cosine_distance(z_adv, stop_gradient(z))
    d_corrupt = cosine_distance(stop_gradient(z_adv), z)
    d_full = cosine_distance(z_adv, z)
    return d_purify, d_corrupt, d_full


# -- assembly --------------------------------------------------------------------


def assemble_loss(
    assembly: LossAssembly,
    y,
    logits_adv: Tensor,
    logits_clean: Tensor,
    reps_adv: dict[str, Tensor] | None = None,
    reps_clean: dict[str, Tensor] | None = None,
    model: Model | None = None,
    clean_branch: Branch | None = None,
) -> LossBreakdown:
    """Combine precomputed forwards into the weighted objective.

    ``logits_clean``/``reps_clean`` must come from ``assembly.clean_branch``;
    pass ``clean_branch`` to have that checked.  Predictor heads are taken
    from ``model``.
    """
    if clean_branch is not None and Branch(clean_branch) is not assembly.clean_branch:
        raise LossError(
            f"{assembly.variant} needs the clean pass on the {assembly.clean_branch.value} branch, "
            f"got {Branch(clean_branch).value}"
        )
    adv_cls = cross_entropy(logits_adv, y)
    clean_cls = cross_entropy(logits_clean, y)
    per_tag: list[Tensor] = []
    if assembly.logit_level:
        if assembly.term == "full":
            inv = kl_div(logits_adv, logits_clean)
        elif assembly.term == "purify":
            inv = kl_div(logits_adv, stop_gradient(logits_clean))
        else:
            inv = kl_div(stop_gradient(logits_adv), logits_clean)
        per_tag.append(inv)
    else:
        if reps_adv is None or reps_clean is None:
            raise LossError(f"{assembly.variant} needs captured representations")
        for tag in assembly.capture_tags:
            if tag not in reps_adv or tag not in reps_clean:
                raise LossError(f"representation for tag {tag!r} was not captured")
            z_adv = reps_adv[tag]
            if assembly.predictor:
                if model is None:
                    raise LossError(f"{assembly.variant} needs a model with predictor heads")
                z_adv = nn.predictor_forward(model, tag, z_adv)
            per_tag.append(representation_distance(z_adv, reps_clean[tag], assembly.term))
        inv = per_tag[0]
        for d in per_tag[1:]:
            inv = inv + d
        if len(per_tag) > 1:
            inv = inv / float(len(per_tag))
    cls = assembly.alpha * adv_cls + assembly.beta * clean_cls
    total = cls + assembly.gamma * inv
    return LossBreakdown(total, adv_cls, clean_cls, inv, per_tag, cls)


@dataclass
class LossForwards:
    breakdown: LossBreakdown
    logits_adv: Tensor
    logits_clean: Tensor
    reps_adv: dict[str, Tensor]
    reps_clean: dict[str, Tensor]


def compute_loss(
    model: Model,
    x,
    x_adv,
    y,
    assembly: LossAssembly,
    mode: Mode = Mode.TRAIN,
    observer=None,
) -> LossForwards:
    """Run the forwards a variant needs (adversarial first, then clean) and assemble the loss."""
    tags = assembly.tags
    logits_adv, reps_adv = nn.forward(
        model, x_adv, Branch.MAIN, mode, tags,
        observer=None if observer is None else _tagged(observer, "adv"),
    )
    logits_clean, reps_clean = nn.forward(
        model, x, assembly.clean_branch, mode, tags,
        observer=None if observer is None else _tagged(observer, "clean"),
    )
    breakdown = assemble_loss(
        assembly, y, logits_adv, logits_clean, reps_adv, reps_clean, model, assembly.clean_branch
    )
    return LossForwards(breakdown, logits_adv, logits_clean, reps_adv, reps_clean)


def _tagged(observer, stream: str):
    return lambda tag, branch, act: observer(stream, tag, branch, act)
