"""Objective terms: classification, contrastive alignment, adversarial, less-forgetting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F

# Pair kinds allowed for contrastive alignment.  Source and aux are never paired
# directly, and nothing is paired within a domain.
SOURCE_TARGET = "source-target"
TARGET_AUX = "target-aux"
PAIR_KINDS = (SOURCE_TARGET, TARGET_AUX)

SLOT_SOURCE, SLOT_TARGET, SLOT_AUX = 0, 1, 2


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1e-3
    lambda2: float = 1.0
    lambda3: float = 10.0
    margin: float = 1.0

    def validate(self) -> "LossConfig":
        for name in ("lambda1", "lambda2", "lambda3", "margin"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        return self


@dataclass
class PairedFeatures:
    """Feature pairs ``(a[i], b[i])`` with their kind and polarity."""

    a: torch.Tensor
    b: torch.Tensor
    kinds: tuple[str, ...]
    positive: torch.Tensor  # bool, one per pair

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ValueError(f"pair sides differ in shape: {tuple(self.a.shape)} vs {tuple(self.b.shape)}")
        if len(self.kinds) != self.a.shape[0] or self.positive.shape[0] != self.a.shape[0]:
            raise ValueError("kinds/positive must have one entry per pair")
        bad = [k for k in self.kinds if k not in PAIR_KINDS]
        if bad:
            raise ValueError(f"pair kind {bad[0]!r} not allowed; only {PAIR_KINDS}")

    def __len__(self) -> int:
        return self.a.shape[0]

    @classmethod
    def empty(cls, dim: int, dtype=torch.float32) -> "PairedFeatures":
        z = torch.zeros(0, dim, dtype=dtype)
        return cls(z, z, (), torch.zeros(0, dtype=torch.bool))


def build_pairs(features: torch.Tensor, labels: torch.Tensor, slots: torch.Tensor):
    """All cross-domain pairs within a batch, split into (positive, negative).

    Pairs are (source, target) and (target, aux) only.
    """
    labels, slots = torch.as_tensor(labels), torch.as_tensor(slots)
    s = torch.nonzero(slots == SLOT_SOURCE).flatten()
    t = torch.nonzero(slots == SLOT_TARGET).flatten()
    a = torch.nonzero(slots == SLOT_AUX).flatten()
    ia, ib, kinds = [], [], []
    for left, right, kind in ((s, t, SOURCE_TARGET), (t, a, TARGET_AUX)):
        if len(left) and len(right):
            gl, gr = torch.meshgrid(left, right, indexing="ij")
            ia.append(gl.flatten())
            ib.append(gr.flatten())
            kinds += [kind] * gl.numel()
    if not ia:
        e = PairedFeatures.empty(features.shape[1], features.dtype)
        return e, e
    ia, ib = torch.cat(ia), torch.cat(ib)
    same = labels[ia] == labels[ib]
    out = []
    for m in (same, ~same):
        idx = torch.nonzero(m).flatten()
        out.append(PairedFeatures(features[ia[idx]], features[ib[idx]],
                                  tuple(kinds[i] for i in idx.tolist()), same[idx]))
    return out[0], out[1]


def _sq_dist(pairs: PairedFeatures) -> torch.Tensor:
    return ((pairs.a - pairs.b) ** 2).sum(dim=1)


def semantic_alignment_loss(pairs: PairedFeatures) -> torch.Tensor:
    """Sum over positive pairs of half the squared distance."""
    if len(pairs) and not bool(pairs.positive.all()):
        raise ValueError("semantic_alignment_loss received a negative pair")
    return 0.5 * _sq_dist(pairs).sum()


def separation_loss(pairs: PairedFeatures, margin: float) -> torch.Tensor:
    """Sum over negative pairs of ``max(0, m - d^2) / 2``."""
    if len(pairs) and bool(pairs.positive.any()):
        raise ValueError("separation_loss received a positive pair")
    return 0.5 * torch.clamp(margin - _sq_dist(pairs), min=0.0).sum()


def contrastive_loss(pos: PairedFeatures, neg: PairedFeatures, margin: float) -> torch.Tensor:
    return semantic_alignment_loss(pos) + separation_loss(neg, margin)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    return _ReverseGrad.apply(x)


def domain_adversarial_loss(features: torch.Tensor, domain_labels: torch.Tensor, D):
    """Returns ``(loss_D, loss_G)``.

    ``loss_D`` is the discriminator's cross-entropy on detached features.
    ``loss_G`` has the same value but routes the features through gradient
    reversal, so its feature gradient is the negated discriminator gradient.
    """
    domain_labels = torch.as_tensor(domain_labels, dtype=torch.long)
    if domain_labels.unique().numel() < 2:
        raise ValueError("domain_adversarial_loss needs samples from two domains")
    loss_d = F.cross_entropy(D(features.detach()), domain_labels)
    loss_g = F.cross_entropy(D(grad_reverse(features)), domain_labels)
    return loss_d, loss_g


def domain_accuracy(features: torch.Tensor, domain_labels: torch.Tensor, D) -> float:
    with torch.no_grad():
        return float((D(features).argmax(dim=1) == domain_labels).float().mean())


class Stage(str, Enum):
    TA = "TA"
    CS = "CS"


@dataclass
class AdvTerms:
    ta: tuple[torch.Tensor, torch.Tensor]
    cs: tuple[torch.Tensor, torch.Tensor]
    acc_ta: float = float("nan")
    acc_cs: float = float("nan")

    @property
    def loss_D(self) -> torch.Tensor:
        return self.ta[0] + self.cs[0]

    @property
    def loss_G(self) -> torch.Tensor:
        return self.ta[1] + self.cs[1]

    @property
    def total(self) -> torch.Tensor:
        return self.loss_G


def _pair_labels(pos: torch.Tensor, neg: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    feats = torch.cat([pos, neg])
    labels = torch.cat([torch.ones(len(pos), dtype=torch.long), torch.zeros(len(neg), dtype=torch.long)])
    return feats, labels


def progressive_adv_loss(stage, feats_t, feats_a, feats_s, D_ta, D_cs, both_active: bool = False,
                         feats_c: torch.Tensor | None = None) -> AdvTerms:
    """Stage-gated adversarial terms.

    Stage TA: target (label 1) vs aux (label 0) through ``D_ta``.  Stage CS:
    target and aux pooled (label 1) vs source (label 0) through ``D_cs``.
    Inactive terms are exact zeros that never touch their discriminator.
    ``both_active`` keeps both terms on regardless of stage.
    """
    stage = Stage(stage)
    zero = feats_s.new_zeros(())
    terms = AdvTerms((zero, zero), (zero, zero))
    if stage is Stage.TA or both_active:
        f, y = _pair_labels(feats_t, feats_a)
        terms.ta = domain_adversarial_loss(f, y, D_ta)
        terms.acc_ta = domain_accuracy(f, y, D_ta)
    if stage is Stage.CS or both_active:
        combined = torch.cat([feats_t, feats_a]) if feats_c is None else feats_c
        if feats_c is not None and len(feats_c) != len(feats_t) + len(feats_a):
            raise ValueError("feats_c must be the concatenation of target and aux features")
        f, y = _pair_labels(combined, feats_s)
        terms.cs = domain_adversarial_loss(f, y, D_cs)
        terms.acc_cs = domain_accuracy(f, y, D_cs)
    return terms


def less_forgetting_loss(g_feats: torch.Tensor, teacher_feats: torch.Tensor) -> torch.Tensor:
    """Sum over source samples of the squared feature drift from the teacher."""
    if g_feats.shape != teacher_feats.shape:
        raise ValueError(f"shape mismatch {tuple(g_feats.shape)} vs {tuple(teacher_feats.shape)}")
    return ((g_feats - teacher_feats) ** 2).sum()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


@dataclass
class LossParts:
    cls: torch.Tensor | float
    cont: torch.Tensor | float = 0.0
    adv: torch.Tensor | float = 0.0
    lfc: torch.Tensor | float = 0.0


def total_loss(parts: LossParts, cfg: LossConfig):
    return parts.cls + cfg.lambda1 * parts.cont + cfg.lambda2 * parts.adv + cfg.lambda3 * parts.lfc
