"""The five-term training loss with analytic gradients and routing.

Box-annotated images produce four kinds of samples: anchor samples for the
proposal network (classification plus regression on positives), RoI
objectness, RoI box regression, and RoI classification.  Image-annotated
images produce classification samples only.  The routing rule is structural:
image-level samples can reach the classifier block and nothing else, so a
batch without box-level samples leaves every other gradient block exactly
zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .detector import ModelParams


class SampleKind(Enum):
    BOX_RPN = "box_rpn"
    BOX_REG = "box_reg"
    BOX_OBJ = "box_obj"
    BOX_CLS = "box_cls"
    IMAGE_CLS = "image_cls"


class EmptyBatchError(ValueError):
    pass


class LabelOutOfRangeError(ValueError):
    pass


class UnfilteredAncestorLabelError(ValueError):
    """A classification sample carries a category the classifier cannot score."""


@dataclass(frozen=True)
class TrainSample:
    """One loss contribution.

    BOX_RPN and BOX_OBJ carry a binary label (1 = object); positive BOX_RPN
    samples additionally carry a regression target.  BOX_REG carries only a
    target delta.  Classification kinds carry the category name, which is
    resolved against the model's class list.
    """

    kind: SampleKind
    features: np.ndarray
    label: int | None = None
    category: str | None = None
    delta_target: np.ndarray | None = None


@dataclass(frozen=True)
class LossBreakdown:
    l_csrpn_b: float
    l_reg_b: float
    l_obj_b: float
    l_cls_b: float
    l_cls_i: float
    l_cross: float

    @classmethod
    def from_terms(
        cls, l_csrpn_b: float, l_reg_b: float, l_obj_b: float, l_cls_b: float, l_cls_i: float
    ) -> "LossBreakdown":
        return cls(
            l_csrpn_b,
            l_reg_b,
            l_obj_b,
            l_cls_b,
            l_cls_i,
            l_csrpn_b + l_reg_b + l_obj_b + l_cls_b + l_cls_i,
        )

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.l_csrpn_b, self.l_reg_b, self.l_obj_b, self.l_cls_b, self.l_cls_i, self.l_cross)


def softmax_ce(scores: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross entropy of a stable softmax; gradient is probs minus one-hot."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be 1-d")
    if not 0 <= label < s.size:
        raise LabelOutOfRangeError(f"label {label} out of range for {s.size} scores")
    z = s - s.max()
    e = np.exp(z)
    total = e.sum()
    loss = math.log(total) - z[label]
    grad = e / total
    grad[label] -= 1.0
    return loss, grad


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Huber-style loss summed over coordinates, with its gradient."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    small = np.abs(d) < beta
    loss = float(np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta).sum())
    grad = np.where(small, d / beta, np.sign(d))
    return loss, grad


def _ce_rows(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross entropy over rows and the per-row score gradients."""
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1)
    ar = np.arange(scores.shape[0])
    loss = float((np.log(total) - z[ar, labels]).sum())
    grad = e / total[:, None]
    grad[ar, labels] -= 1.0
    return loss, grad


def _smooth_l1_rows(
    pred: np.ndarray, target: np.ndarray, beta: float
) -> tuple[float, np.ndarray]:
    d = pred - target
    small = np.abs(d) < beta
    loss = float(np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta).sum())
    grad = np.where(small, d / beta, np.sign(d))
    return loss, grad


def _accumulate(block, feats: np.ndarray, grad_out: np.ndarray, scale: float) -> None:
    block.weight += scale * (grad_out.T @ feats)
    block.bias += scale * grad_out.sum(axis=0)


def batch_loss_and_grads(
    params: ModelParams,
    samples: list[TrainSample],
    smooth_l1_beta: float = 1.0,
    term_weights: dict[str, float] | None = None,
) -> tuple[LossBreakdown, ModelParams]:
    """Loss breakdown and parameter-shaped gradients for a mixed batch.

    Each term is averaged over its own contributing sample count; terms with
    no samples are exactly zero.  Gradient routing follows the sample kinds:
    only classification samples (box- or image-sourced) touch head_cls, and
    image-level samples touch nothing else.
    """
    if not samples:
        raise EmptyBatchError("batch has no samples")
    weights = {"csrpn_b": 1.0, "reg_b": 1.0, "obj_b": 1.0, "cls_b": 1.0, "cls_i": 1.0}
    if term_weights:
        unknown = set(term_weights) - set(weights)
        if unknown:
            raise ValueError(f"unknown term weights: {sorted(unknown)}")
        weights.update(term_weights)

    by_kind: dict[SampleKind, list[TrainSample]] = {k: [] for k in SampleKind}
    for s in samples:
        by_kind[s.kind].append(s)

    grads = params.zeros_like()
    class_index = params.class_index()

    def resolve(sample: TrainSample) -> int:
        if sample.category is None or sample.category not in class_index:
            raise UnfilteredAncestorLabelError(
                f"{sample.kind.value} sample labeled {sample.category!r}, which the "
                f"classifier does not score; ancestor labels must be filtered first"
            )
        return class_index[sample.category]

    def binary_labels(group: list[TrainSample]) -> np.ndarray:
        labels = []
        for s in group:
            if s.label not in (0, 1):
                raise LabelOutOfRangeError(f"{s.kind.value} label must be 0 or 1, got {s.label}")
            labels.append(s.label)
        return np.array(labels, dtype=np.intp)

    # Anchor term: classification over all anchor samples plus regression on
    # the positive ones, each part averaged over its own count.
    l_csrpn = 0.0
    rpn = by_kind[SampleKind.BOX_RPN]
    if rpn:
        feats = np.stack([s.features for s in rpn])
        labels = binary_labels(rpn)
        ce, gscore = _ce_rows(params.rpn_obj.apply(feats), labels)
        l_csrpn += weights["csrpn_b"] * ce / len(rpn)
        _accumulate(grads.rpn_obj, feats, gscore, weights["csrpn_b"] / len(rpn))
        pos = [s for s in rpn if s.label == 1]
        if pos:
            if any(s.delta_target is None for s in pos):
                raise ValueError("positive anchor samples need a delta target")
            pfeats = np.stack([s.features for s in pos])
            targets = np.stack([s.delta_target for s in pos])
            reg, greg = _smooth_l1_rows(params.rpn_reg.apply(pfeats), targets, smooth_l1_beta)
            l_csrpn += weights["csrpn_b"] * reg / len(pos)
            _accumulate(grads.rpn_reg, pfeats, greg, weights["csrpn_b"] / len(pos))

    l_reg = 0.0
    reg_s = by_kind[SampleKind.BOX_REG]
    if reg_s:
        feats = np.stack([s.features for s in reg_s])
        targets = np.stack([s.delta_target for s in reg_s])
        loss, g = _smooth_l1_rows(params.head_reg.apply(feats), targets, smooth_l1_beta)
        l_reg = weights["reg_b"] * loss / len(reg_s)
        _accumulate(grads.head_reg, feats, g, weights["reg_b"] / len(reg_s))

    l_obj = 0.0
    obj_s = by_kind[SampleKind.BOX_OBJ]
    if obj_s:
        feats = np.stack([s.features for s in obj_s])
        labels = binary_labels(obj_s)
        loss, g = _ce_rows(params.head_obj.apply(feats), labels)
        l_obj = weights["obj_b"] * loss / len(obj_s)
        _accumulate(grads.head_obj, feats, g, weights["obj_b"] / len(obj_s))

    l_cls_b = 0.0
    cls_b = by_kind[SampleKind.BOX_CLS]
    if cls_b:
        feats = np.stack([s.features for s in cls_b])
        labels = np.array([resolve(s) for s in cls_b], dtype=np.intp)
        loss, g = _ce_rows(params.head_cls.apply(feats), labels)
        l_cls_b = weights["cls_b"] * loss / len(cls_b)
        _accumulate(grads.head_cls, feats, g, weights["cls_b"] / len(cls_b))

    l_cls_i = 0.0
    cls_i = by_kind[SampleKind.IMAGE_CLS]
    if cls_i:
        feats = np.stack([s.features for s in cls_i])
        labels = np.array([resolve(s) for s in cls_i], dtype=np.intp)
        loss, g = _ce_rows(params.head_cls.apply(feats), labels)
        l_cls_i = weights["cls_i"] * loss / len(cls_i)
        _accumulate(grads.head_cls, feats, g, weights["cls_i"] / len(cls_i))

    return LossBreakdown.from_terms(l_csrpn, l_reg, l_obj, l_cls_b, l_cls_i), grads
