"""Two-stage detector: proposal network over anchors plus a decoupled head.

The proposal network scores every anchor (object vs background) and regresses
it toward a nearby object; survivors of NMS become proposals.  The head is
split into a category-agnostic detection branch (objectness + box refinement)
and a classification branch that scores leaf categories only.  At inference
the two are combined per proposal: score(node) = objectness * P(node), where
ancestor probabilities are aggregated from leaf probabilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import featurizer, geometry, taxonomy as tx
from .featurizer import DEFAULT_FEATURES, FeatureConfig, DegenerateBoxError
from .geometry import Box

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1

PARAM_BLOCKS = ("rpn_obj", "rpn_reg", "head_obj", "head_reg", "head_cls")


class DimMismatchError(ValueError):
    """Model parameters do not fit the taxonomy or feature configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class Linear:
    """Dense layer y = W x + b with weight shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight.T + self.bias

    @classmethod
    def zeros(cls, out_dim: int, in_dim: int) -> "Linear":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


@dataclass
class ModelParams:
    """All trainable blocks plus the classifier's category vocabulary.

    class_names is the ordered tuple of categories the classifier scores.
    For the aggregated detector it equals the taxonomy's leaf_order; the flat
    baseline appends ancestor categories after the leaves.
    """

    feature_dim: int
    class_names: tuple[str, ...]
    rpn_obj: Linear
    rpn_reg: Linear
    head_obj: Linear
    head_reg: Linear
    head_cls: Linear

    @classmethod
    def zeros(cls, feature_dim: int, class_names: Sequence[str]) -> "ModelParams":
        names = tuple(class_names)
        return cls(
            feature_dim=feature_dim,
            class_names=names,
            rpn_obj=Linear.zeros(2, feature_dim),
            rpn_reg=Linear.zeros(4, feature_dim),
            head_obj=Linear.zeros(2, feature_dim),
            head_reg=Linear.zeros(4, feature_dim),
            head_cls=Linear.zeros(len(names), feature_dim),
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams.zeros(self.feature_dim, self.class_names)

    def copy(self) -> "ModelParams":
        out = self.zeros_like()
        for name in PARAM_BLOCKS:
            blk = getattr(self, name)
            dst = getattr(out, name)
            dst.weight[...] = blk.weight
            dst.bias[...] = blk.bias
        return out

    def blocks(self) -> dict[str, Linear]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def add_scaled(self, other: "ModelParams", scale: float) -> None:
        """In-place self += scale * other, block by block."""
        for name in PARAM_BLOCKS:
            blk = getattr(self, name)
            oth = getattr(other, name)
            blk.weight += scale * oth.weight
            blk.bias += scale * oth.bias

    def class_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass(frozen=True)
class Detection:
    box: Box
    category: str
    score: float


@dataclass(frozen=True)
class ImageClsSample:
    """Classification-only training sample harvested from an image-level image.

    Carries a box and a category label and nothing else, so it can never
    produce objectness or regression targets.
    """

    box: Box
    label: str


@dataclass(frozen=True)
class DetectorConfig:
    features: FeatureConfig = DEFAULT_FEATURES
    anchor_stride: int = 8
    anchor_scales: tuple[float, ...] = (14.0, 21.0, 30.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_pos_iou: float = 0.7
    anchor_neg_iou: float = 0.3
    proposal_nms_iou: float = 0.7
    detection_nms_iou: float = 0.5
    refine_steps: int = 2
    score_floor: float = 1e-3
    min_objectness: float | None = None


DEFAULT_DETECTOR = DetectorConfig()


def anchors_for(image_w: int, image_h: int, config: DetectorConfig = DEFAULT_DETECTOR) -> list[Box]:
    return geometry.generate_anchors(
        image_w, image_h, config.anchor_stride, config.anchor_scales, config.anchor_ratios
    )


def featurize_boxes(
    raster: np.ndarray, boxes: Sequence[Box], config: FeatureConfig = DEFAULT_FEATURES
) -> tuple[np.ndarray, np.ndarray]:
    """Features for many boxes; rows for degenerate boxes are zero and flagged."""
    feats = np.zeros((len(boxes), featurizer.feature_dim(config)), dtype=np.float64)
    valid = np.ones(len(boxes), dtype=bool)
    for i, box in enumerate(boxes):
        try:
            feats[i] = featurizer.region_features(raster, box, config)
        except DegenerateBoxError:
            valid[i] = False
    return feats, valid


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def rpn_forward(
    params: ModelParams,
    raster: np.ndarray,
    anchors: Sequence[Box],
    config: DetectorConfig = DEFAULT_DETECTOR,
    anchor_feats: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-anchor (objectness score pair, box delta, validity).

    Column 0 of the score pair is background, column 1 is object.  Anchors
    whose region degenerates are flagged invalid and scored zero.
    """
    if anchor_feats is None:
        anchor_feats, valid = featurize_boxes(raster, anchors, config.features)
    assert valid is not None
    scores = params.rpn_obj.apply(anchor_feats)
    deltas = params.rpn_reg.apply(anchor_feats)
    scores[~valid] = 0.0
    deltas[~valid] = 0.0
    return scores, deltas, valid


def propose(
    params: ModelParams,
    raster: np.ndarray,
    k: int,
    config: DetectorConfig = DEFAULT_DETECTOR,
    anchors: Sequence[Box] | None = None,
    anchor_feats: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> list[Proposal]:
    """Top-k proposals: regressed anchors, clipped, NMS-deduplicated.

    The result is sorted by descending objectness and is a prefix of the
    result for any larger k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    h, w = raster.shape[:2]
    if anchors is None:
        anchors = anchors_for(w, h, config)
    scores, deltas, valid = rpn_forward(params, raster, anchors, config, anchor_feats, valid)
    probs = _softmax_rows(scores)[:, 1]
    boxes = geometry.decode_deltas(geometry.box_array(anchors), deltas)
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, w)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, h)
    boxes[:, 2] = np.clip(boxes[:, 2], 0.0, w)
    boxes[:, 3] = np.clip(boxes[:, 3], 0.0, h)

    scored: list[tuple[Box, float]] = []
    for i in range(len(anchors)):
        if not valid[i]:
            continue
        if boxes[i, 2] - boxes[i, 0] <= 0 or boxes[i, 3] - boxes[i, 1] <= 0:
            continue
        p = float(probs[i])
        if config.min_objectness is not None and p < config.min_objectness:
            continue
        scored.append((Box(*boxes[i]), p))
    kept = geometry.nms(scored, config.proposal_nms_iou)
    return [Proposal(box, score) for box, score in kept[:k]]


def label_imagelevel_proposals(
    proposals: Sequence[Proposal], image_category: str, taxonomy: tx.Taxonomy
) -> list[ImageClsSample]:
    """Label every harvested proposal with the image's category.

    The samples are classification-only by construction; ancestor-labeled
    ones are expected to be dropped downstream before reaching the loss.
    """
    if image_category not in taxonomy.children:
        raise tx.UnknownCategoryError(f"unknown category: {image_category!r}")
    return [ImageClsSample(p.box, image_category) for p in proposals]


def _check_taxonomy_fit(params: ModelParams, taxonomy: tx.Taxonomy) -> bool:
    """True when params classify leaves only; False for the flat variant."""
    n_leaves = taxonomy.num_leaves
    if params.class_names == taxonomy.leaf_order:
        return True
    if (
        len(params.class_names) > n_leaves
        and params.class_names[:n_leaves] == taxonomy.leaf_order
        and all(
            c in taxonomy.children and taxonomy.children[c]
            for c in params.class_names[n_leaves:]
        )
    ):
        return False
    raise DimMismatchError(
        "classifier categories do not match the taxonomy leaf order; "
        "was the model trained against a different tree?"
    )


def detect(
    params: ModelParams,
    taxonomy: tx.Taxonomy,
    raster: np.ndarray,
    k: int = 300,
    report_nodes: str = "leaf",
    config: DetectorConfig = DEFAULT_DETECTOR,
    score_floor: float | None = None,
    anchors: Sequence[Box] | None = None,
    anchor_feats: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> list[Detection]:
    """Full inference on one raster.

    Each proposal box is refined by the head regressor; its detection score
    for a category is head objectness times the category probability.  With
    report_nodes="leaf" only leaf categories are emitted; "all" also emits
    every ancestor with its aggregated probability.  The flat classifier
    variant emits its own category list directly.
    """
    if report_nodes not in ("leaf", "all"):
        raise ValueError(f"report_nodes must be 'leaf' or 'all', got {report_nodes!r}")
    if featurizer.feature_dim(config.features) != params.feature_dim:
        raise DimMismatchError(
            f"feature config produces {featurizer.feature_dim(config.features)} dims, "
            f"model expects {params.feature_dim}"
        )
    leaf_space = _check_taxonomy_fit(params, taxonomy)
    floor = config.score_floor if score_floor is None else score_floor
    h, w = raster.shape[:2]

    proposals = propose(params, raster, k, config, anchors, anchor_feats, valid)
    if not proposals:
        return []
    # Cascade: regress each proposal onto the object first, then score the
    # refined crop.  Tight crops disambiguate shapes that loose ones cannot.
    refined = [p.box for p in proposals]
    feats, pvalid = featurize_boxes(raster, refined, config.features)
    for _ in range(config.refine_steps):
        refined = [
            _refine_box(params, refined[i], feats[i], w, h) if pvalid[i] else refined[i]
            for i in range(len(refined))
        ]
        feats, rvalid = featurize_boxes(raster, refined, config.features)
        pvalid &= rvalid

    obj = _softmax_rows(params.head_obj.apply(feats))[:, 1]
    probs = _softmax_rows(params.head_cls.apply(feats))
    if leaf_space:
        names: tuple[str, ...] = taxonomy.leaf_order if report_nodes == "leaf" else taxonomy.nodes
        # Ancestor probability is the sum over descendant leaves.
        member = np.zeros((len(names), taxonomy.num_leaves))
        for row, name in enumerate(names):
            member[row, sorted(taxonomy.descendant_leaves[name])] = 1.0
        node_probs = probs @ member.T
    else:
        names = params.class_names
        node_probs = probs
    scores = obj[:, None] * node_probs

    raw: list[tuple[Box, str, float]] = []
    for i in range(len(proposals)):
        if not pvalid[i]:
            continue
        for j in np.flatnonzero(scores[i] >= floor):
            raw.append((refined[i], names[int(j)], float(scores[i, j])))

    final: list[Detection] = []
    for name in sorted({r[1] for r in raw}):
        group = [(box, score) for box, cat, score in raw if cat == name]
        for box, score in geometry.nms(group, config.detection_nms_iou):
            final.append(Detection(box, name, score))
    final.sort(key=lambda d: -d.score)
    return final


def _refine_box(params: ModelParams, box: Box, feats: np.ndarray, w: int, h: int) -> Box:
    d = params.head_reg.apply(feats)
    refined = geometry.decode_deltas(
        geometry.box_array([box]), d[None, :]
    )[0]
    x1 = min(max(refined[0], 0.0), float(w))
    y1 = min(max(refined[1], 0.0), float(h))
    x2 = min(max(refined[2], 0.0), float(w))
    y2 = min(max(refined[3], 0.0), float(h))
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return box
    return Box(x1, y1, x2, y2)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write parameters: magic, version, dims, category names, f64 blocks."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<III", CHECKPOINT_VERSION, params.feature_dim, len(params.class_names))
    for name in params.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    for name in PARAM_BLOCKS:
        blk = getattr(params, name)
        out += np.ascontiguousarray(blk.weight, dtype="<f8").tobytes()
        out += np.ascontiguousarray(blk.bias, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path, taxonomy: tx.Taxonomy | None = None) -> ModelParams:
    """Read a checkpoint; optionally validate its categories against a taxonomy."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, feat_dim, n_classes = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    names = []
    for _ in range(n_classes):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        names.append(raw[off : off + ln].decode("utf-8"))
        off += ln
    params = ModelParams.zeros(feat_dim, names)
    for name in PARAM_BLOCKS:
        blk = getattr(params, name)
        for arr in (blk.weight, blk.bias):
            nbytes = arr.size * 8
            if off + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated parameter block {name}")
            arr[...] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(arr.shape)
            off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    if taxonomy is not None:
        _check_taxonomy_fit(params, taxonomy)
    return params
