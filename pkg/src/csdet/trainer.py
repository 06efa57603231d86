"""Cross-supervised training loop.

Every iteration mixes a fixed number of box-annotated and image-annotated
images.  Box images supply anchor samples for the proposal network and RoI
samples for the head; image images are run through the current proposal
network, their top-k proposals are labeled with the image category, ancestor
labels are filtered out, and the survivors train the classifier only.
Optimization is plain seeded SGD (momentum optional) with linear warmup and
a single step drop.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import detector as det
from . import losses
from . import synthworld as sw
from . import taxonomy as tx
from .detector import DetectorConfig, DEFAULT_DETECTOR, ModelParams
from .geometry import Box, POSITIVE, NEGATIVE, assign_anchor_labels, encode_delta, horizontal_flip, iou_matrix, box_array
from .losses import SampleKind, TrainSample

LOG_COLUMNS = ("iter", "lr", "l_csrpn_b", "l_reg_b", "l_obj_b", "l_cls_b", "l_cls_i", "l_cross")


class EmptyPoolError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_box: int = 4
    batch_img: int = 4
    k_imagelevel_proposals: int = 10
    warmup_iters: int = 50
    base_lr: float = 0.05
    lr_drop_factor: float = 10.0
    lr_drop_epoch: int = 3
    total_epochs: int = 4
    seed: int = 7
    momentum: float = 0.0
    flip_prob: float = 0.5
    rpn_batch_per_image: int = 32
    roi_neg_ratio: int = 3
    roi_neg_iou_max: float = 0.35
    roi_jitter_per_gt: int = 3
    roi_jitter_min_iou: float = 0.45
    smooth_l1_beta: float = 1.0
    image_level_enabled: bool = True
    flat_ancestor_classes: bool = False

    def __post_init__(self) -> None:
        if self.batch_box < 1 or self.batch_img < 0:
            raise ValueError("batch_box must be >= 1 and batch_img >= 0")
        if self.k_imagelevel_proposals < 1 or self.total_epochs < 1:
            raise ValueError("k_imagelevel_proposals and total_epochs must be >= 1")
        if self.lr_drop_epoch > self.total_epochs:
            raise ValueError("lr_drop_epoch must be <= total_epochs")
        if self.warmup_iters < 1 or self.base_lr <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("warmup_iters, base_lr and lr_drop_factor must be positive")


def parse_train_config(path: str | Path) -> TrainConfig:
    """Read a flat key=value config file mirroring TrainConfig fields."""
    kw: dict[str, object] = {}
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown option {key!r}")
        ann = types[key]
        if ann == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError(f"{path}:{lineno}: {key} must be true or false")
            kw[key] = value.lower() == "true"
        elif ann == "int":
            kw[key] = int(value)
        else:
            kw[key] = float(value)
    return TrainConfig(**kw)  # type: ignore[arg-type]


def format_train_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def lr_schedule(iteration: int, iters_per_epoch: int, config: TrainConfig) -> float:
    """Linear ramp from base_lr/10 over warmup, then base_lr, then one drop."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < config.warmup_iters:
        lr = config.base_lr * (0.1 + 0.9 * iteration / config.warmup_iters)
    else:
        lr = config.base_lr
    epoch = iteration // iters_per_epoch
    if epoch >= config.lr_drop_epoch:
        lr /= config.lr_drop_factor
    return lr


@dataclass
class BatchItem:
    image: sw.AnnotatedImage
    flipped: bool


@dataclass
class Batch:
    box_items: list[BatchItem]
    image_items: list[BatchItem]


def make_batches(
    dataset: Sequence[sw.AnnotatedImage], config: TrainConfig, epoch_seed: int
) -> list[Batch]:
    """Mixed batches for one epoch.

    Both pools are shuffled independently; the shorter pool cycles.  The
    epoch covers the longer pool once.  Each slot gets a seeded coin flip for
    horizontal-flip augmentation.
    """
    box_pool = [img for img in dataset if isinstance(img.supervision, sw.BoxSupervision)]
    img_pool = [img for img in dataset if isinstance(img.supervision, sw.ImageSupervision)]
    if not box_pool:
        raise EmptyPoolError("no box-level images in the dataset")
    if config.batch_img > 0 and not img_pool:
        raise EmptyPoolError("batch_img > 0 but the dataset has no image-level images")

    rng = np.random.default_rng(np.random.SeedSequence((epoch_seed, 17)))
    box_order = rng.permutation(len(box_pool))
    img_order = rng.permutation(len(img_pool)) if img_pool else np.zeros(0, dtype=int)

    n_batches = math.ceil(len(box_pool) / config.batch_box)
    if config.batch_img > 0:
        n_batches = max(n_batches, math.ceil(len(img_pool) / config.batch_img))

    batches: list[Batch] = []
    bi = 0
    ii = 0
    for _ in range(n_batches):
        box_items = []
        for _ in range(config.batch_box):
            img = box_pool[box_order[bi % len(box_pool)]]
            box_items.append(BatchItem(img, bool(rng.random() < config.flip_prob)))
            bi += 1
        image_items = []
        for _ in range(config.batch_img):
            img = img_pool[img_order[ii % len(img_pool)]]
            image_items.append(BatchItem(img, bool(rng.random() < config.flip_prob)))
            ii += 1
        batches.append(Batch(box_items, image_items))
    return batches


class _ImageCache:
    """Per-(image, orientation) anchor features and ground-truth assignments."""

    def __init__(self, anchors: list[Box], det_config: DetectorConfig):
        self.anchors = anchors
        self.det_config = det_config
        self._store: dict[tuple[str, bool], dict] = {}

    def get(self, image: sw.AnnotatedImage, flipped: bool) -> dict:
        key = (image.id, flipped)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        if isinstance(image.supervision, sw.BoxSupervision):
            gt_boxes = [inst.box for inst in image.supervision.instances]
            gt_labels = [inst.category for inst in image.supervision.instances]
        else:
            gt_boxes, gt_labels = [], []
        raster = image.raster
        if flipped:
            raster, gt_boxes = horizontal_flip(raster, gt_boxes)
        feats, valid = det.featurize_boxes(raster, self.anchors, self.det_config.features)
        entry = {
            "raster": raster,
            "gt_boxes": gt_boxes,
            "gt_labels": gt_labels,
            "anchor_feats": feats,
            "anchor_valid": valid,
        }
        if gt_boxes:
            entry["assignments"] = assign_anchor_labels(
                self.anchors, gt_boxes, self.det_config.anchor_pos_iou, self.det_config.anchor_neg_iou
            )
            entry["gt_feats"], entry["gt_valid"] = det.featurize_boxes(
                raster, gt_boxes, self.det_config.features
            )
            entry["anchor_max_iou"] = iou_matrix(
                box_array(self.anchors), box_array(gt_boxes)
            ).max(axis=1)
        self._store[key] = entry
        return entry


def _class_space(
    dataset: Sequence[sw.AnnotatedImage], taxonomy: tx.Taxonomy, config: TrainConfig
) -> tuple[str, ...]:
    if not config.flat_ancestor_classes:
        return taxonomy.leaf_order
    extra: set[str] = set()
    for img in dataset:
        if isinstance(img.supervision, sw.ImageSupervision):
            labels = [img.supervision.category]
        else:
            labels = [inst.category for inst in img.supervision.instances]
        for label in labels:
            if label not in taxonomy.children:
                raise tx.UnknownCategoryError(f"dataset labels unknown category {label!r}")
            if taxonomy.children[label]:
                extra.add(label)
    return taxonomy.leaf_order + tuple(sorted(extra))


def _box_image_samples(
    entry: dict,
    class_names: tuple[str, ...],
    config: TrainConfig,
    det_config: DetectorConfig,
    rng: np.random.Generator,
) -> list[TrainSample]:
    """Anchor and RoI samples for one box-annotated image."""
    samples: list[TrainSample] = []
    feats = entry["anchor_feats"]
    valid = entry["anchor_valid"]
    assignments = entry.get("assignments")
    if assignments is None:
        # No ground truth: all anchors negative; sample a handful.
        neg = np.flatnonzero(valid)
        take = rng.choice(neg, size=min(len(neg), config.rpn_batch_per_image), replace=False)
        for i in sorted(take):
            samples.append(TrainSample(SampleKind.BOX_RPN, feats[i], label=0))
        return samples

    pos_idx = [i for i, a in enumerate(assignments) if a.label == POSITIVE and valid[i]]
    neg_idx = [i for i, a in enumerate(assignments) if a.label == NEGATIVE and valid[i]]
    half = config.rpn_batch_per_image // 2
    if len(pos_idx) > half:
        pos_idx = sorted(rng.choice(np.array(pos_idx), size=half, replace=False).tolist())
    n_neg = min(len(neg_idx), config.rpn_batch_per_image - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = sorted(rng.choice(np.array(neg_idx), size=n_neg, replace=False).tolist())
    for i in pos_idx:
        samples.append(
            TrainSample(
                SampleKind.BOX_RPN,
                feats[i],
                label=1,
                delta_target=assignments[i].target_delta.as_array(),
            )
        )
    for i in neg_idx:
        samples.append(TrainSample(SampleKind.BOX_RPN, feats[i], label=0))

    # Head RoIs: every ground-truth box plus a few jittered copies of it are
    # positives (the jitters give the head regressor nonzero targets and show
    # the classifier loose crops); negatives are sampled from anchors that
    # barely overlap any object.
    gt_feats = entry["gt_feats"]
    gt_valid = entry["gt_valid"]
    gt_boxes = entry["gt_boxes"]
    gt_labels = entry["gt_labels"]
    raster = entry["raster"]
    n_pos = 0
    for j, box in enumerate(gt_boxes):
        if not gt_valid[j]:
            continue
        n_pos += 1
        rois = [(gt_feats[j], box)]
        jitters = _jitter_boxes(box, raster.shape, config, rng)
        if jitters:
            jfeats, jvalid = det.featurize_boxes(raster, jitters, det_config.features)
            rois.extend((jfeats[i], jitters[i]) for i in range(len(jitters)) if jvalid[i])
        for feats_j, roi in rois:
            samples.append(TrainSample(SampleKind.BOX_OBJ, feats_j, label=1))
            samples.append(
                TrainSample(
                    SampleKind.BOX_REG,
                    feats_j,
                    delta_target=encode_delta(roi, box).as_array(),
                )
            )
            if gt_labels[j] in class_names:
                samples.append(TrainSample(SampleKind.BOX_CLS, feats_j, category=gt_labels[j]))
    # Negatives for the head: anchors below the positive band.  Half of the
    # budget prefers "hard" fragments that partially overlap an object, so
    # objectness learns to reject partial crops, not just background.
    max_iou = entry["anchor_max_iou"]
    hard = np.flatnonzero((max_iou >= 0.1) & (max_iou < config.roi_neg_iou_max) & valid)
    easy = np.flatnonzero((max_iou < 0.1) & valid)
    budget = config.roi_neg_ratio * max(n_pos, 1)
    n_hard = min(len(hard), budget // 2)
    if len(hard) > n_hard:
        hard = np.sort(rng.choice(hard, size=n_hard, replace=False))
    n_easy = min(len(easy), budget - n_hard)
    if len(easy) > n_easy:
        easy = np.sort(rng.choice(easy, size=n_easy, replace=False))
    for i in (*hard, *easy):
        samples.append(TrainSample(SampleKind.BOX_OBJ, feats[i], label=0))
    return samples


def _jitter_boxes(
    box: Box, raster_shape: tuple, config: TrainConfig, rng: np.random.Generator
) -> list[Box]:
    """Randomly shifted and rescaled copies of a box, kept above a minimum IoU."""
    h, w = raster_shape[:2]
    out: list[Box] = []
    for _ in range(config.roi_jitter_per_gt):
        for _attempt in range(8):
            dx, dy = rng.uniform(-0.3, 0.3, 2)
            sw_, sh_ = np.exp(rng.uniform(-0.3, 0.3, 2))
            cx, cy = box.center
            bw, bh = box.width * sw_, box.height * sh_
            x1 = max(0.0, cx + dx * box.width - 0.5 * bw)
            y1 = max(0.0, cy + dy * box.height - 0.5 * bh)
            x2 = min(float(w), cx + dx * box.width + 0.5 * bw)
            y2 = min(float(h), cy + dy * box.height + 0.5 * bh)
            if x2 - x1 < 2 or y2 - y1 < 2:
                continue
            cand = Box(x1, y1, x2, y2)
            if iou_matrix(box_array([cand]), box_array([box]))[0, 0] >= config.roi_jitter_min_iou:
                out.append(cand)
                break
    return out


def _image_level_samples(
    params: ModelParams,
    entry: dict,
    category: str,
    taxonomy: tx.Taxonomy,
    config: TrainConfig,
    det_config: DetectorConfig,
    anchors: list[Box],
) -> list[TrainSample]:
    """Harvest top-k proposals with the current model and label them."""
    proposals = det.propose(
        params,
        entry["raster"],
        config.k_imagelevel_proposals,
        det_config,
        anchors=anchors,
        anchor_feats=entry["anchor_feats"],
        valid=entry["anchor_valid"],
    )
    if not proposals:
        return []
    weak = det.label_imagelevel_proposals(proposals, category, taxonomy)
    if config.flat_ancestor_classes:
        kept = [s for s in weak if s.label in params.class_names]
    else:
        kept_idx, _, _ = tx.filter_ancestor_samples([s.label for s in weak], taxonomy)
        kept = [weak[i] for i in kept_idx]
    if not kept:
        return []
    feats, valid = det.featurize_boxes(entry["raster"], [s.box for s in kept], det_config.features)
    return [
        TrainSample(SampleKind.IMAGE_CLS, feats[i], category=kept[i].label)
        for i in range(len(kept))
        if valid[i]
    ]


@dataclass
class TrainResult:
    params: ModelParams
    log_rows: list[dict]
    checkpoints: list[Path]


def train(
    dataset: Sequence[sw.AnnotatedImage],
    taxonomy: tx.Taxonomy,
    config: TrainConfig = TrainConfig(),
    det_config: DetectorConfig = DEFAULT_DETECTOR,
    checkpoint_dir: str | Path | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Run the full training loop; deterministic for a given config."""
    class_names = _class_space(dataset, taxonomy, config)
    raster_shape = dataset[0].raster.shape
    for img in dataset:
        if img.raster.shape != raster_shape:
            raise ValueError("all rasters must share one shape")
    h, w = raster_shape[:2]
    anchors = det.anchors_for(w, h, det_config)
    cache = _ImageCache(anchors, det_config)

    params = ModelParams.zeros(det.featurizer.feature_dim(det_config.features), class_names)
    velocity = params.zeros_like() if config.momentum > 0 else None

    iters_per_epoch = len(make_batches(dataset, config, _mix_seed(config.seed, 0)))

    sample_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 29)))
    log_rows: list[dict] = []
    checkpoints: list[Path] = []
    iteration = 0
    for epoch in range(config.total_epochs):
        batches = make_batches(dataset, config, _mix_seed(config.seed, epoch))
        for batch in batches:
            lr = lr_schedule(iteration, iters_per_epoch, config)
            samples: list[TrainSample] = []
            for item in batch.box_items:
                entry = cache.get(item.image, item.flipped)
                samples.extend(
                    _box_image_samples(entry, class_names, config, det_config, sample_rng)
                )
            for item in batch.image_items:
                if not config.image_level_enabled:
                    continue
                entry = cache.get(item.image, item.flipped)
                assert isinstance(item.image.supervision, sw.ImageSupervision)
                samples.extend(
                    _image_level_samples(
                        params,
                        entry,
                        item.image.supervision.category,
                        taxonomy,
                        config,
                        det_config,
                        anchors,
                    )
                )
            breakdown, grads = losses.batch_loss_and_grads(
                params, samples, smooth_l1_beta=config.smooth_l1_beta
            )
            if not math.isfinite(breakdown.l_cross):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {iteration}: {breakdown}"
                )
            if velocity is not None:
                velocity_scale(velocity, config.momentum)
                velocity.add_scaled(grads, 1.0)
                params.add_scaled(velocity, -lr)
            else:
                params.add_scaled(grads, -lr)
            log_rows.append(
                {
                    "iter": iteration,
                    "lr": lr,
                    "l_csrpn_b": breakdown.l_csrpn_b,
                    "l_reg_b": breakdown.l_reg_b,
                    "l_obj_b": breakdown.l_obj_b,
                    "l_cls_b": breakdown.l_cls_b,
                    "l_cls_i": breakdown.l_cls_i,
                    "l_cross": breakdown.l_cross,
                }
            )
            iteration += 1
        if verbose:
            recent = log_rows[-iters_per_epoch:]
            mean_loss = sum(r["l_cross"] for r in recent) / len(recent)
            print(f"epoch {epoch + 1}/{config.total_epochs}: mean l_cross {mean_loss:.4f}")
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch{epoch + 1}.ckpt"
            det.save_checkpoint(params, path)
            checkpoints.append(path)
    return TrainResult(params, log_rows, checkpoints)


def velocity_scale(velocity: ModelParams, momentum: float) -> None:
    for name in det.PARAM_BLOCKS:
        blk = getattr(velocity, name)
        blk.weight *= momentum
        blk.bias *= momentum


def _mix_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def write_log_csv(log_rows: list[dict], path: str | Path) -> None:
    """Training log, one row per iteration, full float precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log_rows:
            writer.writerow(
                [row["iter"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]]
            )
