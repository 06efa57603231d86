"""Detection evaluation: per-category AP at IoU 0.5, split means, proposal table.

Detections are ranked globally by score; each one greedily matches the
highest-IoU not-yet-matched ground-truth box of its image (at or above the
IoU threshold).  Duplicates count as false positives.  AP is the area under
the precision-recall curve after applying the running-max precision envelope
(all-point interpolation).  Categories with no ground truth are excluded
from means rather than scored zero.

The proposal table treats proposals as class-agnostic detections and reports
AP and recall at several per-image budgets, overall and per supervision
split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import detector as det
from . import synthworld as sw
from . import taxonomy as tx
from .detector import DetectorConfig, DEFAULT_DETECTOR, ModelParams
from .geometry import Box, iou


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    box: Box
    score: float


@dataclass
class ProposalRow:
    count: int
    ap_all: float | None
    ap_box_level: float | None
    ap_image_level: float | None
    ar_all: float | None
    ar_box_level: float | None
    ar_image_level: float | None


@dataclass
class EvalReport:
    per_category_ap: dict[str, float | None]
    split_of: dict[str, str]
    map_all: float | None
    map_box_level: float | None
    map_image_level: float | None
    proposal_table: list[ProposalRow]
    metadata: dict[str, str]


def _match_flags(
    detections: Sequence[ScoredBox],
    gts_by_image: dict[str, list[Box]],
    iou_thresh: float,
) -> tuple[np.ndarray, int]:
    """True-positive flag per detection in rank order, plus the positive count."""
    npos = sum(len(v) for v in gts_by_image.values())
    order = np.argsort(-np.array([d.score for d in detections]), kind="stable")
    taken: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gts_by_image.items()}
    flags = np.zeros(len(detections), dtype=bool)
    for rank, idx in enumerate(order):
        d = detections[int(idx)]
        gts = gts_by_image.get(d.image_id, [])
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if taken[d.image_id][j]:
                continue
            v = iou(d.box, g)
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            taken[d.image_id][best_j] = True
            flags[rank] = True
    return flags, npos


def ap_from_flags(tp_flags: np.ndarray, npos: int) -> float:
    """Enveloped all-point AP from rank-ordered true-positive flags."""
    if npos <= 0:
        raise ValueError("npos must be positive")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / npos
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def average_precision(
    detections: Sequence[ScoredBox],
    gts_by_image: dict[str, list[Box]],
    iou_thresh: float = 0.5,
) -> float | None:
    """AP for one category, or None when the category has no ground truth."""
    flags, npos = _match_flags(detections, gts_by_image, iou_thresh)
    if npos == 0:
        return None
    return ap_from_flags(flags, npos)


def recall_at_budget(
    detections: Sequence[ScoredBox],
    gts_by_image: dict[str, list[Box]],
    iou_thresh: float = 0.5,
) -> float | None:
    """Fraction of ground-truth boxes matched by any detection in the set."""
    flags, npos = _match_flags(detections, gts_by_image, iou_thresh)
    if npos == 0:
        return None
    return float(flags.sum() / npos)


def mean_ap(
    per_category_ap: dict[str, float | None], split_of: dict[str, str]
) -> tuple[float | None, float | None, float | None]:
    """Unweighted means over evaluated categories: overall and per split.

    A split with no evaluated category is reported as None, not zero.
    """
    scored = {c: ap for c, ap in per_category_ap.items() if ap is not None}
    if not scored:
        raise ValueError("no category had ground truth to evaluate")

    def mean_over(names: list[str]) -> float | None:
        if not names:
            return None
        return math.fsum(scored[n] for n in names) / len(names)

    all_names = sorted(scored)
    box_names = [n for n in all_names if split_of.get(n) == "box"]
    img_names = [n for n in all_names if split_of.get(n) == "image"]
    return mean_over(all_names), mean_over(box_names), mean_over(img_names)


def _category_gt(
    images: Sequence[sw.AnnotatedImage], taxonomy: tx.Taxonomy, category: str
) -> dict[str, list[Box]]:
    """Ground truth boxes for a node: instances of any descendant leaf."""
    leaves = {taxonomy.leaf_order[i] for i in taxonomy.descendant_leaves[category]}
    out: dict[str, list[Box]] = {}
    for img in images:
        if not isinstance(img.supervision, sw.BoxSupervision):
            raise ValueError(f"evaluation image {img.id} lacks box annotations")
        boxes = [inst.box for inst in img.supervision.instances if inst.category in leaves]
        if boxes:
            out[img.id] = boxes
    return out


def _split_for_category(split_of: dict[str, str], category: str) -> str | None:
    return split_of.get(category)


def evaluate_model(
    params: ModelParams,
    taxonomy: tx.Taxonomy,
    images: Sequence[sw.AnnotatedImage],
    *,
    categories: Sequence[str] | None = None,
    split_of: dict[str, str] | None = None,
    det_config: DetectorConfig = DEFAULT_DETECTOR,
    detection_count: int = 300,
    iou_thresh: float = 0.5,
    proposal_counts: Sequence[int] | None = (10, 20, 50, 100, 200, 300),
) -> EvalReport:
    """Detect on every image and assemble the full report."""
    if categories is None:
        if params.class_names == taxonomy.leaf_order:
            categories = taxonomy.leaf_order
        else:
            categories = params.class_names
    split_of = dict(split_of or {})
    report_nodes = "leaf" if all(
        c in taxonomy.children and not taxonomy.children[c] for c in categories
    ) else "all"

    h, w = images[0].raster.shape[:2]
    anchors = det.anchors_for(w, h, det_config)

    by_category: dict[str, list[ScoredBox]] = {c: [] for c in categories}
    max_k = detection_count
    if proposal_counts:
        if list(proposal_counts) != sorted(proposal_counts):
            raise ValueError("proposal_counts must be ascending")
        max_k = max(max_k, max(proposal_counts))
    proposals_by_image: dict[str, list[det.Proposal]] = {}

    for img in images:
        feats, valid = det.featurize_boxes(img.raster, anchors, det_config.features)
        if proposal_counts:
            proposals_by_image[img.id] = det.propose(
                params, img.raster, max(proposal_counts), det_config,
                anchors=anchors, anchor_feats=feats, valid=valid,
            )
        for d in det.detect(
            params, taxonomy, img.raster, k=detection_count, report_nodes=report_nodes,
            config=det_config, anchors=anchors, anchor_feats=feats, valid=valid,
        ):
            if d.category in by_category:
                by_category[d.category].append(ScoredBox(img.id, d.box, d.score))

    per_category_ap: dict[str, float | None] = {}
    for c in categories:
        gt = _category_gt(images, taxonomy, c)
        per_category_ap[c] = average_precision(by_category[c], gt, iou_thresh)
    map_all, map_box, map_img = mean_ap(per_category_ap, split_of)

    table: list[ProposalRow] = []
    if proposal_counts:
        table = proposal_ap_ar(
            proposals_by_image, images, taxonomy, split_of, proposal_counts, iou_thresh
        )

    return EvalReport(
        per_category_ap=per_category_ap,
        split_of=split_of,
        map_all=map_all,
        map_box_level=map_box,
        map_image_level=map_img,
        proposal_table=table,
        metadata={
            "proposal_ranking": "global_objectness",
            "iou_thresh": repr(iou_thresh),
            "detection_count": str(detection_count),
        },
    )


def proposal_ap_ar(
    proposals_by_image: dict[str, list[det.Proposal]],
    images: Sequence[sw.AnnotatedImage],
    taxonomy: tx.Taxonomy,
    split_of: dict[str, str],
    counts: Sequence[int],
    iou_thresh: float = 0.5,
) -> list[ProposalRow]:
    """Class-agnostic proposal quality at several per-image budgets.

    For a split, ground truth is restricted to instances of that split's
    categories; proposals are scored by objectness and pooled across images.
    """
    if list(counts) != sorted(counts):
        raise ValueError("counts must be ascending")

    def gt_for(pred) -> dict[str, list[Box]]:
        out: dict[str, list[Box]] = {}
        for img in images:
            assert isinstance(img.supervision, sw.BoxSupervision)
            boxes = [inst.box for inst in img.supervision.instances if pred(inst.category)]
            if boxes:
                out[img.id] = boxes
        return out

    gt_sets = {
        "all": gt_for(lambda c: True),
        "box": gt_for(lambda c: _leaf_split(split_of, taxonomy, c) == "box"),
        "image": gt_for(lambda c: _leaf_split(split_of, taxonomy, c) == "image"),
    }

    rows: list[ProposalRow] = []
    for k in counts:
        pool = [
            ScoredBox(image_id, p.box, p.objectness)
            for image_id, props in proposals_by_image.items()
            for p in props[:k]
        ]
        metrics: dict[str, tuple[float | None, float | None]] = {}
        for name, gt in gt_sets.items():
            metrics[name] = (
                average_precision(pool, gt, iou_thresh),
                recall_at_budget(pool, gt, iou_thresh),
            )
        rows.append(
            ProposalRow(
                count=k,
                ap_all=metrics["all"][0],
                ap_box_level=metrics["box"][0],
                ap_image_level=metrics["image"][0],
                ar_all=metrics["all"][1],
                ar_box_level=metrics["box"][1],
                ar_image_level=metrics["image"][1],
            )
        )
    return rows


def _leaf_split(split_of: dict[str, str], taxonomy: tx.Taxonomy, leaf: str) -> str | None:
    """Supervision split of a leaf: its own entry, else the nearest labeled ancestor."""
    if leaf in split_of:
        return split_of[leaf]
    for anc in taxonomy.ancestors(leaf):
        if anc in split_of:
            return split_of[anc]
    return None


def _fmt(value: float | None) -> str:
    return "NA" if value is None else repr(float(value))


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """Write per_category_ap.csv, summary.csv and proposal_table.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "per_category_ap.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "split", "ap"])
        for c in sorted(report.per_category_ap):
            w.writerow([c, report.split_of.get(c, "NA"), _fmt(report.per_category_ap[c])])

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["map_all", _fmt(report.map_all)])
        w.writerow(["map_box_level", _fmt(report.map_box_level)])
        w.writerow(["map_image_level", _fmt(report.map_image_level)])
        w.writerow(["categories", str(len(report.per_category_ap))])
        for key in sorted(report.metadata):
            w.writerow([key, report.metadata[key]])

    with open(out / "proposal_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["proposals", "ap_all", "ap_box_level", "ap_image_level",
             "ar_all", "ar_box_level", "ar_image_level"]
        )
        for row in report.proposal_table:
            w.writerow(
                [row.count, _fmt(row.ap_all), _fmt(row.ap_box_level), _fmt(row.ap_image_level),
                 _fmt(row.ar_all), _fmt(row.ar_box_level), _fmt(row.ar_image_level)]
            )
