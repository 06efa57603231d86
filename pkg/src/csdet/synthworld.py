"""Synthetic shape world with two supervision regimes.

Scenes of colored shapes (filled ellipses, rectangles, triangles) are drawn
on a noisy gray background.  Training images come in two flavors: box-level
images publish every instance box with its leaf category, image-level images
publish a single category name and no boxes.  The full per-instance ground
truth of every image is kept in a separate hidden record so evaluation (and
fully-supervised reference runs) can see it without leaking it into training
annotations.

Dataset layout on disk:

  rasters/<id>.csrf        binary raster, magic "CSRF", u32 H W C, f32 data
  train_manifest.jsonl     one JSON object per image (public annotation)
  eval_manifest.jsonl      evaluation images, always box-annotated
  hidden_gt.jsonl          id -> full instance list (leaf categories)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import taxonomy as tx
from .geometry import Box, iou

RASTER_MAGIC = b"CSRF"

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


class ConfigInvalidError(ValueError):
    pass


class FormatError(ValueError):
    pass


class MissingRasterError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class AppearanceSpec:
    shape: str
    color_low: tuple[float, float, float]
    color_high: tuple[float, float, float]
    size_range: tuple[int, int]

    def __post_init__(self) -> None:
        if self.shape not in SHAPE_KINDS:
            raise ConfigInvalidError(f"unknown shape kind {self.shape!r}")
        lo, hi = self.size_range
        if not (1 <= lo <= hi):
            raise ConfigInvalidError(f"bad size range {self.size_range}")


@dataclass(frozen=True)
class Instance:
    box: Box
    category: str


@dataclass(frozen=True)
class BoxSupervision:
    instances: tuple[Instance, ...]


@dataclass(frozen=True)
class ImageSupervision:
    category: str


@dataclass
class AnnotatedImage:
    id: str
    raster: np.ndarray
    supervision: BoxSupervision | ImageSupervision


@dataclass(frozen=True)
class WorldConfig:
    edges: tuple[tuple[str, str], ...]
    appearance: dict[str, AppearanceSpec]
    box_level: tuple[str, ...]
    image_level: tuple[str, ...]
    train_box_images: int
    train_image_images: int
    eval_images: int
    objects_per_image: tuple[int, int] = (1, 3)
    raster_size: tuple[int, int] = (64, 64)
    background_noise: float = 0.05
    distractor_prob: float = 0.2
    max_instance_iou: float = 0.25
    seed: int = 7

    def taxonomy(self) -> tx.Taxonomy:
        return tx.build_taxonomy(list(self.edges))

    def validate(self) -> tx.Taxonomy:
        taxonomy = self.taxonomy()
        overlap = set(self.box_level) & set(self.image_level)
        if overlap:
            raise ConfigInvalidError(
                f"categories cannot be both box-level and image-level: {sorted(overlap)}"
            )
        for name in (*self.box_level, *self.image_level):
            if name not in taxonomy.children:
                raise ConfigInvalidError(f"supervision set names unknown category {name!r}")
        if not self.box_level:
            raise ConfigInvalidError("box_level categories must be nonempty")
        missing = [l for l in taxonomy.leaf_order if l not in self.appearance]
        if missing:
            raise ConfigInvalidError(f"no appearance spec for leaves: {missing}")
        h, w = self.raster_size
        if h < 32 or w < 32:
            raise ConfigInvalidError(f"raster must be at least 32x32, got {h}x{w}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigInvalidError(f"bad objects_per_image {self.objects_per_image}")
        return taxonomy

    def split_of(self) -> dict[str, str]:
        """Category name to supervision regime, for evaluation reporting."""
        out = {c: "box" for c in self.box_level}
        out.update({c: "image" for c in self.image_level})
        return out

    def to_json(self) -> str:
        doc = {
            "edges": [list(e) for e in self.edges],
            "appearance": {
                name: {
                    "shape": spec.shape,
                    "color_low": list(spec.color_low),
                    "color_high": list(spec.color_high),
                    "size_range": list(spec.size_range),
                }
                for name, spec in self.appearance.items()
            },
            "box_level": list(self.box_level),
            "image_level": list(self.image_level),
            "train_box_images": self.train_box_images,
            "train_image_images": self.train_image_images,
            "eval_images": self.eval_images,
            "objects_per_image": list(self.objects_per_image),
            "raster_size": list(self.raster_size),
            "background_noise": self.background_noise,
            "distractor_prob": self.distractor_prob,
            "max_instance_iou": self.max_instance_iou,
            "seed": self.seed,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "WorldConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigInvalidError(f"world config is not valid JSON: {e}") from e
        try:
            appearance = {
                name: AppearanceSpec(
                    shape=spec["shape"],
                    color_low=tuple(spec["color_low"]),
                    color_high=tuple(spec["color_high"]),
                    size_range=tuple(spec["size_range"]),
                )
                for name, spec in doc["appearance"].items()
            }
            return cls(
                edges=tuple((c, p) for c, p in doc["edges"]),
                appearance=appearance,
                box_level=tuple(doc["box_level"]),
                image_level=tuple(doc["image_level"]),
                train_box_images=int(doc["train_box_images"]),
                train_image_images=int(doc["train_image_images"]),
                eval_images=int(doc["eval_images"]),
                objects_per_image=tuple(doc.get("objects_per_image", (1, 3))),
                raster_size=tuple(doc.get("raster_size", (64, 64))),
                background_noise=float(doc.get("background_noise", 0.05)),
                distractor_prob=float(doc.get("distractor_prob", 0.2)),
                max_instance_iou=float(doc.get("max_instance_iou", 0.25)),
                seed=int(doc.get("seed", 7)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigInvalidError(f"world config field error: {e}") from e


@dataclass
class GeneratedDataset:
    train: list[AnnotatedImage]
    eval_set: list[AnnotatedImage]
    hidden_gt: dict[str, tuple[Instance, ...]]


def render_image(
    scene: Sequence[tuple[str, Box]],
    appearance: dict[str, AppearanceSpec],
    raster_size: tuple[int, int],
    seed: int,
    background_noise: float = 0.05,
) -> np.ndarray:
    """Draw a scene onto a fresh noisy background; later objects occlude earlier.

    Scene entries are (leaf category, box); the shape fills its box.
    """
    h, w = raster_size
    rng = np.random.default_rng(seed)
    raster = rng.uniform(
        0.5 - background_noise, 0.5 + background_noise, size=(h, w, 3)
    ).astype(np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    cx_pix = xs + 0.5
    cy_pix = ys + 0.5
    for category, box in scene:
        spec = appearance[category]
        color = rng.uniform(spec.color_low, spec.color_high).astype(np.float32)
        mask = _shape_mask(spec.shape, box, cx_pix, cy_pix)
        raster[mask] = color
    return raster


def _shape_mask(shape: str, box: Box, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    if shape == "rectangle":
        return (px >= box.x1) & (px <= box.x2) & (py >= box.y1) & (py <= box.y2)
    if shape == "ellipse":
        cx, cy = box.center
        rx = 0.5 * box.width
        ry = 0.5 * box.height
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    if shape == "triangle":
        # Apex at the top-center, base along the bottom edge of the box.
        cx = 0.5 * (box.x1 + box.x2)
        inside_y = (py >= box.y1) & (py <= box.y2)
        t = np.clip((py - box.y1) / box.height, 0.0, 1.0)
        half = 0.5 * box.width * t
        return inside_y & (np.abs(px - cx) <= half)
    raise ConfigInvalidError(f"unknown shape kind {shape!r}")


def _sample_box(
    rng: np.random.Generator, spec: AppearanceSpec, w: int, h: int
) -> Box:
    lo, hi = spec.size_range
    bw = int(rng.integers(lo, hi + 1))
    bh = int(rng.integers(lo, hi + 1))
    bw = min(bw, w - 2)
    bh = min(bh, h - 2)
    x1 = int(rng.integers(1, w - bw))
    y1 = int(rng.integers(1, h - bh))
    return Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))


def _leaf_for(rng: np.random.Generator, taxonomy: tx.Taxonomy, category: str) -> str:
    """Concrete leaf to render for a category; ancestors pick a descendant."""
    if not taxonomy.children[category]:
        return category
    choices = sorted(taxonomy.descendant_leaves[category])
    return taxonomy.leaf_order[choices[int(rng.integers(0, len(choices)))]]


def _sample_scene(
    rng: np.random.Generator,
    config: WorldConfig,
    taxonomy: tx.Taxonomy,
    primary: str,
    others_pool: Sequence[str],
    allow_distractors: bool,
) -> list[Instance]:
    h, w = config.raster_size
    lo, hi = config.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    instances: list[Instance] = []
    first_leaf = _leaf_for(rng, taxonomy, primary)
    instances.append(Instance(_sample_box(rng, config.appearance[first_leaf], w, h), first_leaf))
    for _ in range(n - 1):
        if allow_distractors and rng.random() < config.distractor_prob:
            pool = [l for l in taxonomy.leaf_order if l != first_leaf]
            leaf = pool[int(rng.integers(0, len(pool)))]
        else:
            cat = others_pool[int(rng.integers(0, len(others_pool)))]
            leaf = _leaf_for(rng, taxonomy, cat)
        spec = config.appearance[leaf]
        placed = None
        for _ in range(12):
            cand = _sample_box(rng, spec, w, h)
            if all(iou(cand, inst.box) <= config.max_instance_iou for inst in instances):
                placed = cand
                break
        if placed is not None:
            instances.append(Instance(placed, leaf))
    return instances


def generate_dataset(config: WorldConfig) -> GeneratedDataset:
    """Render the full train/eval corpus; deterministic for a given seed."""
    taxonomy = config.validate()
    hidden: dict[str, tuple[Instance, ...]] = {}
    train: list[AnnotatedImage] = []

    def build_image(
        image_id: str,
        split_code: int,
        index: int,
        primary: str,
        others_pool: Sequence[str],
        allow_distractors: bool,
    ) -> tuple[list[Instance], np.ndarray]:
        ss = np.random.SeedSequence((config.seed, split_code, index))
        rng = np.random.default_rng(ss)
        instances = _sample_scene(rng, config, taxonomy, primary, others_pool, allow_distractors)
        render_seed = int(rng.integers(0, 2**31))
        raster = render_image(
            [(inst.category, inst.box) for inst in instances],
            config.appearance,
            config.raster_size,
            render_seed,
            config.background_noise,
        )
        hidden[image_id] = tuple(instances)
        return instances, raster

    box_cats = sorted(config.box_level)
    for i in range(config.train_box_images):
        image_id = f"train_box_{i:05d}"
        primary = box_cats[i % len(box_cats)]
        instances, raster = build_image(image_id, 1, i, primary, box_cats, False)
        train.append(AnnotatedImage(image_id, raster, BoxSupervision(tuple(instances))))

    image_cats = sorted(config.image_level)
    for i in range(config.train_image_images if image_cats else 0):
        image_id = f"train_img_{i:05d}"
        declared = image_cats[i % len(image_cats)]
        _, raster = build_image(image_id, 2, i, declared, [declared], True)
        train.append(AnnotatedImage(image_id, raster, ImageSupervision(declared)))

    eval_cats = sorted(set(config.box_level) | set(config.image_level))
    eval_set: list[AnnotatedImage] = []
    for i in range(config.eval_images):
        image_id = f"eval_{i:05d}"
        primary = eval_cats[i % len(eval_cats)]
        instances, raster = build_image(image_id, 3, i, primary, eval_cats, False)
        eval_set.append(AnnotatedImage(image_id, raster, BoxSupervision(tuple(instances))))

    return GeneratedDataset(train, eval_set, hidden)


def reveal_supervision(
    images: Sequence[AnnotatedImage], hidden_gt: dict[str, tuple[Instance, ...]]
) -> list[AnnotatedImage]:
    """Swap image-level annotations for the hidden boxes.

    Used to build the fully-supervised reference training set from the same
    rendered images.
    """
    out = []
    for img in images:
        if isinstance(img.supervision, ImageSupervision):
            out.append(AnnotatedImage(img.id, img.raster, BoxSupervision(hidden_gt[img.id])))
        else:
            out.append(img)
    return out


def write_raster(path: str | Path, raster: np.ndarray) -> None:
    if raster.ndim != 3:
        raise ValueError(f"raster must be 3-d, got shape {raster.shape}")
    h, w, c = raster.shape
    payload = RASTER_MAGIC + struct.pack("<III", h, w, c)
    payload += np.ascontiguousarray(raster, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_raster(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingRasterError(f"raster file not found: {p}")
    raw = p.read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise FormatError(f"{p}: bad raster magic {raw[:4]!r}")
    h, w, c = struct.unpack_from("<III", raw, 4)
    expect = 16 + h * w * c * 4
    if len(raw) != expect:
        raise FormatError(f"{p}: expected {expect} bytes for {h}x{w}x{c}, got {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, c).copy()


def _record_for(image: AnnotatedImage, raster_path: str) -> dict:
    if isinstance(image.supervision, BoxSupervision):
        return {
            "id": image.id,
            "raster_path": raster_path,
            "supervision": "box",
            "boxes": [
                {"box": inst.box.as_list(), "category": inst.category}
                for inst in image.supervision.instances
            ],
        }
    return {
        "id": image.id,
        "raster_path": raster_path,
        "supervision": "image",
        "label": image.supervision.category,
    }


def save_dataset(
    train: Sequence[AnnotatedImage],
    eval_set: Sequence[AnnotatedImage],
    hidden_gt: dict[str, tuple[Instance, ...]],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write rasters, both manifests, and the hidden ground truth.

    Returns the (train manifest, eval manifest) paths.
    """
    out = Path(out_dir)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    for img in (*train, *eval_set):
        write_raster(out / "rasters" / f"{img.id}.csrf", img.raster)

    train_manifest = out / "train_manifest.jsonl"
    eval_manifest = out / "eval_manifest.jsonl"
    for path, images in ((train_manifest, train), (eval_manifest, eval_set)):
        lines = [
            json.dumps(_record_for(img, f"rasters/{img.id}.csrf")) for img in images
        ]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    gt_lines = [
        json.dumps(
            {
                "id": image_id,
                "boxes": [
                    {"box": inst.box.as_list(), "category": inst.category}
                    for inst in instances
                ],
            }
        )
        for image_id, instances in hidden_gt.items()
    ]
    (out / "hidden_gt.jsonl").write_text(
        "\n".join(gt_lines) + ("\n" if gt_lines else ""), encoding="utf-8"
    )
    return train_manifest, eval_manifest


def _parse_instances(doc: dict, where: str) -> tuple[Instance, ...]:
    out = []
    for j, entry in enumerate(doc["boxes"]):
        try:
            coords = entry["box"]
            if len(coords) != 4:
                raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
            out.append(Instance(Box(*(float(v) for v in coords)), entry["category"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{where}: bad box entry {j}: {e}") from e
    return tuple(out)


def load_dataset(manifest_path: str | Path) -> list[AnnotatedImage]:
    """Read a manifest; raster paths resolve relative to the manifest."""
    manifest = Path(manifest_path)
    base = manifest.parent
    images: list[AnnotatedImage] = []
    text = manifest.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{manifest}:{lineno}"
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{where}: invalid JSON: {e}") from e
        try:
            image_id = doc["id"]
            raster_path = doc["raster_path"]
            supervision_kind = doc["supervision"]
        except KeyError as e:
            raise FormatError(f"{where}: missing field {e}") from e
        raster = read_raster(base / raster_path)
        h, w = raster.shape[:2]
        if supervision_kind == "box":
            if "boxes" not in doc:
                raise FormatError(f"{where}: box record without 'boxes'")
            instances = _parse_instances(doc, where)
            for inst in instances:
                if inst.box.x1 < 0 or inst.box.y1 < 0 or inst.box.x2 > w or inst.box.y2 > h:
                    raise FormatError(f"{where}: box {inst.box} outside {w}x{h} raster")
            supervision: BoxSupervision | ImageSupervision = BoxSupervision(instances)
        elif supervision_kind == "image":
            if "boxes" in doc:
                raise FormatError(f"{where}: image-level record must not carry boxes")
            try:
                supervision = ImageSupervision(doc["label"])
            except KeyError as e:
                raise FormatError(f"{where}: missing field {e}") from e
        else:
            raise FormatError(f"{where}: unknown supervision {supervision_kind!r}")
        images.append(AnnotatedImage(image_id, raster, supervision))
    return images


def load_hidden_gt(path: str | Path) -> dict[str, tuple[Instance, ...]]:
    out: dict[str, tuple[Instance, ...]] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            doc = json.loads(line)
            out[doc["id"]] = _parse_instances(doc, where)
        except (json.JSONDecodeError, KeyError) as e:
            raise FormatError(f"{where}: {e}") from e
    return out


# All bands sit on the dark side of the 0.5 gray background with a clear
# luminance margin, so shapes are visible to the luminance grid and the
# deviation from background always has one sign (a linear head can localize
# any color with a single weight vector).  The channel mixes stay far apart
# so color identity survives in the mean-intensity features.
_COLOR_BANDS = {
    "ruby": ((0.70, 0.05, 0.05), (0.95, 0.25, 0.25)),
    "amber": ((0.45, 0.28, 0.05), (0.65, 0.45, 0.20)),
    "jade": ((0.05, 0.40, 0.05), (0.20, 0.60, 0.20)),
    "azure": ((0.05, 0.05, 0.70), (0.25, 0.25, 0.95)),
}

_SHAPE_OF = {"disc": "ellipse", "block": "rectangle", "wedge": "triangle"}


def demo_world_config(
    seed: int = 7,
    *,
    train_box_images: int = 120,
    train_image_images: int = 120,
    eval_images: int = 96,
    ancestor_image_pools: tuple[str, ...] = (),
) -> WorldConfig:
    """Built-in 12-leaf world: 4 colors x 3 shape families.

    Six leaves are box-annotated and six are image-annotated, with each color
    and shape family represented on both sides.  ancestor_image_pools may add
    internal nodes ("disc", "block", "wedge") as extra image-level pools.
    """
    edges: list[tuple[str, str]] = []
    appearance: dict[str, AppearanceSpec] = {}
    for family in ("disc", "block", "wedge"):
        edges.append((family, "object"))
        for color in ("ruby", "amber", "jade", "azure"):
            leaf = f"{color}_{family}"
            edges.append((leaf, family))
            lo, hi = _COLOR_BANDS[color]
            appearance[leaf] = AppearanceSpec(
                shape=_SHAPE_OF[family], color_low=lo, color_high=hi, size_range=(14, 30)
            )
    box_level = (
        "ruby_disc", "jade_disc", "amber_block", "azure_block", "ruby_wedge", "jade_wedge",
    )
    image_level = (
        "amber_disc", "azure_disc", "ruby_block", "jade_block", "amber_wedge", "azure_wedge",
    ) + tuple(ancestor_image_pools)
    return WorldConfig(
        edges=tuple(edges),
        appearance=appearance,
        box_level=box_level,
        image_level=image_level,
        train_box_images=train_box_images,
        train_image_images=train_image_images,
        eval_images=eval_images,
        seed=seed,
    )
