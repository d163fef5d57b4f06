"""Procedural synthetic-shapes dataset, COCO-like manifest I/O and shot sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from skimage.draw import polygon as draw_polygon

from .core import BinaryMask, Box, InstanceAnnotation, RLEMask, mask_to_box, rle_decode, rle_encode

MANIFEST_SCHEMA_VERSION = 1

SHAPE_VOCABULARY = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "star",
    "diamond",
    "frame",
    "hexagon",
    "ellipse",
    "semicircle",
    "hourglass",
)


class ManifestError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSplit:
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base_ids", tuple(int(i) for i in self.base_ids))
        object.__setattr__(self, "novel_ids", tuple(int(i) for i in self.novel_ids))
        overlap = set(self.base_ids) & set(self.novel_ids)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        if len(set(self.base_ids)) != len(self.base_ids) or len(set(self.novel_ids)) != len(self.novel_ids):
            raise ValueError("class ids repeated within a split")

    @property
    def all_ids(self) -> tuple[int, ...]:
        return self.base_ids + self.novel_ids

    def require_few_shot(self) -> None:
        if not self.base_ids or not self.novel_ids:
            raise ValueError("few-shot experiments need non-empty base and novel class sets")

    @classmethod
    def first_n(cls, num_base: int, num_novel: int) -> "ClassSplit":
        """Vocabulary classes ``1..num_base`` as base, the next ``num_novel`` as novel."""
        return cls(tuple(range(1, num_base + 1)), tuple(range(num_base + 1, num_base + num_novel + 1)))


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    height: int
    width: int
    file_name: str


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: int
    annotation: InstanceAnnotation

    @property
    def class_id(self) -> int:
        return self.annotation.class_id

    @property
    def instance_id(self) -> int:
        return self.annotation.instance_id


@dataclass(frozen=True)
class DatasetManifest:
    class_table: Mapping[int, str]
    images: tuple[ImageRecord, ...]
    annotations: tuple[AnnotationRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_table", dict(sorted((int(k), str(v)) for k, v in self.class_table.items())))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        image_ids = set()
        for rec in self.images:
            if rec.image_id in image_ids:
                raise ManifestError(f"duplicate image id {rec.image_id}")
            image_ids.add(rec.image_id)
        for ann in self.annotations:
            if ann.image_id not in image_ids:
                raise ManifestError(
                    f"annotation {ann.instance_id} references absent image_id {ann.image_id}"
                )
            if ann.class_id not in self.class_table:
                raise ManifestError(
                    f"annotation {ann.instance_id} references unknown class_id {ann.class_id}"
                )

    def image(self, image_id: int) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> list[InstanceAnnotation]:
        return [a.annotation for a in self.annotations if a.image_id == image_id]

    def by_image(self) -> dict[int, list[InstanceAnnotation]]:
        out: dict[int, list[InstanceAnnotation]] = {rec.image_id: [] for rec in self.images}
        for a in self.annotations:
            out[a.image_id].append(a.annotation)
        return out

    def class_ids_present(self) -> set[int]:
        return {a.class_id for a in self.annotations}

    def instances_of(self, class_id: int) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.class_id == class_id and not a.annotation.ignore]


@dataclass
class ShapesDataset:
    """A manifest together with its decoded ``HxWx3`` uint8 images."""

    manifest: DatasetManifest
    images: dict[int, np.ndarray] = field(repr=False)

    def image(self, image_id: int) -> np.ndarray:
        return self.images[image_id]

    def subset(self, manifest: DatasetManifest) -> "ShapesDataset":
        return ShapesDataset(manifest, {r.image_id: self.images[r.image_id] for r in manifest.images})


@dataclass(frozen=True)
class ShotSet:
    class_id: int
    shots: tuple[AnnotationRecord, ...]
    seed: int

    def __post_init__(self):
        for shot in self.shots:
            if shot.class_id != self.class_id:
                raise SamplingError(f"shot of class {shot.class_id} in shot set for class {self.class_id}")
        ids = [s.instance_id for s in self.shots]
        if len(set(ids)) != len(ids):
            raise SamplingError("shot set contains repeated instances")

    @property
    def k(self) -> int:
        return len(self.shots)


# ---------------------------------------------------------------------------
# rendering


def _regular_polygon(cx, cy, rx, ry, n, phase=-math.pi / 2):
    t = phase + 2 * math.pi * np.arange(n) / n
    return cx + rx * np.cos(t), cy + ry * np.sin(t)


def _poly(shape, xs, ys):
    # skimage samples pixel centres at integer coordinates; shift by half a pixel
    rr, cc = draw_polygon(np.asarray(ys) - 0.5, np.asarray(xs) - 0.5, shape=shape)
    m = np.zeros(shape, dtype=bool)
    m[rr, cc] = True
    return m


def render_shape(name: str, shape: tuple[int, int], cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    """Boolean mask of one vocabulary shape with centre ``(cx, cy)`` and half-extents ``(rx, ry)``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    px = (xx + 0.5 - cx) / rx
    py = (yy + 0.5 - cy) / ry
    r2 = px**2 + py**2
    if name == "circle":
        return r2 <= 1.0
    if name == "ellipse":
        return px**2 + (py * 2.0) ** 2 <= 1.0
    if name == "ring":
        return (r2 <= 1.0) & (r2 >= 0.5**2)
    if name == "semicircle":
        return (r2 <= 1.0) & (py >= -0.25)
    if name == "square":
        return (np.abs(px) <= 0.9) & (np.abs(py) <= 0.9)
    if name == "frame":
        outer = (np.abs(px) <= 0.9) & (np.abs(py) <= 0.9)
        inner = (np.abs(px) <= 0.5) & (np.abs(py) <= 0.5)
        return outer & ~inner
    if name == "cross":
        return ((np.abs(px) <= 0.3) & (np.abs(py) <= 1.0)) | ((np.abs(py) <= 0.3) & (np.abs(px) <= 1.0))
    if name == "diamond":
        return np.abs(px) + np.abs(py) <= 1.0
    if name == "hourglass":
        return (np.abs(px) <= np.abs(py) + 0.1) & (np.abs(py) <= 0.95)
    if name == "triangle":
        return _poly(shape, [cx, cx + rx, cx - rx], [cy - ry, cy + ry, cy + ry])
    if name == "hexagon":
        xs, ys = _regular_polygon(cx, cy, rx, ry, 6, phase=0.0)
        return _poly(shape, xs, ys)
    if name == "star":
        t = -math.pi / 2 + math.pi * np.arange(10) / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
        return _poly(shape, cx + rx * rad * np.cos(t), cy + ry * rad * np.sin(t))
    raise ValueError(f"unknown shape {name!r}")


def _render_image(rng: np.random.Generator, size: int, classes: Sequence[int], class_table: Mapping[int, str]):
    base_level = rng.uniform(10, 90)
    img = np.full((size, size, 3), base_level, dtype=np.float64)
    img += rng.normal(0, 8, size=img.shape)
    placed: list[tuple[int, Box, np.ndarray]] = []
    for class_id in classes:
        for _ in range(50):
            r = rng.uniform(0.11, 0.2) * size
            rx = r * rng.uniform(0.9, 1.1)
            ry = r * rng.uniform(0.9, 1.1)
            cx = rng.uniform(rx + 1, size - rx - 1)
            cy = rng.uniform(ry + 1, size - ry - 1)
            m = render_shape(class_table[class_id], (size, size), cx, cy, rx, ry)
            if m.sum() < 12:
                continue
            box = mask_to_box(BinaryMask(m))
            grown = Box(box.x1 - 2, box.y1 - 2, box.x2 + 2, box.y2 + 2)
            if any(_overlaps(grown, other) for _, other, _ in placed):
                continue
            placed.append((class_id, box, m))
            break
    for class_id, box, m in placed:
        color = rng.uniform(130, 255, size=3)
        shade = color[None, :] * rng.uniform(0.85, 1.0, size=(int(m.sum()), 1))
        img[m] = shade
    img += rng.normal(0, 4, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), placed


def _overlaps(a: Box, b: Box) -> bool:
    return min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1)


def generate_dataset(
    num_images: int,
    split: ClassSplit,
    seed: int,
    image_size: int = 64,
    *,
    max_instances: int = 4,
    base_only_fraction: float = 0.0,
    first_image_id: int = 0,
    first_instance_id: int = 0,
) -> ShapesDataset:
    """Render ``num_images`` images of 1..``max_instances`` distinct-class shapes.

    ``base_only_fraction`` of the images draw their classes from the base set
    only; the rest draw from base and novel alike.
    """
    class_ids = split.all_ids
    if len(class_ids) < 6:
        raise ValueError(f"need at least 6 classes, got {len(class_ids)}")
    if max(class_ids) > len(SHAPE_VOCABULARY) or min(class_ids) < 1:
        raise ValueError(
            f"class ids must lie in 1..{len(SHAPE_VOCABULARY)} (shape vocabulary size), got {sorted(class_ids)}"
        )
    if image_size < 64:
        raise ValueError(f"image_size must be >= 64, got {image_size}")
    if not 1 <= max_instances <= 6:
        raise ValueError("max_instances must be in 1..6")
    class_table = {i: SHAPE_VOCABULARY[i - 1] for i in sorted(class_ids)}
    rng = np.random.default_rng(seed)
    records, anns, pixels = [], [], {}
    next_instance = first_instance_id
    for n in range(num_images):
        image_id = first_image_id + n
        pool = split.base_ids if rng.random() < base_only_fraction else class_ids
        count = int(rng.integers(1, min(max_instances, len(pool)) + 1))
        chosen = [int(c) for c in rng.choice(pool, size=count, replace=False)]
        img, placed = _render_image(rng, image_size, chosen, class_table)
        name = f"images/{image_id:06d}.png"
        records.append(ImageRecord(image_id, image_size, image_size, name))
        pixels[image_id] = img
        for class_id, box, m in placed:
            ann = InstanceAnnotation(class_id, box, BinaryMask(m), instance_id=next_instance)
            anns.append(AnnotationRecord(image_id, ann))
            next_instance += 1
    return ShapesDataset(DatasetManifest(class_table, tuple(records), tuple(anns)), pixels)


# ---------------------------------------------------------------------------
# manifest I/O


def manifest_to_dict(m: DatasetManifest) -> dict:
    anns = []
    for rec in m.annotations:
        a = rec.annotation
        entry = {
            "id": a.instance_id,
            "image_id": rec.image_id,
            "category_id": a.class_id,
            "bbox": [a.box.x1, a.box.y1, a.box.width, a.box.height],
            "iscrowd": 0,
            "ignore": bool(a.ignore),
        }
        if a.mask is not None:
            r = rle_encode(a.mask)
            entry["segmentation"] = {"size": [r.height, r.width], "counts": list(r.counts)}
        anns.append(entry)
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "classes": [{"id": k, "name": v} for k, v in m.class_table.items()],
        "images": [
            {"id": r.image_id, "height": r.height, "width": r.width, "file_name": r.file_name}
            for r in m.images
        ],
        "annotations": anns,
    }


def manifest_from_dict(doc: Mapping) -> DatasetManifest:
    try:
        classes = {int(c["id"]): str(c["name"]) for c in doc["classes"]}
        images = []
        for r in doc["images"]:
            if not r.get("file_name"):
                raise ManifestError(f"image {r.get('id')} has no file_name")
            images.append(ImageRecord(int(r["id"]), int(r["height"]), int(r["width"]), str(r["file_name"])))
    except KeyError as exc:
        raise ManifestError(f"manifest record missing field {exc}") from None
    known_images = {r.image_id: r for r in images}
    anns = []
    for i, a in enumerate(doc["annotations"]):
        ident = a.get("id", i)
        if a["image_id"] not in known_images:
            raise ManifestError(f"annotation {ident} references absent image_id {a['image_id']}")
        if a["category_id"] not in classes:
            raise ManifestError(f"annotation {ident} references unknown class_id {a['category_id']}")
        x, y, bw, bh = (float(v) for v in a["bbox"])
        mask = None
        seg = a.get("segmentation")
        if seg is not None:
            h, w = seg["size"]
            mask = rle_decode(RLEMask(int(h), int(w), tuple(seg["counts"])))
        ann = InstanceAnnotation(
            int(a["category_id"]), Box(x, y, x + bw, y + bh), mask, bool(a.get("ignore", False)), int(ident)
        )
        anns.append(AnnotationRecord(int(a["image_id"]), ann))
    return DatasetManifest(classes, tuple(images), tuple(anns))


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(m)), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("schema_version", MANIFEST_SCHEMA_VERSION)
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema_version {version}")
    return manifest_from_dict(doc)


def save_dataset(ds: ShapesDataset, directory, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    for rec in ds.manifest.images:
        target = directory / rec.file_name
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(ds.images[rec.image_id]).save(target)
    out = directory / name
    save_manifest(ds.manifest, out)
    return out


def load_dataset(manifest_path) -> ShapesDataset:
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    pixels = {}
    for rec in m.images:
        src = manifest_path.parent / rec.file_name
        if not src.exists():
            raise ManifestError(f"image {rec.image_id}: missing image file {src}")
        arr = np.asarray(Image.open(src).convert("RGB"))
        if arr.shape[:2] != (rec.height, rec.width):
            raise ManifestError(f"image {rec.image_id}: file is {arr.shape[:2]}, manifest says {(rec.height, rec.width)}")
        pixels[rec.image_id] = arr
    return ShapesDataset(m, pixels)


# ---------------------------------------------------------------------------
# sampling


def sample_shots(m: DatasetManifest, class_ids: Iterable[int], k: int, seed: int) -> list[ShotSet]:
    if k < 1:
        raise SamplingError(f"K must be >= 1, got {k}")
    out = []
    for class_id in class_ids:
        candidates = sorted(m.instances_of(class_id), key=lambda a: a.instance_id)
        if len(candidates) < k:
            raise SamplingError(
                f"class {class_id} has {len(candidates)} instances available, {k} requested"
            )
        # per-class stream: shots of one class do not depend on which other classes were requested
        rng = np.random.default_rng([seed, class_id])
        picks = rng.choice(len(candidates), size=k, replace=False)
        out.append(ShotSet(class_id, tuple(candidates[i] for i in sorted(picks)), seed))
    return out


def restrict_to_classes(m: DatasetManifest, class_ids: Iterable[int], policy: str = "drop_images") -> DatasetManifest:
    """Keep only annotations of ``class_ids``.

    ``drop_images`` removes every image holding another class, so those
    objects are never presented as background; ``strip`` deletes the foreign
    annotations and keeps the image.
    """
    keep = set(class_ids)
    if policy == "drop_images":
        bad = {a.image_id for a in m.annotations if a.class_id not in keep}
        images = tuple(r for r in m.images if r.image_id not in bad)
        anns = tuple(a for a in m.annotations if a.image_id not in bad)
    elif policy == "strip":
        images = m.images
        anns = tuple(a for a in m.annotations if a.class_id in keep)
    else:
        raise ValueError(f"unknown restriction policy {policy!r}")
    return DatasetManifest(m.class_table, images, anns)


def build_balanced_finetune_set(
    m: DatasetManifest, split: ClassSplit, k: int, seed: int, *, include_novel: bool = True
) -> DatasetManifest:
    """K annotated instances per class; other instances on chosen images become ignore regions."""
    class_ids = split.all_ids if include_novel else split.base_ids
    chosen = set()
    for shot_set in sample_shots(m, class_ids, k, seed):
        chosen.update(s.instance_id for s in shot_set.shots)
    image_ids = {a.image_id for a in m.annotations if a.instance_id in chosen}
    anns = []
    for a in m.annotations:
        if a.image_id not in image_ids:
            continue
        if a.instance_id in chosen:
            anns.append(a)
        else:
            anns.append(AnnotationRecord(a.image_id, replace(a.annotation, ignore=True)))
    images = tuple(r for r in m.images if r.image_id in image_ids)
    return DatasetManifest(m.class_table, images, tuple(anns))


def shots_to_dict(shot_sets: Sequence[ShotSet], manifest: Optional[DatasetManifest] = None) -> dict:
    """Self-contained shot file: enough to imprint without the source manifest."""
    out = []
    for s in shot_sets:
        for rec in s.shots:
            a = rec.annotation
            entry = {
                "class_id": s.class_id,
                "seed": s.seed,
                "image_id": rec.image_id,
                "instance_id": a.instance_id,
                "box": a.box.as_list(),
            }
            if manifest is not None:
                entry["file_name"] = manifest.image(rec.image_id).file_name
            out.append(entry)
    return {"schema_version": MANIFEST_SCHEMA_VERSION, "shots": out}


def shots_from_dict(doc: Mapping) -> list[ShotSet]:
    grouped: dict[int, list] = {}
    seeds: dict[int, int] = {}
    for e in doc["shots"]:
        cid = int(e["class_id"])
        ann = InstanceAnnotation(cid, Box.from_seq(e["box"]), None, instance_id=int(e["instance_id"]))
        grouped.setdefault(cid, []).append(AnnotationRecord(int(e["image_id"]), ann))
        seeds[cid] = int(e.get("seed", 0))
    return [ShotSet(cid, tuple(recs), seeds[cid]) for cid, recs in grouped.items()]
