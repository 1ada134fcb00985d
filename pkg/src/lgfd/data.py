"""Synthetic low-contrast infrared scenes, COCO/PGM I/O and batching."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, iou
from .captions import CaptionRecord, HashEncoder, TextEncoder, caption_record
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str  # "ellipse" or "rect"
    width: Tuple[int, int]
    height: Tuple[int, int]
    delta: Tuple[float, float]


DEFAULT_CATEGORIES = (
    CategorySpec("person", "ellipse", (5, 10), (12, 26), (0.14, 0.28)),
    CategorySpec("car", "rect", (14, 34), (8, 16), (0.14, 0.28)),
    CategorySpec("bicycle", "ellipse", (6, 12), (6, 12), (0.14, 0.28)),
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    categories: Tuple[CategorySpec, ...] = DEFAULT_CATEGORIES
    objects_per_image: Tuple[int, int] = (1, 6)
    background: float = 0.35
    noise_amplitude: float = 0.1
    seed: int = 42
    max_iou: float = 0.3
    retries: int = 20

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"objects_per_image must be an ordered non-negative range, got {self.objects_per_image}")
        if self.noise_amplitude <= 0:
            raise ValueError("noise_amplitude must be positive")
        for cat in self.categories:
            if cat.shape not in ("ellipse", "rect"):
                raise ValueError(f"category {cat.name}: unknown shape {cat.shape!r}")
            if max(cat.delta) / self.noise_amplitude > 3.0:
                raise ValueError(
                    f"category {cat.name}: intensity delta {max(cat.delta)} exceeds 3x the noise amplitude "
                    f"{self.noise_amplitude}; scenes would no longer be low contrast"
                )
            if max(cat.width) > self.image_size or max(cat.height) > self.image_size:
                raise ValueError(f"category {cat.name}: object size exceeds image_size {self.image_size}")

    @property
    def category_names(self) -> List[str]:
        return [c.name for c in self.categories]


@dataclass
class AnnotatedImage:
    """Grayscale image with values in [0, 1], shape (1, H, W), plus its boxes."""

    pixels: np.ndarray
    boxes: List[BBox]
    image_id: int

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class Dataset:
    images: List[AnnotatedImage]
    categories: List[str]
    dropped_boxes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def __iter__(self):
        return iter(self.images)


# ------------------------------------------------------------------ synthesis
def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    """Separable mean filter with edge replication."""
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius + 1, radius)
        c = np.cumsum(np.pad(a, pad, mode="edge"), axis=axis)
        n = a.shape[axis]
        hi = np.take(c, np.arange(2 * radius + 1, 2 * radius + 1 + n), axis=axis)
        lo = np.take(c, np.arange(0, n), axis=axis)
        a = (hi - lo) / (2 * radius + 1)
    return a


def _rngs(spec: SceneSpec, index: int):
    bg_seq, obj_seq = np.random.SeedSequence([spec.seed, index]).spawn(2)
    return np.random.default_rng(bg_seq), np.random.default_rng(obj_seq)


def scene_background(spec: SceneSpec, index: int) -> np.ndarray:
    """Smoothed-noise background of scene ``index`` (before objects and clamping)."""
    bg_rng, _ = _rngs(spec, index)
    n = spec.image_size
    noise = bg_rng.uniform(-1.0, 1.0, (n, n))
    for _ in range(3):
        noise = _box_blur(noise, 2)
    noise /= np.abs(noise).max()
    return spec.background + spec.noise_amplitude * noise


def _shape_mask(cat: CategorySpec, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if cat.shape == "rect":
        mask[y0:y0 + h, x0:x0 + w] = True
        return mask
    rows = np.arange(y0, y0 + h)[:, None] + 0.5
    cols = np.arange(x0, x0 + w)[None, :] + 0.5
    cy, cx = y0 + h / 2.0, x0 + w / 2.0
    inside = ((cols - cx) / (w / 2.0)) ** 2 + ((rows - cy) / (h / 2.0)) ** 2 <= 1.0
    mask[y0:y0 + h, x0:x0 + w] = inside
    return mask


def _tight_box(mask: np.ndarray, category_id: int) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1), category_id)


def generate_scene(spec: SceneSpec, index: int) -> AnnotatedImage:
    """Render scene ``index``; a pure function of ``(spec, index)``."""
    _, rng = _rngs(spec, index)
    n = spec.image_size
    pixels = scene_background(spec, index)
    boxes: List[BBox] = []
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        cid = int(rng.integers(len(spec.categories)))
        cat = spec.categories[cid]
        delta = float(rng.uniform(*cat.delta))
        for _attempt in range(spec.retries):
            w = int(rng.integers(cat.width[0], cat.width[1] + 1))
            h = int(rng.integers(cat.height[0], cat.height[1] + 1))
            x0 = int(rng.integers(0, n - w + 1))
            y0 = int(rng.integers(0, n - h + 1))
            mask = _shape_mask(cat, x0, y0, w, h, n)
            box = _tight_box(mask, cid)
            if all(iou(box, other) <= spec.max_iou for other in boxes):
                pixels[mask] += delta
                boxes.append(box)
                break
        else:
            log.debug("scene %d: could not place a %s after %d tries", index, cat.name, spec.retries)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return AnnotatedImage(pixels=pixels[None], boxes=boxes, image_id=index)


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> Dataset:
    return Dataset([generate_scene(spec, start + i) for i in range(count)], spec.category_names)


# ---------------------------------------------------------------------- PGM
def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a 2-D array as an 8-bit binary PGM.

    Float input is taken as [0, 1] intensity; uint8 input is written unchanged.
    """
    img = np.asarray(pixels)
    if img.ndim == 3:
        img = img[0]
    if img.dtype == np.uint8:
        data = img
    else:
        data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) 8-bit PGM as a uint8 array."""
    raw = Path(path).read_bytes()
    fields: List[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    if magic == b"P5":
        body = raw[pos + 1:pos + 1 + w * h]
        if len(body) != w * h:
            raise ValueError(f"{path}: truncated PGM payload")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
    if magic == b"P2":
        return np.array(raw[pos:].split()[: w * h], dtype=np.uint8).reshape(h, w)
    raise ValueError(f"{path}: not a PGM file (magic {magic!r})")


def _read_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image  # optional, only for non-PGM inputs

    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: expected an 8-bit grayscale image, got mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8)


# --------------------------------------------------------------------- COCO
@dataclass
class CocoIndex:
    """Parsed annotation file: image records, raw boxes per image, category names."""

    images: List[dict]
    boxes: dict = field(default_factory=dict)
    categories: List[str] = field(default_factory=list)


def read_coco_annotations(path) -> CocoIndex:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ValueError(f"{path}: missing top-level key {key!r}")
    cat_ids = sorted(c["id"] for c in doc["categories"])
    id_to_index = {cid: i for i, cid in enumerate(cat_ids)}
    names = {c["id"]: c["name"] for c in doc["categories"]}
    index = CocoIndex(images=sorted(doc["images"], key=lambda im: im["id"]), categories=[names[c] for c in cat_ids])
    known = {im["id"] for im in index.images}
    for im in index.images:
        index.boxes[im["id"]] = []
    for ann in doc["annotations"]:
        if ann["image_id"] not in known:
            raise ValueError(f"{path}: annotation {ann.get('id')} refers to unknown image id {ann['image_id']}")
        if ann["category_id"] not in id_to_index:
            raise ValueError(f"{path}: annotation {ann.get('id')} has unknown category id {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        index.boxes[ann["image_id"]].append(BBox(x, y, w, h, id_to_index[ann["category_id"]]))
    return index


def clip_box(box: BBox, width: int, height: int) -> Optional[BBox]:
    x0 = min(max(box.x, 0.0), width)
    y0 = min(max(box.y, 0.0), height)
    x1 = min(max(box.x + box.w, 0.0), width)
    y1 = min(max(box.y + box.h, 0.0), height)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0, box.category_id)


def load_coco(annotation_file, image_dir) -> Dataset:
    """Load a COCO-style annotation file plus its 8-bit grayscale images.

    Boxes are clipped to the image; boxes left with zero area are dropped and
    counted in ``Dataset.dropped_boxes``.
    """
    index = read_coco_annotations(annotation_file)
    image_dir = Path(image_dir)
    images = []
    dropped = 0
    for rec in index.images:
        path = image_dir / rec["file_name"]
        if not path.exists():
            raise FileNotFoundError(f"image id {rec['id']}: file {path} does not exist")
        gray = _read_gray(path)
        h, w = gray.shape
        boxes = []
        for box in index.boxes[rec["id"]]:
            clipped = clip_box(box, w, h)
            if clipped is None:
                dropped += 1
            else:
                boxes.append(clipped)
        images.append(AnnotatedImage(pixels=(gray.astype(np.float64) / 255.0)[None], boxes=boxes, image_id=int(rec["id"])))
    if dropped:
        log.warning("%s: dropped %d zero-area boxes", annotation_file, dropped)
    return Dataset(images, index.categories, dropped)


def coco_document(dataset: Dataset, file_names: Sequence[str]) -> dict:
    images, annotations = [], []
    for img, name in zip(dataset.images, file_names):
        images.append({"id": img.image_id, "file_name": name, "width": img.width, "height": img.height})
        for b in img.boxes:
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": img.image_id,
                "category_id": b.category_id + 1,
                "bbox": [b.x, b.y, b.w, b.h],
                "area": b.area,
                "iscrowd": 0,
            })
    categories = [{"id": i + 1, "name": n} for i, n in enumerate(dataset.categories)]
    return {"images": images, "annotations": annotations, "categories": categories}


def export_dataset(dataset: Dataset, out_dir, annotation_name: str = "annotations.json") -> Path:
    """Write every image as ``<image_id>.pgm`` plus one COCO annotation file."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = []
    for img in dataset.images:
        name = f"{img.image_id:06d}.pgm"
        write_pgm(out / "images" / name, img.pixels)
        names.append(name)
    ann_path = out / annotation_name
    ann_path.write_text(json.dumps(coco_document(dataset, names), indent=1, sort_keys=True) + "\n")
    return ann_path


# ------------------------------------------------------------------ batching
@dataclass
class Batch:
    images: Tensor
    annotations: List[List[BBox]]
    captions: List[CaptionRecord]
    image_ids: List[int]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    dataset: Dataset,
    batch_size: int,
    seed: int = 42,
    epoch: int = 0,
    train: bool = True,
    encoder: Optional[TextEncoder] = None,
    shuffle: Optional[bool] = None,
) -> Iterator[Batch]:
    """Yield batches; training shuffles per ``(seed, epoch)`` and drops the last partial batch."""
    if train and batch_size < 2:
        raise ValueError(f"training batch_size must be at least 2, got {batch_size}")
    if shuffle is None:
        shuffle = train
    n = len(dataset)
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    stop = (n // batch_size) * batch_size if train else n
    for start in range(0, stop, batch_size):
        items = [dataset.images[int(i)] for i in order[start:start + batch_size]]
        captions = []
        if encoder is not None:
            captions = [
                caption_record(im.boxes, im.width, im.height, dataset.categories, encoder) for im in items
            ]
        yield Batch(
            images=Tensor(np.stack([im.pixels for im in items])),
            annotations=[list(im.boxes) for im in items],
            captions=captions,
            image_ids=[im.image_id for im in items],
        )


def default_encoder(dim: int) -> HashEncoder:
    return HashEncoder(dim)
