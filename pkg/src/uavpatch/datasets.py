"""Data ingestion: VisDrone annotations, texture banks, toy aerial scenes.

Images are held in canonical form: float32 arrays of shape (H, W, 3) with
values in [-1, 1]. Textures and patches stay in [0, 1] until they are
written onto an image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("Car", "Van", "Bus", "Truck")
# VisDrone-DET category ids: 4 car, 5 van, 6 truck, 9 bus.
VISDRONE_CLASS_MAP = {4: 0, 5: 1, 9: 2, 6: 3}
IGNORE_CLASS = -1
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


class AnnotationParseError(ValueError):
    def __init__(self, path, lineno, line, reason):
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class BoundingBox:
    x_left: float
    y_top: float
    width: float
    height: float

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def x_right(self) -> float:
        return self.x_left + self.width

    @property
    def y_bottom(self) -> float:
        return self.y_top + self.height

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_left, self.y_top, self.x_right, self.y_bottom)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_left * sx, self.y_top * sy, self.width * sx, self.height * sy)

    def clipped(self, w: float, h: float) -> "BoundingBox | None":
        x1, y1 = max(self.x_left, 0.0), max(self.y_top, 0.0)
        x2, y2 = min(self.x_right, w), min(self.y_bottom, h)
        if x2 <= x1 or y2 <= y1:
            return None
        return BoundingBox.from_xyxy(x1, y1, x2, y2)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_id: int
    ignore: bool = False


@dataclass
class ImageSample:
    image: np.ndarray
    annotations: list[Annotation]
    source_id: str = ""
    original_size: tuple[int, int] = (0, 0)  # (height, width)

    def __post_init__(self):
        if self.original_size == (0, 0):
            self.original_size = tuple(self.image.shape[:2])

    @property
    def size(self) -> int:
        return self.image.shape[0]

    @property
    def targets(self) -> list[Annotation]:
        return [a for a in self.annotations if not a.ignore]


@dataclass
class TextureBank:
    textures: list[np.ndarray]
    ids: list[str]

    def __post_init__(self):
        if not self.textures:
            raise ConfigError("texture bank is empty")
        if len(self.textures) != len(self.ids):
            raise ValueError("textures and ids differ in length")

    def __len__(self):
        return len(self.textures)


# --------------------------------------------------------------------------
# VisDrone ingestion


def load_annotations(path, class_map: Mapping[int, int] = VISDRONE_CLASS_MAP) -> list[Annotation]:
    """Parse one VisDrone-DET annotation file.

    Each line holds ``left,top,width,height,score,category,truncation,occlusion``.
    Categories missing from ``class_map`` come back as ignore regions.
    """
    anns = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if parts and parts[-1] == "":
                parts = parts[:-1]  # some VisDrone files carry a trailing comma
            if len(parts) != 8:
                raise AnnotationParseError(path, lineno, line, f"expected 8 fields, got {len(parts)}")
            try:
                left, top, w, h, _score, cat, _trunc, _occ = (int(p) for p in parts)
            except ValueError:
                raise AnnotationParseError(path, lineno, line, "non-integer field") from None
            if w <= 0 or h <= 0:
                continue
            box = BoundingBox(float(left), float(top), float(w), float(h))
            if cat in class_map:
                anns.append(Annotation(box, int(class_map[cat]), False))
            else:
                anns.append(Annotation(box, IGNORE_CLASS, True))
    return anns


def to_canonical(raw_image: np.ndarray, annotations: Sequence[Annotation], size: int = 640,
                 source_id: str = "") -> ImageSample:
    """Resize to ``size``x``size`` (bilinear) and map pixels to [-1, 1]."""
    raw = np.asarray(raw_image)
    if raw.size == 0:
        raise ValueError("empty image")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    raw = raw[..., :3]
    h0, w0 = raw.shape[:2]
    if (h0, w0) != (size, size):
        raw = np.asarray(Image.fromarray(raw.astype(np.uint8)).resize((size, size), Image.BILINEAR))
    image = raw.astype(np.float32) / 127.5 - 1.0
    sx, sy = size / w0, size / h0
    anns = []
    for a in annotations:
        box = a.box.scaled(sx, sy).clipped(size, size)
        if box is not None:
            anns.append(replace(a, box=box))
    return ImageSample(image, anns, source_id, (h0, w0))


def to_raw(image: np.ndarray) -> np.ndarray:
    """Inverse of the canonical range mapping, rounded to uint8."""
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def area_fraction(ann: Annotation, sample: ImageSample) -> float:
    # Canonical resize scales both axes independently, so the fraction of
    # image area is the same before and after resizing.
    return ann.box.area / float(sample.image.shape[0] * sample.image.shape[1])


def filter_small_objects(samples: Sequence[ImageSample], min_frac: float = 0.001) -> list[ImageSample]:
    if not 0.0 < min_frac < 1.0:
        raise ConfigError(f"min_frac must be in (0, 1), got {min_frac}")
    out = []
    for s in samples:
        anns = [a for a in s.annotations if a.ignore or area_fraction(a, s) >= min_frac]
        if any(not a.ignore for a in anns):
            out.append(replace(s, annotations=anns))
    return out


def load_visdrone_split(root, class_map: Mapping[int, int] = VISDRONE_CLASS_MAP, size: int = 640,
                        min_frac: float | None = 0.001) -> list[ImageSample]:
    """Load ``root/images/*`` with matching ``root/annotations/<stem>.txt``."""
    root = Path(root)
    samples = []
    for img_path in sorted(p for p in (root / "images").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        ann_path = root / "annotations" / (img_path.stem + ".txt")
        anns = load_annotations(ann_path, class_map) if ann_path.exists() else []
        raw = np.asarray(Image.open(img_path).convert("RGB"))
        samples.append(to_canonical(raw, anns, size, img_path.stem))
    if min_frac is not None:
        samples = filter_small_objects(samples, min_frac)
    return samples


# --------------------------------------------------------------------------
# textures


def _center_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    s = min(h, w)
    y0, x0 = (h - s) // 2, (w - s) // 2
    return arr[y0:y0 + s, x0:x0 + s]


def load_texture_bank(directory, min_side: int = 64, max_side: int | None = 128) -> TextureBank:
    """Read every image under ``directory`` (recursively) into a bank.

    Textures are center-cropped to squares. ``max_side`` downsizes large
    images on load; a full DTD copy would not fit in memory otherwise.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"texture directory {directory} does not exist")
    textures, ids = [], []
    for p in sorted(directory.rglob("*")):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            img = Image.open(p).convert("RGB")
        except OSError:
            log.warning("skipping unreadable texture %s", p)
            continue
        arr = _center_square(np.asarray(img))
        if arr.shape[0] < min_side:
            log.warning("skipping texture %s: %dpx < %dpx", p, arr.shape[0], min_side)
            continue
        if max_side is not None and arr.shape[0] > max_side:
            arr = np.asarray(Image.fromarray(arr).resize((max_side, max_side), Image.BILINEAR))
        textures.append(arr.astype(np.float32) / 255.0)
        ids.append(str(p.relative_to(directory)))
    if not textures:
        raise ConfigError(f"no readable textures in {directory}")
    return TextureBank(textures, ids)


def generate_toy_textures(seed: int, n: int = 48, side: int = 64) -> TextureBank:
    """Procedural stand-in for DTD: stripes, hard-edged hatching, checks, dots and smooth blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) / side
    textures, ids = [], []
    kinds = ("stripes", "hatch", "checks", "dots", "blobs", "grain")
    for i in range(n):
        kind = kinds[i % len(kinds)]
        c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        freq = rng.uniform(3, 12)
        if kind == "stripes":
            ang = rng.uniform(0, np.pi)
            t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)))
        elif kind == "hatch":
            # binary lines like DTD's striped/banded/crosshatched classes
            ang = rng.uniform(0, np.pi)
            u = freq * (xx * np.cos(ang) + yy * np.sin(ang))
            t = ((u % 1) < rng.uniform(0.3, 0.7)).astype(np.float32)
        elif kind == "checks":
            t = ((np.floor(xx * freq) + np.floor(yy * freq)) % 2).astype(np.float32)
        elif kind == "dots":
            t = (np.sin(2 * np.pi * freq * xx) * np.sin(2 * np.pi * freq * yy) > 0.3).astype(np.float32)
        elif kind == "blobs":
            t = _smooth_noise(rng, side, cells=int(rng.integers(3, 8)))
        else:
            t = rng.uniform(0, 1, (side, side)).astype(np.float32)
        tex = c1[None, None] * t[..., None] + c2[None, None] * (1 - t[..., None])
        textures.append(np.clip(tex, 0, 1).astype(np.float32))
        ids.append(f"toy-{kind}-{i:03d}")
    return TextureBank(textures, ids)


# --------------------------------------------------------------------------
# toy aerial scenes


@dataclass(frozen=True)
class VehicleStyle:
    color: tuple[float, float, float]
    aspect: float          # long side / short side
    area_frac: tuple[float, float]


DEFAULT_STYLES = (
    VehicleStyle((0.85, 0.12, 0.12), 1.9, (0.024, 0.036)),   # Car
    VehicleStyle((0.92, 0.92, 0.88), 2.1, (0.030, 0.042)),   # Van
    VehicleStyle((0.95, 0.80, 0.08), 3.0, (0.045, 0.060)),   # Bus
    VehicleStyle((0.10, 0.30, 0.85), 2.5, (0.038, 0.052)),   # Truck
)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 128
    n_objects: tuple[int, int] = (1, 4)
    clutter: float = 0.8
    styles: tuple[VehicleStyle, ...] = DEFAULT_STYLES
    background: str = "ground"  # ground | flat
    min_frac: float = 0.001
    # unlabeled look-alikes (containers, sheds): vehicle-shaped, hatched surface
    distractors: tuple[int, int] = (0, 3)

    def validate(self):
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad n_objects range {self.n_objects}")
        for i, st in enumerate(self.styles):
            a, b = st.area_frac
            if a < self.min_frac or b < a:
                raise ConfigError(
                    f"styles[{i}].area_frac {st.area_frac} falls below the size filter {self.min_frac}")
        if self.distractors[0] < 0 or self.distractors[1] < self.distractors[0]:
            raise ConfigError(f"bad distractors range {self.distractors}")
        if self.background not in ("ground", "flat"):
            raise ConfigError(f"unknown background {self.background!r}")


def _smooth_noise(rng, side, cells=6):
    grid = rng.uniform(0, 1, (cells, cells)).astype(np.float32)
    img = Image.fromarray(grid, mode="F").resize((side, side), Image.BICUBIC)
    return np.clip(np.asarray(img), 0, 1)


def render_background(rng, cfg: SceneConfig) -> np.ndarray:
    s = cfg.size
    if cfg.background == "flat":
        return np.full((s, s, 3), 0.45, np.float32)
    base = np.array([0.42, 0.46, 0.36], np.float32) + rng.uniform(-0.06, 0.06, 3).astype(np.float32)
    low = _smooth_noise(rng, s, cells=int(rng.integers(3, 7)))
    img = base[None, None] + 0.16 * (low[..., None] - 0.5)
    if rng.uniform() < 0.6:
        # a road band running across the scene
        width = int(rng.integers(s // 6, s // 3))
        start = int(rng.integers(0, s - width))
        road = np.array([0.33, 0.33, 0.35], np.float32)
        if rng.uniform() < 0.5:
            img[start:start + width, :] = road + 0.05 * (low[start:start + width, :, None] - 0.5)
        else:
            img[:, start:start + width] = road + 0.05 * (low[:, start:start + width, None] - 0.5)
    img = img + rng.normal(0, 0.008, img.shape).astype(np.float32)
    return np.clip(img, 0.05, 0.7)


def _vehicle_pixels(rng, style: VehicleStyle, h: int, w: int, clutter: float = 0.5) -> np.ndarray:
    """Top-down vehicle sprite: body, darker windshield band, optional roof clutter."""
    color = np.clip(np.array(style.color, np.float32) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    sprite = np.broadcast_to(color, (h, w, 3)).copy()
    horizontal = w >= h
    length = w if horizontal else h
    band = max(1, length // 6)
    front = int(rng.integers(0, 2))
    glass = np.clip(color * 0.35, 0, 1)
    if horizontal:
        sl = slice(w - 2 * band, w - band) if front else slice(band, 2 * band)
        sprite[1:h - 1, sl] = glass
    else:
        sl = slice(h - 2 * band, h - band) if front else slice(band, 2 * band)
        sprite[sl, 1:w - 1] = glass
    if rng.uniform() < clutter:
        # roof racks, cargo, AC units: keeps detectors from keying on a flat colour
        ch = int(rng.integers(max(1, h // 5), max(2, h // 2)))
        cw = int(rng.integers(max(1, w // 5), max(2, w // 2)))
        cy = int(rng.integers(1, max(2, h - ch)))
        cx = int(rng.integers(1, max(2, w - cw)))
        sprite[cy:min(cy + ch, h - 1), cx:min(cx + cw, w - 1)] = rng.uniform(0, 1, 3)
    return sprite


def _distractor_pixels(rng, style: VehicleStyle, h: int, w: int) -> np.ndarray:
    """A vehicle look-alike whose only tell is a hatched roof panel."""
    sprite = _vehicle_pixels(rng, style, h, w, clutter=0.0)
    ph = int(rng.integers(max(2, int(0.4 * h)), max(3, int(0.7 * h) + 1)))
    pw = int(rng.integers(max(2, int(0.4 * w)), max(3, int(0.7 * w) + 1)))
    py = int(rng.integers(0, max(1, h - ph + 1)))
    px = int(rng.integers(0, max(1, w - pw + 1)))
    period = int(rng.integers(3, 5))
    yy, xx = np.mgrid[0:ph, 0:pw]
    diag = (xx + yy) if rng.uniform() < 0.5 else (xx - yy)
    dark = (diag % period) < period // 2
    panel = sprite[py:py + ph, px:px + pw]
    panel[dark] = panel[dark] * 0.3
    return sprite


def generate_toy_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> ImageSample:
    """Render a deterministic top-down scene of axis-aligned vehicles.

    Vehicles never overlap, so every annotation box is exactly the set of
    pixels painted for that vehicle.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    s = cfg.size
    img = render_background(rng, cfg)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    occupied = np.zeros((s, s), bool)
    anns = []
    for _ in range(n):
        cls = int(rng.integers(len(cfg.styles)))
        style = cfg.styles[cls]
        for _attempt in range(50):
            frac = rng.uniform(*style.area_frac)
            area = frac * s * s
            short = max(2, int(round(math.sqrt(area / style.aspect))))
            long_ = max(short + 1, int(round(short * style.aspect)))
            h, w = (short, long_) if rng.uniform() < 0.5 else (long_, short)
            if h * w < cfg.min_frac * s * s or h >= s - 2 or w >= s - 2:
                continue
            y, x = int(rng.integers(1, s - h - 1)), int(rng.integers(1, s - w - 1))
            if occupied[max(0, y - 2):y + h + 2, max(0, x - 2):x + w + 2].any():
                continue
            occupied[y:y + h, x:x + w] = True
            img[y:y + h, x:x + w] = _vehicle_pixels(rng, style, h, w, cfg.clutter)
            anns.append(Annotation(BoundingBox(float(x), float(y), float(w), float(h)), cls))
            break
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(n_dis):
        style = cfg.styles[int(rng.integers(len(cfg.styles)))]
        for _attempt in range(50):
            frac = rng.uniform(*style.area_frac)
            short = max(2, int(round(math.sqrt(frac * s * s / style.aspect))))
            long_ = max(short + 1, int(round(short * style.aspect)))
            h, w = (short, long_) if rng.uniform() < 0.5 else (long_, short)
            if h >= s - 2 or w >= s - 2:
                continue
            y, x = int(rng.integers(1, s - h - 1)), int(rng.integers(1, s - w - 1))
            if occupied[max(0, y - 2):y + h + 2, max(0, x - 2):x + w + 2].any():
                continue
            occupied[y:y + h, x:x + w] = True
            img[y:y + h, x:x + w] = _distractor_pixels(rng, style, h, w)
            break
    image = (img * 2.0 - 1.0).astype(np.float32)
    return ImageSample(image, anns, f"toy-{seed}", (s, s))


def generate_toy_dataset(seed: int, n: int, cfg: SceneConfig = SceneConfig()) -> list[ImageSample]:
    # one child seed per scene so scenes are independent of dataset length
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_toy_scene(int(sd), cfg) for sd in seeds]


# --------------------------------------------------------------------------
# on-disk dataset cache (used by the CLI)


def save_samples(path, samples: Sequence[ImageSample]):
    """Store samples as uint8 raw pixels plus a flat annotation table."""
    images = np.stack([to_raw(s.image) for s in samples]) if samples else np.zeros((0, 1, 1, 3), np.uint8)
    rows = []
    for i, s in enumerate(samples):
        for a in s.annotations:
            b = a.box
            rows.append((i, b.x_left, b.y_top, b.width, b.height, a.class_id, int(a.ignore)))
    np.savez_compressed(
        path,
        images=images,
        annotations=np.array(rows, np.float64).reshape(-1, 7),
        source_ids=np.array([s.source_id for s in samples]),
        original_sizes=np.array([s.original_size for s in samples], np.int64).reshape(-1, 2),
    )


def load_samples(path) -> list[ImageSample]:
    with np.load(path) as z:
        images, rows = z["images"], z["annotations"]
        ids, sizes = z["source_ids"], z["original_sizes"]
    per_image: list[list[Annotation]] = [[] for _ in range(len(images))]
    for i, x, y, w, h, c, ig in rows:
        per_image[int(i)].append(Annotation(BoundingBox(x, y, w, h), int(c), bool(ig)))
    return [
        ImageSample(images[i].astype(np.float32) / 127.5 - 1.0, per_image[i], str(ids[i]),
                    (int(sizes[i][0]), int(sizes[i][1])))
        for i in range(len(images))
    ]


def save_texture_bank(path, bank: TextureBank):
    """Store textures (float, [0, 1]) as uint8, one array per texture."""
    arrays = {f"t{i:05d}": np.round(np.clip(t, 0, 1) * 255).astype(np.uint8) for i, t in enumerate(bank.textures)}
    np.savez_compressed(path, ids=np.array(bank.ids), **arrays)


def load_texture_cache(path) -> TextureBank:
    with np.load(path) as z:
        ids = [str(i) for i in z["ids"]]
        textures = [z[f"t{i:05d}"].astype(np.float32) / 255.0 for i in range(len(ids))]
    return TextureBank(textures, ids)
