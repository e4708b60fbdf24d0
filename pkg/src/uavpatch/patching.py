"""Stochastic patch transformation and placement.

The same code path serves the attack (which needs gradients w.r.t. the
patch), the defense trainer (texture occluders) and the evaluator.
Patch pixels live in [0, 1]; images in [-1, 1]. The conversion happens in
:func:`place_patch_tensor` and nowhere else.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datasets import Annotation, BoundingBox, ImageSample, TextureBank

SOURCES = ("gray", "random", "texture", "adversarial")


@dataclass
class Patch:
    pixels: np.ndarray  # (side, side, 3) float32 in [0, 1]
    source: str = "random"
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown patch source {self.source!r}")
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise ValueError(f"patch must be (s, s, 3), got {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def gray(cls, side: int = 64) -> "Patch":
        return cls(np.full((side, side, 3), 0.5, np.float32), "gray", "gray")

    @classmethod
    def random(cls, rng: np.random.Generator, side: int = 64) -> "Patch":
        return cls(rng.uniform(0, 1, (side, side, 3)).astype(np.float32), "random", "random")

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels).permute(2, 0, 1).contiguous()


def save_patch(patch: Patch, path) -> Path:
    """Write a lossless PNG plus a ``.json`` sidecar next to it.

    The PNG is for viewing; the exact float pixels go into a ``.npy`` so a
    reload is bit-exact.
    """
    path = Path(path)
    Image.fromarray(np.rint(patch.pixels * 255).astype(np.uint8)).save(path)
    np.save(path.with_suffix(".npy"), patch.pixels)
    sidecar = {"source": patch.source, "id": patch.id, "side": patch.side, "meta": patch.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_patch(path) -> Patch:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    npy = path.with_suffix(".npy")
    if npy.exists():
        pixels = np.load(npy)
    else:
        pixels = np.asarray(Image.open(path).convert("RGB"), np.float32) / 255.0
    return Patch(pixels, meta["source"], meta["id"], meta.get("meta", {}))


# --------------------------------------------------------------------------
# transform draws


@dataclass(frozen=True)
class TransformRanges:
    hue: float = 0.08            # fraction of the hue circle
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.5, 1.5)
    brightness: float = 0.3
    noise: float = 0.1
    rotation_deg: float = 20.0
    train_scale: tuple[float, float] = (0.15, 0.35)
    eval_scale: float = 0.20


@dataclass
class TransformSample:
    flip_h: bool
    flip_v: bool
    hue_shift: float
    contrast: float
    saturation: float
    brightness: float
    noise: np.ndarray
    rotation_deg: float
    scale_frac: float
    offset: tuple[float, float]  # relative position of the footprint in the free room of the box

    @classmethod
    def identity(cls, side: int = 64, scale_frac: float = 0.2) -> "TransformSample":
        return cls(False, False, 0.0, 1.0, 1.0, 0.0, np.zeros((side, side, 3), np.float32),
                   0.0, scale_frac, (0.5, 0.5))


def sample_transform(rng: np.random.Generator, mode: str = "train", patch_side: int = 64,
                     ranges: TransformRanges = TransformRanges()) -> TransformSample:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    r = ranges
    flip_h = bool(rng.uniform() < 0.5)
    flip_v = bool(rng.uniform() < 0.5)
    hue = float(rng.uniform(-r.hue, r.hue))
    contrast = float(rng.uniform(*r.contrast))
    saturation = float(rng.uniform(*r.saturation))
    brightness = float(rng.uniform(-r.brightness, r.brightness))
    noise = rng.uniform(-r.noise, r.noise, (patch_side, patch_side, 3)).astype(np.float32)
    rotation = float(rng.uniform(-r.rotation_deg, r.rotation_deg))
    if mode == "train":
        scale = float(rng.uniform(*r.train_scale))
        offset = (float(rng.uniform()), float(rng.uniform()))
    else:
        scale = r.eval_scale
        offset = (0.5, 0.5)
    return TransformSample(flip_h, flip_v, hue, contrast, saturation, brightness, noise,
                           rotation, scale, offset)


def patch_size_for(box: BoundingBox, scale_frac: float) -> int:
    """Side of a square patch covering ``scale_frac`` of the box area; 0 = skip."""
    if not 0.0 < scale_frac < 1.0:
        raise ValueError(f"scale_frac must be in (0, 1), got {scale_frac}")
    side = int(math.floor(math.sqrt(scale_frac * box.width * box.height)))
    if side < 2 or side > min(box.width, box.height):
        return 0
    return side


def footprint_origin(box: BoundingBox, side: int, offset: tuple[float, float]) -> tuple[int, int] | None:
    """Integer top-left corner keeping a ``side``-pixel square inside ``box``."""
    x_lo, y_lo = math.ceil(box.x_left), math.ceil(box.y_top)
    x_hi = math.floor(box.x_right) - side
    y_hi = math.floor(box.y_bottom) - side
    if x_hi < x_lo or y_hi < y_lo:
        return None
    x0 = x_lo + int(math.floor(offset[0] * (x_hi - x_lo) + 0.5))
    y0 = y_lo + int(math.floor(offset[1] * (y_hi - y_lo) + 0.5))
    return min(x0, x_hi), min(y0, y_hi)


# --------------------------------------------------------------------------
# differentiable photometric / geometric ops (tensors are (3, s, s) in [0, 1])


def rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc, argmax = rgb.max(dim=0)
    minc = rgb.min(dim=0).values
    delta = maxc - minc
    safe_delta = torch.where(delta > 0, delta, torch.ones_like(delta))
    safe_max = torch.where(maxc > 0, maxc, torch.ones_like(maxc))
    sat = torch.where(maxc > 0, delta / safe_max, torch.zeros_like(maxc))
    hr = ((g - b) / safe_delta) % 6.0
    hg = (b - r) / safe_delta + 2.0
    hb = (r - g) / safe_delta + 4.0
    hue = torch.where(argmax == 0, hr, torch.where(argmax == 1, hg, hb)) / 6.0
    hue = torch.where(delta > 0, hue, torch.zeros_like(hue))
    return torch.stack([hue, sat, maxc])


def hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv[0], hsv[1], hsv[2]
    out = []
    for n in (5.0, 3.0, 1.0):
        k = (n + h * 6.0) % 6.0
        w = torch.clamp(torch.minimum(k, 4.0 - k), 0.0, 1.0)
        out.append(v - v * s * w)
    return torch.stack(out)


def rotation_mask(side: int, angle_deg: float, device=None, dtype=torch.float32) -> torch.Tensor:
    """Boolean (side, side) mask of output pixels whose source lies inside the patch."""
    if angle_deg == 0.0:
        return torch.ones(side, side, dtype=torch.bool, device=device)
    grid = _rotation_grid(side, angle_deg, device, dtype)
    return (grid.abs() <= 1.0).all(dim=-1)[0]


def _rotation_grid(side, angle_deg, device, dtype):
    a = math.radians(angle_deg)
    theta = torch.tensor([[math.cos(a), -math.sin(a), 0.0],
                          [math.sin(a), math.cos(a), 0.0]], dtype=dtype, device=device)
    return F.affine_grid(theta[None], [1, 3, side, side], align_corners=False)


def transform_patch_tensor(pixels: torch.Tensor, t: TransformSample, target_side: int
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one transform draw to a (3, s, s) patch tensor.

    Order: flip, hue, saturation, contrast, brightness, noise, clamp,
    resize, rotate. Returns the (3, side, side) grid and a boolean mask of
    the rotated footprint.
    """
    if target_side < 2:
        raise ValueError("target_side must be >= 2")
    x = pixels
    if t.flip_h:
        x = torch.flip(x, dims=(2,))
    if t.flip_v:
        x = torch.flip(x, dims=(1,))
    if t.hue_shift != 0.0 or t.saturation != 1.0:
        hsv = rgb_to_hsv(x)
        hue = (hsv[0] + t.hue_shift) % 1.0
        sat = torch.clamp(hsv[1] * t.saturation, 0.0, 1.0)
        x = hsv_to_rgb(torch.stack([hue, sat, hsv[2]]))
    if t.contrast != 1.0:
        mean = x.mean()
        x = (x - mean) * t.contrast + mean
    if t.brightness != 0.0:
        x = x + t.brightness
    noise = torch.as_tensor(t.noise, dtype=x.dtype, device=x.device)
    if noise.shape[:2] == x.shape[1:]:
        noise = noise.permute(2, 0, 1)
    else:  # draw made for a different patch side
        noise = F.interpolate(noise.permute(2, 0, 1)[None], size=x.shape[1:], mode="nearest")[0]
    if torch.any(noise != 0):
        x = x + noise
    x = torch.clamp(x, 0.0, 1.0)
    if x.shape[-1] != target_side:
        x = F.interpolate(x[None], size=(target_side, target_side), mode="bilinear",
                          align_corners=False, antialias=target_side < x.shape[-1])[0]
    if t.rotation_deg != 0.0:
        grid = _rotation_grid(target_side, t.rotation_deg, x.device, x.dtype)
        x = F.grid_sample(x[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]
        mask = rotation_mask(target_side, t.rotation_deg, x.device)
    else:
        mask = torch.ones(target_side, target_side, dtype=torch.bool, device=x.device)
    return torch.clamp(x, 0.0, 1.0), mask


def apply_transform(patch: Patch, t: TransformSample, target_side: int) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        grid, mask = transform_patch_tensor(patch.tensor(), t, target_side)
    return grid.permute(1, 2, 0).numpy(), mask.numpy()


def place_patch_tensor(image: torch.Tensor, grid: torch.Tensor, mask: torch.Tensor,
                       origin: tuple[int, int]) -> torch.Tensor:
    """Write ``grid`` (in [0,1]) onto a (3, H, W) image in [-1,1] where ``mask``."""
    x0, y0 = origin
    side = grid.shape[-1]
    out = image.clone()
    region = image[:, y0:y0 + side, x0:x0 + side]
    out[:, y0:y0 + side, x0:x0 + side] = torch.where(mask[None], grid * 2.0 - 1.0, region)
    return out


def place_patch(image: np.ndarray, patch_grid: np.ndarray, mask: np.ndarray, box: BoundingBox,
                offset: tuple[int, int]) -> np.ndarray:
    """Numpy wrapper; ``offset`` is the absolute top-left pixel of the footprint."""
    side = patch_grid.shape[0]
    if side == 0:
        return image.copy()
    x0, y0 = offset
    if x0 < box.x_left or y0 < box.y_top or x0 + side > box.x_right or y0 + side > box.y_bottom:
        raise ValueError(f"patch footprint ({x0}, {y0}, {side}) exceeds box {box}")
    out = image.copy()
    region = out[y0:y0 + side, x0:x0 + side]
    region[mask] = patch_grid[mask] * 2.0 - 1.0
    return out


# --------------------------------------------------------------------------
# per-object patching


@dataclass
class AppliedPatch:
    """Everything needed to re-render one object's patch."""

    index: int               # annotation index in the sample
    transform: TransformSample
    side: int
    origin: tuple[int, int]
    pixels: np.ndarray | None = None  # per-object source (texture/random/gray); None = shared patch


PatchSource = Union[Patch, TextureBank, str]


def _source_pixels(source, rng, patch_side):
    if isinstance(source, Patch):
        return None, source.side
    if source == "shared":  # caller renders its own patch tensor of side patch_side
        return None, patch_side
    if isinstance(source, TextureBank):
        tex = source.textures[int(rng.integers(len(source)))]
        return tex, tex.shape[0]
    if source == "gray":
        return np.full((patch_side, patch_side, 3), 0.5, np.float32), patch_side
    if source == "random":
        return rng.uniform(0, 1, (patch_side, patch_side, 3)).astype(np.float32), patch_side
    raise ValueError(f"unknown patch source {source!r}")


def plan_patches(sample: ImageSample, source: PatchSource, rng: np.random.Generator, mode: str = "train",
                 patch_side: int = 64, ranges: TransformRanges = TransformRanges()) -> list[AppliedPatch]:
    """Draw sources, transforms and placements for every target object."""
    plan = []
    for i, ann in enumerate(sample.annotations):
        if ann.ignore:
            continue
        pixels, src_side = _source_pixels(source, rng, patch_side)
        t = sample_transform(rng, mode, src_side, ranges)
        side = patch_size_for(ann.box, t.scale_frac)
        origin = None
        while side >= 2:
            origin = footprint_origin(ann.box, side, t.offset)
            if origin is not None:
                break
            side -= 1  # fractional box edges can leave one pixel less room
        if side < 2 or origin is None:
            continue
        plan.append(AppliedPatch(i, t, side, origin, pixels))
    return plan


def render_plan(image: torch.Tensor, plan: Sequence[AppliedPatch], patch: torch.Tensor | None = None
                ) -> torch.Tensor:
    """Apply a drawn plan to a (3, H, W) tensor; differentiable w.r.t. ``patch``."""
    out = image
    for ap in plan:
        if ap.pixels is not None:
            src = torch.from_numpy(ap.pixels).permute(2, 0, 1).to(image.dtype)
        else:
            src = patch
        grid, mask = transform_patch_tensor(src, ap.transform, ap.side)
        out = place_patch_tensor(out, grid, mask, ap.origin)
    return out


def footprint_mask(height: int, width: int, plan: Sequence[AppliedPatch]) -> np.ndarray:
    """Binary (H, W) mask of every pixel overwritten by ``plan``."""
    m = np.zeros((height, width), bool)
    for ap in plan:
        x0, y0 = ap.origin
        m[y0:y0 + ap.side, x0:x0 + ap.side] |= rotation_mask(ap.side, ap.transform.rotation_deg).numpy()
    return m


def image_tensor(sample: ImageSample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1)


def patch_objects(sample: ImageSample, source: PatchSource, rng: np.random.Generator, mode: str = "train",
                  patch_side: int = 64, ranges: TransformRanges = TransformRanges()
                  ) -> tuple[ImageSample, list[AppliedPatch]]:
    """Patch every non-ignored object of ``sample``.

    ``source`` is a :class:`Patch` (shared by all objects), a
    :class:`TextureBank` (fresh texture per object), ``"gray"`` or
    ``"random"`` (fresh noise per object).
    """
    plan = plan_patches(sample, source, rng, mode, patch_side, ranges)
    if not plan:
        return replace(sample, image=sample.image.copy()), plan
    shared = source.tensor() if isinstance(source, Patch) else None
    with torch.no_grad():
        out = render_plan(image_tensor(sample), plan, shared)
    return replace(sample, image=out.permute(1, 2, 0).contiguous().numpy()), plan
