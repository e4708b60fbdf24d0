"""Adversarial patch optimization: detection score + NPS + TV, under random transforms."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import ImageSample
from .detector import DetectorContract
from .errors import ConfigError, NumericalError
from .patching import Patch, TransformRanges, image_tensor, plan_patches, render_plan

log = logging.getLogger(__name__)


@dataclass
class PrintableColorSet:
    colors: np.ndarray  # (K, 3) in [0, 1]

    def __post_init__(self):
        c = np.asarray(self.colors, np.float64).reshape(-1, 3)
        if len(c) == 0:
            raise ConfigError("printable color set is empty")
        if np.any(c < 0) or np.any(c > 1):
            raise ConfigError("printable colors must lie in [0, 1]")
        self.colors = c

    @classmethod
    def load(cls, path=None) -> "PrintableColorSet":
        """One ``r,g,b`` line per color. Defaults to the bundled 30-color gamut list."""
        if path is None:
            text = resources.files("uavpatch.data").joinpath("printable_colors.txt").read_text()
        else:
            text = Path(path).read_text()
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append([float(v) for v in line.split(",")])
        return cls(np.array(rows))

    @classmethod
    def basic(cls) -> "PrintableColorSet":
        return cls(np.array([[0, 0, 0], [1, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]], np.float64))


def _as_tensor(patch) -> torch.Tensor:
    return patch.tensor() if isinstance(patch, Patch) else patch


def nps(patch, colors: PrintableColorSet, normalize: bool = False) -> torch.Tensor:
    """Sum over pixels of the distance to the nearest printable color."""
    x = _as_tensor(patch)
    pix = x.reshape(3, -1).T                                   # (P, 3)
    c = torch.as_tensor(colors.colors, dtype=x.dtype)
    d2 = ((pix[:, None, :] - c[None]) ** 2).sum(-1).min(dim=1).values
    # sqrt with a zero (not infinite) gradient on exact matches
    hit = d2 > 0
    score = torch.where(hit, torch.sqrt(torch.where(hit, d2, torch.ones_like(d2))), torch.zeros_like(d2)).sum()
    return score / pix.shape[0] if normalize else score


def total_variation(patch, normalize: bool = True) -> torch.Tensor:
    """Anisotropic TV: sum of absolute horizontal and vertical neighbour differences.

    Normalized by the pixel count (side * side) unless ``normalize`` is off.
    """
    x = _as_tensor(patch)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("total variation needs a patch of side >= 2")
    tv = (x[:, :, 1:] - x[:, :, :-1]).abs().sum() + (x[:, 1:, :] - x[:, :-1, :]).abs().sum()
    return tv / (x.shape[-1] * x.shape[-2]) if normalize else tv


def detection_score(detector: DetectorContract, patched: torch.Tensor,
                    annotations: Sequence[Sequence]) -> torch.Tensor:
    """Mean over target objects of the detector's confidence for that object."""
    targets = [[a for a in anns if not a.ignore] for anns in annotations]
    if sum(len(t) for t in targets) == 0:
        raise ValueError("batch holds no target objects to attack")
    scores = detector.object_confidences(patched, targets)
    return torch.cat([s for s in scores if s.numel()]).mean()


@dataclass
class AttackConfig:
    patch_side: int = 64
    steps: int = 300
    batch_size: int = 8
    learning_rate: float = 0.03
    lr_schedule: str = "cosine"  # cosine | constant
    optimizer: str = "adam"  # adam | sgd (plain gradient descent)
    weight_nps: float = 0.01
    weight_tv: float = 2.5
    normalize_nps: bool = True
    scale_range: tuple[float, float] = (0.15, 0.35)
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError("attack.steps must be >= 1")
        if self.weight_nps < 0 or self.weight_tv < 0:
            raise ConfigError("attack loss weights must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown attack.lr_schedule {self.lr_schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown attack.optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("attack.learning_rate must be > 0")


def _lr(cfg: AttackConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * step / cfg.steps))


@dataclass
class AttackResult:
    patch: Patch
    trace: list[dict] = field(default_factory=list)


def optimize_patch(detector: DetectorContract, samples: Sequence[ImageSample], cfg: AttackConfig,
                   colors: PrintableColorSet, init: Patch | None = None) -> AttackResult:
    """Optimize the patch pixels, projecting back to [0, 1] after each step.

    Each step patches a random batch (train-mode transforms) and scores it
    with the detector; the loss is ``score + w_nps * nps + w_tv * tv``.
    Adam is the default: plain gradient steps stall because per-pixel
    gradients are tiny once the patch is resized onto small objects.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pool = [s for s in samples if s.targets]
    if not pool:
        raise ValueError("no samples with target objects")
    if init is None:
        pixels = rng.uniform(0, 1, (3, cfg.patch_side, cfg.patch_side)).astype(np.float32)
    else:
        pixels = init.pixels.transpose(2, 0, 1).copy()
    patch = torch.tensor(pixels, requires_grad=True)
    ranges = TransformRanges(train_scale=tuple(cfg.scale_range))
    if isinstance(detector, torch.nn.Module):
        detector.eval()
        for p in detector.parameters():
            p.requires_grad_(False)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam([patch], lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD([patch], lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: _lr(cfg, step) / cfg.learning_rate)
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        imgs, anns = [], []
        for s in batch:
            plan = plan_patches(s, "shared", rng, "train", cfg.patch_side, ranges)
            imgs.append(render_plan(image_tensor(s), plan, patch))
            anns.append(s.annotations)
        score = detection_score(detector, torch.stack(imgs), anns)
        l_nps = nps(patch, colors, cfg.normalize_nps)
        l_tv = total_variation(patch)
        loss = score + cfg.weight_nps * l_nps + cfg.weight_tv * l_tv
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite attack loss at step {step}: score={score.item()} nps={l_nps.item()} "
                f"tv={l_tv.item()} patch range=({float(patch.min())}, {float(patch.max())})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        with torch.no_grad():
            patch.clamp_(0.0, 1.0)
        row = {"step": step, "total": loss.item(), "score": score.item(),
               "nps": l_nps.item(), "tv": l_tv.item()}
        trace.append(row)
        if step % 50 == 0:
            log.info("attack step %d loss %.4f score %.4f", step, row["total"], row["score"])
    meta = {"attack": asdict(cfg), "final_loss": trace[-1]["total"]}
    final = Patch(patch.detach().permute(1, 2, 0).numpy().copy(), "adversarial", f"adv-seed{cfg.seed}", meta)
    return AttackResult(final, trace)


def write_trace(trace: Sequence[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["step", "total", "score", "nps", "tv"], lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
