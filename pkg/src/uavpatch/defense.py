"""Occlusion-removal defense: an attention U-Net that paints object pixels back over patches.

The trainer only ever sees texture occluders and clean targets. It has no
access to any detector or adversarial patch, which is what keeps the
defense detector-agnostic. Do not import the detector module here.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .datasets import ImageSample, TextureBank
from .errors import ConfigError, NumericalError
from .patching import footprint_mask, image_tensor, patch_objects

log = logging.getLogger(__name__)


@dataclass
class RestorationModelConfig:
    input_size: int = 640
    decoder_filters: tuple[int, ...] = (256, 128, 64, 32, 16)  # deepest level first
    attention: bool = True
    pretrained: bool = False
    # number of 112-channel MBConv blocks kept from the stride-16 stage
    neck_blocks: int = 1
    out_channels: int = 3
    output_activation: str | None = "tanh"


class AttentionGate(nn.Module):
    """Gate a skip connection by a coefficient computed from the decoder signal.

    alpha = sigmoid(psi(theta(skip) * phi(gate))), output = skip * alpha.
    The skip and gating projections are combined by an elementwise product
    rather than the additive form of the original Attention U-Net.
    """

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int | None = None):
        super().__init__()
        inter = inter_ch or max(skip_ch, 8)
        self.theta = nn.Conv2d(skip_ch, inter, 1, bias=False)
        self.phi = nn.Conv2d(gate_ch, inter, 1)
        self.psi = nn.Conv2d(inter, 1, 1)
        self.enabled = True

    def forward(self, skip, gate):
        if not self.enabled:
            return skip
        if gate.shape[-2:] != skip.shape[-2:]:
            gate = F.interpolate(gate, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        alpha = torch.sigmoid(self.psi(self.theta(skip) * self.phi(gate)))
        return skip * alpha


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, upsample: bool, attention: bool):
        super().__init__()
        self.upsample = upsample
        self.gate = AttentionGate(skip_ch, in_ch) if (attention and skip_ch) else None
        self.conv = nn.Sequential(nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(out_ch), nn.Hardswish())

    def forward(self, x, skip=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        if skip is not None:
            if skip.shape[-2:] != x.shape[-2:]:
                raise RuntimeError(f"skip {tuple(skip.shape[-2:])} vs decoder {tuple(x.shape[-2:])}")
            if self.gate is not None:
                skip = self.gate(skip, x)
            x = torch.cat([x, skip], 1)
        return self.conv(x)


class RestorationUNet(nn.Module):
    """EfficientNet-B0 encoder truncated at stride 16, five single-conv decoder levels.

    Skips come from strides 16, 8, 4, 2 and from the input itself; the
    stride-32 stages of B0 are dropped.
    """

    # (decoder level, resolution stride, skip source)
    LEVELS = ((0, 16, "s16"), (1, 8, "s8"), (2, 4, "s4"), (3, 2, "s2"), (4, 1, "input"))
    SKIP_CHANNELS = {"s16": 80, "s8": 40, "s4": 24, "s2": 16, "input": 3}

    def __init__(self, cfg: RestorationModelConfig = RestorationModelConfig()):
        super().__init__()
        if len(cfg.decoder_filters) != len(self.LEVELS):
            raise ConfigError(f"decoder needs {len(self.LEVELS)} filter counts, got {len(cfg.decoder_filters)}")
        for level, stride, _ in self.LEVELS:
            if cfg.input_size % stride:
                raise ConfigError(
                    f"decoder level {level} runs at stride {stride}, which does not divide input size "
                    f"{cfg.input_size}")
        if not 0 <= cfg.neck_blocks <= 3:
            raise ConfigError("neck_blocks must be in [0, 3]")
        self.cfg = cfg
        weights = torchvision.models.EfficientNet_B0_Weights.IMAGENET1K_V1 if cfg.pretrained else None
        feats = torchvision.models.efficientnet_b0(weights=weights).features
        self.stem = feats[0]
        self.enc_s2 = feats[1]
        self.enc_s4 = feats[2]
        self.enc_s8 = feats[3]
        self.enc_s16 = feats[4]
        self.neck = feats[5][: cfg.neck_blocks] if cfg.neck_blocks else nn.Identity()
        neck_ch = 112 if cfg.neck_blocks else 80
        in_ch = neck_ch
        blocks = []
        for (level, stride, src), out_ch in zip(self.LEVELS, cfg.decoder_filters):
            blocks.append(DecoderBlock(in_ch, self.SKIP_CHANNELS[src], out_ch, upsample=stride != 16,
                                       attention=cfg.attention))
            in_ch = out_ch
        self.decoder = nn.ModuleList(blocks)
        self.head = nn.Conv2d(in_ch, cfg.out_channels, 1)

    def set_attention(self, enabled: bool):
        for b in self.decoder:
            if b.gate is not None:
                b.gate.enabled = enabled

    def forward(self, x):
        skips = {"input": x}
        f = self.stem(x)
        f = skips["s2"] = self.enc_s2(f)
        f = skips["s4"] = self.enc_s4(f)
        f = skips["s8"] = self.enc_s8(f)
        f = skips["s16"] = self.enc_s16(f)
        f = self.neck(f)
        for (_, _, src), block in zip(self.LEVELS, self.decoder):
            f = block(f, skips[src])
        out = self.head(f)
        if self.cfg.output_activation == "tanh":
            out = torch.tanh(out)
        return out


def build_restoration_model(cfg: RestorationModelConfig = RestorationModelConfig()) -> RestorationUNet:
    model = RestorationUNet(cfg)
    log.info("restoration model: %d parameters", count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def reconstruction_loss(x: torch.Tensor, x_c: torch.Tensor) -> torch.Tensor:
    """Pixel-wise MSE, averaged over every entry."""
    if x.shape != x_c.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_c.shape)}")
    return ((x - x_c) ** 2).mean()


# --------------------------------------------------------------------------
# training


@dataclass
class DefenseTrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float | None = None  # default 0.1 * batch / 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    patch_side: int = 64
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("defense.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("defense.batch_size must be >= 1")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else 0.1 * self.batch_size / 256


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)  # epoch, train_loss, val_loss, lr

    @property
    def train_loss(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]


def _patched_batch(samples, textures, rng, patch_side, target: str):
    """Inputs (texture-patched) and targets (clean image or footprint mask)."""
    xs, ys = [], []
    for s in samples:
        patched, plan = patch_objects(s, textures, rng, "train", patch_side)
        xs.append(image_tensor(patched))
        if target == "image":
            ys.append(image_tensor(s))
        else:
            m = footprint_mask(s.image.shape[0], s.image.shape[1], plan)
            ys.append(torch.from_numpy(m.astype(np.float32))[None])
    return torch.stack(xs), torch.stack(ys)


def _fit(model, samples, textures, cfg: DefenseTrainConfig, target: str, val_samples=None) -> TrainHistory:
    cfg.validate()
    history = TrainHistory()
    if cfg.epochs == 0:
        model.eval()
        return history
    if not samples:
        raise ValueError("no training samples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)
    loss_fn = reconstruction_loss if target == "image" else F.binary_cross_entropy_with_logits
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(samples))
        total = 0.0
        lr = opt.param_groups[0]["lr"]
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            x, y = _patched_batch(batch, textures, rng, cfg.patch_side, target)
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite {target} loss at epoch {epoch}, lr {lr}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(batch)
        row = {"epoch": epoch, "train_loss": total / len(samples), "val_loss": None, "lr": lr}
        if val_samples:
            row["val_loss"] = _validation_loss(model, val_samples, textures, cfg, target, loss_fn)
        history.rows.append(row)
        log.info("defense[%s] epoch %d loss %.5f val %s", target, epoch, row["train_loss"], row["val_loss"])
    model.eval()
    return history


@torch.no_grad()
def _validation_loss(model, samples, textures, cfg, target, loss_fn):
    model.eval()
    rng = np.random.default_rng(cfg.seed + 7919)  # fixed validation occluders
    total = 0.0
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start:start + cfg.batch_size]
        x, y = _patched_batch(batch, textures, rng, cfg.patch_side, target)
        total += float(loss_fn(model(x), y)) * len(batch)
    return total / len(samples)


def train_defense(model: RestorationUNet, samples: Sequence[ImageSample], textures: TextureBank,
                  cfg: DefenseTrainConfig = DefenseTrainConfig(),
                  val_samples: Sequence[ImageSample] | None = None) -> TrainHistory:
    """Train ``model`` to map texture-patched images back to the clean images."""
    return _fit(model, samples, textures, cfg, "image", val_samples)


@torch.no_grad()
def restore_batch(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(images)


def restore(model: RestorationUNet, sample: ImageSample) -> ImageSample:
    if sample.image.shape[0] != model.cfg.input_size or sample.image.shape[1] != model.cfg.input_size:
        raise ValueError(f"restore expects {model.cfg.input_size}px images, got {sample.image.shape[:2]}")
    out = restore_batch(model, image_tensor(sample)[None])[0]
    return replace(sample, image=out.permute(1, 2, 0).contiguous().numpy())


# --------------------------------------------------------------------------
# segmentation-masking baseline

MASK_FILL = -1.0  # canonical black


def build_mask_model(cfg: RestorationModelConfig = RestorationModelConfig()) -> RestorationUNet:
    return RestorationUNet(replace(cfg, out_channels=1, output_activation=None))


def train_masking_baseline(samples: Sequence[ImageSample], textures: TextureBank,
                           cfg: DefenseTrainConfig = DefenseTrainConfig(),
                           model_cfg: RestorationModelConfig | None = None,
                           val_samples: Sequence[ImageSample] | None = None
                           ) -> tuple[RestorationUNet, TrainHistory]:
    """Same network and schedule, trained to segment patch footprints (per-pixel BCE)."""
    if model_cfg is None:
        model_cfg = RestorationModelConfig(input_size=samples[0].size)
    torch.manual_seed(cfg.seed)
    model = build_mask_model(model_cfg)
    history = _fit(model, samples, textures, cfg, "mask", val_samples)
    return model, history


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Invert a binary (…, H, W) mask and multiply it in; masked pixels become black."""
    keep = ~mask.bool()
    return torch.where(keep.unsqueeze(-3), image, torch.full_like(image, MASK_FILL))


@torch.no_grad()
def mask_apply_batch(segmodel: nn.Module, images: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    segmodel.eval()
    prob = torch.sigmoid(segmodel(images))[:, 0]
    return apply_mask(images, prob > threshold)


def mask_apply(segmodel: RestorationUNet, sample: ImageSample, threshold: float = 0.5) -> ImageSample:
    out = mask_apply_batch(segmodel, image_tensor(sample)[None], threshold)[0]
    return replace(sample, image=out.permute(1, 2, 0).contiguous().numpy())


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: RestorationUNet, path, history: TrainHistory | None = None):
    torch.save({"config": asdict(model.cfg), "state_dict": model.state_dict(),
                "history": history.rows if history else []}, path)


def load_model(path) -> RestorationUNet:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = dict(ckpt["config"])
    cfg["decoder_filters"] = tuple(cfg["decoder_filters"])
    cfg["pretrained"] = False  # weights come from the checkpoint
    model = RestorationUNet(RestorationModelConfig(**cfg))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
