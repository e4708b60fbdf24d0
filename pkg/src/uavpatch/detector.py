"""Detector contract and a tiny anchor-based single-stage reference detector.

Anything implementing :class:`DetectorContract` can be attacked and
evaluated. Only the tiny detector ships; full-size detectors plug in
through adapters registered with :func:`register_adapter`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou, sigmoid_focal_loss

from .datasets import Annotation, BoundingBox, ImageSample
from .errors import NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float


@runtime_checkable
class DetectorContract(Protocol):
    input_size: int
    classes: tuple[str, ...]

    def detect(self, image: ImageSample | torch.Tensor) -> list[Detection]:
        ...

    def object_confidences(self, images: torch.Tensor,
                           annotations: Sequence[Sequence[Annotation]]) -> list[torch.Tensor]:
        """Per-annotation scores in [0, 1], differentiable w.r.t. ``images``."""
        ...


_ADAPTERS: dict[str, Callable[..., DetectorContract]] = {}


def register_adapter(name: str, factory: Callable[..., DetectorContract]):
    _ADAPTERS[name] = factory


def get_adapter(name: str) -> Callable[..., DetectorContract]:
    try:
        return _ADAPTERS[name]
    except KeyError:
        raise KeyError(f"no detector adapter named {name!r}; known: {sorted(_ADAPTERS)}") from None


# --------------------------------------------------------------------------
# tiny detector


@dataclass
class TinyDetectorConfig:
    input_size: int = 128
    classes: tuple[str, ...] = ("Car", "Van", "Bus", "Truck")
    width: int = 32
    # (stride, base size) per head; aspect ratios shared
    heads: tuple[tuple[int, int], ...] = ((8, 24), (16, 48))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    score_mode: str = "product"  # product | objectness
    nms_iou: float = 0.5
    min_confidence: float = 0.05
    max_detections: int = 100


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def make_anchors(size: int, stride: int, base: int, ratios) -> torch.Tensor:
    """(N, 4) anchors as (cx, cy, w, h), ordered (y, x, ratio) to match the head layout."""
    n = size // stride
    c = (torch.arange(n, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    wh = torch.tensor([[base * math.sqrt(r), base / math.sqrt(r)] for r in ratios], dtype=torch.float32)
    centers = torch.stack([cx, cy], -1).reshape(-1, 1, 2).expand(-1, len(ratios), 2)
    return torch.cat([centers, wh[None].expand(n * n, -1, -1)], -1).reshape(-1, 4)


def cxcywh_to_xyxy(b):
    return torch.cat([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], -1)


def encode_boxes(gt_xyxy, anchors):
    wh = gt_xyxy[..., 2:] - gt_xyxy[..., :2]
    c = gt_xyxy[..., :2] + wh / 2
    return torch.cat([(c - anchors[..., :2]) / anchors[..., 2:], torch.log(wh / anchors[..., 2:])], -1)


def decode_boxes(deltas, anchors):
    c = anchors[..., :2] + deltas[..., :2] * anchors[..., 2:]
    wh = anchors[..., 2:] * torch.exp(torch.clamp(deltas[..., 2:], max=4.0))
    return cxcywh_to_xyxy(torch.cat([c, wh], -1))


class TinyDetector(nn.Module):
    """Four-stage conv backbone, two-level FPN, heads at strides 8 and 16.

    The usual stride-32 head is left out on purpose: toy and aerial objects
    are small relative to the frame.
    """

    def __init__(self, cfg: TinyDetectorConfig = TinyDetectorConfig()):
        super().__init__()
        self.cfg = cfg
        self.input_size = cfg.input_size
        self.classes = tuple(cfg.classes)
        w = cfg.width
        self.stem = nn.Sequential(_conv(3, w // 2, 2), _conv(w // 2, w, 2), _conv(w, w))
        self.c3 = nn.Sequential(_conv(w, 2 * w, 2), _conv(2 * w, 2 * w))
        self.c4 = nn.Sequential(_conv(2 * w, 4 * w, 2), _conv(4 * w, 4 * w))
        self.lat3 = nn.Conv2d(2 * w, 2 * w, 1)
        self.lat4 = nn.Conv2d(4 * w, 2 * w, 1)
        na = len(cfg.ratios)
        self.n_out = 5 + len(self.classes)
        self.heads = nn.ModuleList(
            nn.Sequential(_conv(2 * w, 2 * w), nn.Conv2d(2 * w, na * self.n_out, 1)) for _ in cfg.heads)
        for h in self.heads:
            nn.init.constant_(h[-1].bias, 0.0)
            h[-1].bias.data[4::self.n_out] = -4.0  # objectness prior ~0.02
        self.register_buffer("anchors", torch.cat(
            [make_anchors(cfg.input_size, s, b, cfg.ratios) for s, b in cfg.heads]), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Raw predictions (B, N, 5 + C): 4 box deltas, objectness logit, class logits."""
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise ValueError(f"expected {self.input_size}x{self.input_size} input, got {tuple(x.shape[-2:])}")
        f = self.stem(x)
        f3 = self.c3(f)
        f4 = self.c4(f3)
        p4 = self.lat4(f4)
        p3 = self.lat3(f3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        outs = []
        for head, p in zip(self.heads, (p3, p4)):
            o = head(p)
            b, _, h, w = o.shape
            outs.append(o.view(b, -1, self.n_out, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, self.n_out))
        return torch.cat(outs, 1)

    def scores(self, raw: torch.Tensor) -> torch.Tensor:
        """Per-anchor, per-class confidences in [0, 1]."""
        obj = torch.sigmoid(raw[..., 4:5])
        if self.cfg.score_mode == "objectness":
            return obj.expand(*raw.shape[:-1], len(self.classes))
        return obj * torch.softmax(raw[..., 5:], -1)

    @torch.no_grad()
    def detect(self, image, min_confidence: float | None = None) -> list[Detection]:
        if isinstance(image, ImageSample):
            image = torch.from_numpy(np.ascontiguousarray(image.image)).permute(2, 0, 1)
        return self.detect_batch(image[None], min_confidence)[0]

    @torch.no_grad()
    def detect_batch(self, images: torch.Tensor, min_confidence: float | None = None) -> list[list[Detection]]:
        was_training = self.training
        self.eval()
        try:
            raw = self(images.to(self.anchors.dtype))
        finally:
            self.train(was_training)
        thr = self.cfg.min_confidence if min_confidence is None else min_confidence
        boxes = decode_boxes(raw[..., :4], self.anchors).clamp(0, self.input_size)
        conf = self.scores(raw)
        results = []
        for bi in range(images.shape[0]):
            anchor_idx, cls = torch.nonzero(conf[bi] >= thr, as_tuple=True)
            s = conf[bi, anchor_idx, cls]
            bx = boxes[bi, anchor_idx]
            valid = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
            bx, s, cls = bx[valid], s[valid], cls[valid]
            keep = batched_nms(bx, s, cls, self.cfg.nms_iou)[: self.cfg.max_detections]
            dets = [Detection(BoundingBox.from_xyxy(*bx[k].tolist()), int(cls[k]), float(s[k])) for k in keep]
            dets.sort(key=lambda d: (-d.confidence, d.box.xyxy()))
            results.append(dets)
        return results

    def object_confidences(self, images: torch.Tensor,
                           annotations: Sequence[Sequence[Annotation]]) -> list[torch.Tensor]:
        """Best score among predictions overlapping each object at IoU >= 0.5.

        The score of an annotation is the maximum of objectness x P(class of
        the annotation) over anchors whose decoded box has IoU >= 0.5 with the
        annotation box, or 0 when none does. Association uses detached boxes;
        gradients flow through the scores only.
        """
        raw = self(images)
        boxes = decode_boxes(raw[..., :4].detach(), self.anchors.to(raw.dtype))
        conf = self.scores(raw)
        out = []
        for bi, anns in enumerate(annotations):
            if not anns:
                out.append(conf.new_zeros(0))
                continue
            gt = torch.tensor([a.box.xyxy() for a in anns], dtype=raw.dtype)
            cls = torch.tensor([max(a.class_id, 0) for a in anns])
            assoc = box_iou(gt, boxes[bi]) >= 0.5                    # (G, N)
            per = conf[bi][:, cls].T                                   # (G, N)
            out.append(torch.where(assoc, per, torch.zeros_like(per)).amax(dim=1))
        return out


# --------------------------------------------------------------------------
# training


@dataclass
class DetectorTrainConfig:
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    flip_augment: bool = True


def assign_targets(anchors_xyxy: torch.Tensor, anns: Sequence[Annotation], pos_iou=0.5, neg_iou=0.4):
    """Label anchors: >=0 gt index (positive), -1 negative, -2 ignored."""
    n = anchors_xyxy.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    targets = [a for a in anns if not a.ignore]
    ignores = [a for a in anns if a.ignore]
    if ignores:
        ig = torch.tensor([a.box.xyxy() for a in ignores], dtype=anchors_xyxy.dtype)
        labels[(box_iou(anchors_xyxy, ig) >= 0.5).any(1)] = -2
    if not targets:
        return labels, targets
    gt = torch.tensor([a.box.xyxy() for a in targets], dtype=anchors_xyxy.dtype)
    iou = box_iou(anchors_xyxy, gt)
    best, idx = iou.max(1)
    labels[(best >= neg_iou) & (best < pos_iou)] = -2
    labels[best >= pos_iou] = idx[best >= pos_iou]
    # every object gets at least its best anchor
    best_anchor = iou.argmax(0)
    labels[best_anchor] = torch.arange(len(targets))
    return labels, targets


def detection_loss(model: TinyDetector, images: torch.Tensor, batch_anns: Sequence[Sequence[Annotation]]):
    raw = model(images)
    anchors = model.anchors
    anchors_xyxy = cxcywh_to_xyxy(anchors)
    obj_losses, cls_losses, box_losses = [], [], []
    n_pos = 0
    for bi, anns in enumerate(batch_anns):
        labels, targets = assign_targets(anchors_xyxy, anns)
        pos = labels >= 0
        valid = labels >= -1
        obj_t = pos.to(raw.dtype)
        obj_losses.append(sigmoid_focal_loss(raw[bi, valid, 4], obj_t[valid], reduction="sum"))
        if pos.any():
            gi = labels[pos]
            cls_t = torch.tensor([targets[i].class_id for i in gi.tolist()])
            gt = torch.tensor([targets[i].box.xyxy() for i in gi.tolist()], dtype=raw.dtype)
            cls_losses.append(F.cross_entropy(raw[bi, pos, 5:], cls_t, reduction="sum"))
            box_losses.append(F.smooth_l1_loss(raw[bi, pos, :4], encode_boxes(gt, anchors[pos]),
                                               beta=1 / 9, reduction="sum"))
            n_pos += int(pos.sum())
    norm = max(n_pos, 1)
    zero = raw.sum() * 0
    obj = sum(obj_losses, zero) / norm
    cls = sum(cls_losses, zero) / norm
    box = sum(box_losses, zero) / norm
    return obj + cls + box, {"obj": obj.item(), "cls": cls.item(), "box": box.item()}


def _flip_sample(img: torch.Tensor, anns, size, horizontal: bool):
    if horizontal:
        img = torch.flip(img, (2,))
        anns = [Annotation(BoundingBox(size - a.box.x_right, a.box.y_top, a.box.width, a.box.height),
                           a.class_id, a.ignore) for a in anns]
    else:
        img = torch.flip(img, (1,))
        anns = [Annotation(BoundingBox(a.box.x_left, size - a.box.y_bottom, a.box.width, a.box.height),
                           a.class_id, a.ignore) for a in anns]
    return img, anns


def train_tiny_detector(samples: Sequence[ImageSample], cfg: DetectorTrainConfig = DetectorTrainConfig(),
                        model_cfg: TinyDetectorConfig | None = None,
                        val_samples: Sequence[ImageSample] | None = None) -> tuple[TinyDetector, dict]:
    """Train the reference detector; returns the model and a history record."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model_cfg is None:
        model_cfg = TinyDetectorConfig(input_size=samples[0].size if samples else 128)
    model = TinyDetector(model_cfg)
    history = {"loss": [], "val_ap": None}
    if cfg.epochs == 0 or not samples:
        model.eval()
        return model, history
    images = torch.stack([torch.from_numpy(s.image).permute(2, 0, 1) for s in samples])
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.learning_rate,
                                                total_steps=cfg.epochs * steps_per_epoch, pct_start=0.15)
    model.train()
    size = model_cfg.input_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch, anns = [], []
            for i in idx:
                img, a = images[i], samples[i].annotations
                if cfg.flip_augment:
                    if rng.uniform() < 0.5:
                        img, a = _flip_sample(img, a, size, True)
                    if rng.uniform() < 0.5:
                        img, a = _flip_sample(img, a, size, False)
                batch.append(img)
                anns.append(a)
            loss, parts = detection_loss(model, torch.stack(batch), anns)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite detector loss at epoch {epoch}: {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            epoch_loss += loss.item() * len(idx)
        history["loss"].append(epoch_loss / len(samples))
        log.info("detector epoch %d loss %.4f", epoch, history["loss"][-1])
    model.eval()
    if val_samples:
        from .evaluation import evaluate_detections
        dets = [model.detect(s) for s in val_samples]
        history["val_ap"] = evaluate_detections(dets, val_samples, len(model.classes))["mean_ap"]
    return model, history


def save_detector(model: TinyDetector, path):
    torch.save({"kind": "tiny", "config": asdict(model.cfg), "state_dict": model.state_dict()}, path)


def load_detector(path) -> TinyDetector:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = dict(ckpt["config"])
    cfg["classes"] = tuple(cfg["classes"])
    cfg["heads"] = tuple(tuple(h) for h in cfg["heads"])
    cfg["ratios"] = tuple(cfg["ratios"])
    model = TinyDetector(TinyDetectorConfig(**cfg))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


register_adapter("tiny", load_detector)
