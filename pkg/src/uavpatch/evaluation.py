"""Detection metrics (AP/AR at IoU 0.5), attack success rate, latency overhead and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .datasets import Annotation, BoundingBox, ImageSample
from .detector import Detection

log = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
_RECALL_LEVELS = np.arange(101)  # recall level i means recall >= i / 100
REPORT_SCHEMA_VERSION = 1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_right, b.x_right) - max(a.x_left, b.x_left)
    ih = min(a.y_bottom, b.y_bottom) - max(a.y_top, b.y_top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.confidence, d.box.xyxy()))


@dataclass
class MatchResult:
    detections: list[Detection]      # sorted by descending confidence
    tp: np.ndarray                   # per detection
    ignored: np.ndarray              # per detection: absorbed by an ignore region
    gt_match: np.ndarray             # per annotation: matched detection index or -1
    gt_class: np.ndarray
    gt_ignore: np.ndarray

    @property
    def confidences(self) -> np.ndarray:
        return np.array([d.confidence for d in self.detections], np.float64)

    @property
    def det_class(self) -> np.ndarray:
        return np.array([d.class_id for d in self.detections], np.int64)


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], thr: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending confidence order."""
    dets = sort_detections(dets)
    gt_match = np.full(len(gts), -1, np.int64)
    tp = np.zeros(len(dets), bool)
    ignored = np.zeros(len(dets), bool)
    for di, d in enumerate(dets):
        best, best_iou = -1, thr
        for gi, g in enumerate(gts):
            if g.ignore or g.class_id != d.class_id or gt_match[gi] >= 0:
                continue
            o = iou(d.box, g.box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            gt_match[best] = di
            tp[di] = True
        elif any(g.ignore and iou(d.box, g.box) >= thr for g in gts):
            ignored[di] = True
    return MatchResult(dets, tp, ignored, gt_match,
                       np.array([g.class_id for g in gts], np.int64),
                       np.array([g.ignore for g in gts], bool))


def _class_arrays(matches: Sequence[MatchResult], class_id: int):
    confs, tps = [], []
    npos = 0
    for m in matches:
        keep = (m.det_class == class_id) & ~m.ignored if len(m.detections) else np.zeros(0, bool)
        confs.append(m.confidences[keep])
        tps.append(m.tp[keep])
        npos += int(np.sum((m.gt_class == class_id) & ~m.gt_ignore))
    conf = np.concatenate(confs) if confs else np.zeros(0)
    tp = np.concatenate(tps) if tps else np.zeros(0, bool)
    order = np.argsort(-conf, kind="stable")
    return conf[order], tp[order], npos


@dataclass
class PRCurve:
    recall: np.ndarray      # the 101 recall points
    precision: np.ndarray   # interpolated precision at each point


def pr_curve_and_ap(matches: Sequence[MatchResult], class_id: int) -> tuple[PRCurve, float | None]:
    """101-point interpolated AP. Returns AP None when the class has no ground truth."""
    _, tp, npos = _class_arrays(matches, class_id)
    if npos == 0:
        return PRCurve(RECALL_POINTS.copy(), np.zeros(101)), None
    if len(tp) == 0:
        return PRCurve(RECALL_POINTS.copy(), np.zeros(101)), 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    precision = tp_cum / (tp_cum + fp_cum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = _first_reaching(tp_cum, npos)
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return PRCurve(RECALL_POINTS.copy(), interp), float(np.mean(interp))


def average_recall(matches: Sequence[MatchResult], class_id: int) -> float | None:
    """Recall reached with every detection above the evaluation confidence floor."""
    _, tp, npos = _class_arrays(matches, class_id)
    if npos == 0:
        return None
    return float(np.sum(tp)) / npos


def _first_reaching(tp_cum: np.ndarray, npos: int) -> np.ndarray:
    """Index of the first prefix whose recall reaches each level, compared in integers."""
    return np.searchsorted(tp_cum * 100, _RECALL_LEVELS * npos, side="left")


def operating_points(conf: np.ndarray, tp: np.ndarray, npos: int) -> list[float]:
    """Confidence thresholds at which the clean run first reaches each of the 101 recall levels.

    Isolated so other readings of "ASR averaged over recall thresholds" can
    be swapped in.
    """
    if npos == 0 or len(conf) == 0:
        return []
    idx = _first_reaching(np.cumsum(tp), npos)
    return [float(conf[i]) for i in idx if i < len(conf)]


def _matched_at(conf: np.ndarray, tp: np.ndarray, t: float) -> int:
    return int(np.sum(tp & (conf >= t)))


def attack_success_rate(clean: Sequence[MatchResult], patched: Sequence[MatchResult], n_classes: int,
                        points: Callable = operating_points) -> dict:
    """Per-class and mean ASR of a patched run against the clean run on the same images."""
    if len(clean) != len(patched):
        raise ValueError(f"clean run has {len(clean)} images, patched run {len(patched)}")
    for i, (c, p) in enumerate(zip(clean, patched)):
        if len(c.gt_class) != len(p.gt_class) or np.any(c.gt_class != p.gt_class):
            raise ValueError(f"ground truth differs between runs at image {i}")
    per_class: dict[int, float] = {}
    for k in range(n_classes):
        cconf, ctp, npos = _class_arrays(clean, k)
        pconf, ptp, _ = _class_arrays(patched, k)
        values = []
        for t in points(cconf, ctp, npos):
            n_clean = _matched_at(cconf, ctp, t)
            if n_clean == 0:
                continue
            n_patched = _matched_at(pconf, ptp, t)
            values.append(min(max(1.0 - n_patched / n_clean, 0.0), 1.0))
        if values:
            per_class[k] = float(np.mean(values))
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"per_class": per_class, "mean": mean}


def evaluate_detections(dets: Sequence[Sequence[Detection]], samples: Sequence[ImageSample], n_classes: int,
                        thr: float = 0.5) -> dict:
    matches = [match_detections(d, s.annotations, thr) for d, s in zip(dets, samples)]
    return summarize_matches(matches, n_classes)


def summarize_matches(matches: Sequence[MatchResult], n_classes: int) -> dict:
    per_class = {}
    curves = {}
    for k in range(n_classes):
        curve, ap = pr_curve_and_ap(matches, k)
        if ap is None:
            log.info("class %d has no ground truth; excluded from means", k)
            continue
        per_class[k] = {"ap": ap, "ar": average_recall(matches, k)}
        curves[k] = curve
    mean_ap = float(np.mean([v["ap"] for v in per_class.values()])) if per_class else 0.0
    mean_ar = float(np.mean([v["ar"] for v in per_class.values()])) if per_class else 0.0
    return {"per_class": per_class, "curves": curves, "mean_ap": mean_ap, "mean_ar": mean_ar}


# --------------------------------------------------------------------------
# detection dump format


DUMP_HEADER = "# uavpatch-detections v1: image_id,class_id,x_left,y_top,width,height,confidence"


def write_detections(path, dets_by_image: Mapping[str, Sequence[Detection]]):
    with open(path, "w") as fh:
        fh.write(DUMP_HEADER + "\n")
        for image_id in dets_by_image:
            for d in dets_by_image[image_id]:
                b = d.box
                fh.write(f"{image_id},{d.class_id},{b.x_left!r},{b.y_top!r},{b.width!r},{b.height!r},"
                         f"{d.confidence!r}\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields")
            image_id, cls = parts[0], int(parts[1])
            x, y, w, h, c = (float(v) for v in parts[2:])
            out.setdefault(image_id, []).append(Detection(BoundingBox(x, y, w, h), cls, c))
    return out


# --------------------------------------------------------------------------
# latency overhead


class TimingResolutionError(RuntimeError):
    pass


@dataclass
class OverheadResult:
    mean_pct: float
    std_pct: float
    per_repetition: list[float]
    detect_s: float
    pipeline_s: float

    def as_dict(self):
        return {"mean_pct": self.mean_pct, "std_pct": self.std_pct, "per_repetition": self.per_repetition,
                "detect_s_per_image": self.detect_s, "pipeline_s_per_image": self.pipeline_s}


def measure_overhead(detect: Callable, preprocess: Callable, images: Sequence, repetitions: int = 3,
                     warmup: int = 5, min_images: int = 100) -> OverheadResult:
    """Relative extra time per image of ``detect(preprocess(x))`` over ``detect(x)``."""
    if len(images) < min_images:
        raise ValueError(f"need at least {min_images} images, got {len(images)}")
    for x in images[:warmup]:
        detect(preprocess(x))
    resolution = time.get_clock_info("perf_counter").resolution
    pcts, t_det, t_pipe = [], [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for x in images:
            detect(x)
        t1 = time.perf_counter()
        for x in images:
            detect(preprocess(x))
        t2 = time.perf_counter()
        d = (t1 - t0) / len(images)
        p = (t2 - t1) / len(images)
        if d < 10 * resolution:
            raise TimingResolutionError(
                f"per-image detect time {d:.3g}s is below 10x the clock resolution; time batches instead")
        pcts.append((p - d) / d * 100.0)
        t_det.append(d)
        t_pipe.append(p)
    return OverheadResult(float(np.mean(pcts)), float(np.std(pcts)), pcts,
                          float(np.mean(t_det)), float(np.mean(t_pipe)))


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    # condition -> list over runs of {class_id: {"ap", "ar", "asr"}}
    runs: dict[str, list[dict[int, dict]]] = field(default_factory=dict)
    # condition -> class_id -> list over runs of precision arrays (101 points)
    curves: dict[str, dict[int, list[np.ndarray]]] = field(default_factory=dict)
    timing: dict | None = None
    meta: dict = field(default_factory=dict)

    def add_run(self, condition: str, summary: dict, asr: dict | None):
        row = {}
        for k, v in summary["per_class"].items():
            row[k] = {"ap": v["ap"], "ar": v["ar"],
                      "asr": None if asr is None else asr["per_class"].get(k)}
        self.runs.setdefault(condition, []).append(row)
        cc = self.curves.setdefault(condition, {})
        for k, c in summary["curves"].items():
            cc.setdefault(k, []).append(np.asarray(c.precision))

    def per_class(self) -> dict:
        out = {}
        for cond, runs in self.runs.items():
            out[cond] = {}
            for k in sorted({k for r in runs for k in r}):
                entry = {}
                for metric in ("ap", "ar", "asr"):
                    vals = [r[k][metric] for r in runs if k in r and r[k][metric] is not None]
                    if vals:
                        entry[metric] = float(np.mean(vals))
                        entry[f"{metric}_min"] = float(np.min(vals))
                        entry[f"{metric}_max"] = float(np.max(vals))
                        entry[f"{metric}_runs"] = [float(v) for v in vals]
                out[cond][self.classes[k]] = entry
        return out

    def means(self) -> dict:
        out = {}
        for cond, classes in self.per_class().items():
            out[cond] = {}
            for metric in ("ap", "ar", "asr"):
                vals = [e[metric] for e in classes.values() if metric in e]
                if vals:
                    out[cond][metric] = float(np.mean(vals))
        return out

    def run_means(self, condition: str, metric: str) -> list[float]:
        """Class-mean of ``metric`` for each run of ``condition``."""
        out = []
        for r in self.runs[condition]:
            vals = [v[metric] for v in r.values() if v[metric] is not None]
            out.append(float(np.mean(vals)) if vals else 0.0)
        return out

    def to_record(self) -> dict:
        curves = {
            cond: {self.classes[k]: {"recall": [round(float(x), 2) for x in RECALL_POINTS],
                                     "precision": [float(x) for x in np.mean(v, axis=0)]}
                   for k, v in sorted(cc.items())}
            for cond, cc in self.curves.items()
        }
        runs = {cond: [{self.classes[k]: dict(v) for k, v in sorted(r.items())} for r in rs]
                for cond, rs in self.runs.items()}
        meta = {**self.meta, "classes": list(self.classes)}
        return {"schema_version": REPORT_SCHEMA_VERSION, "meta": meta, "per_class": self.per_class(),
                "means": self.means(), "runs": runs, "curves": curves, "timing": self.timing}

    @classmethod
    def from_record(cls, record: dict) -> "EvalReport":
        """Rebuild a report from ``to_record`` output; curves come back as their run means."""
        if record.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {record.get('schema_version')!r}")
        classes = tuple(record["meta"]["classes"])
        index = {name: k for k, name in enumerate(classes)}
        rep = cls(classes, timing=record.get("timing"), meta=dict(record["meta"]))
        for cond, rs in record["runs"].items():
            rep.runs[cond] = [{index[name]: dict(v) for name, v in r.items()} for r in rs]
        for cond, cc in record["curves"].items():
            rep.curves[cond] = {index[name]: [np.asarray(c["precision"])] for name, c in cc.items()}
        return rep


def render_report(report: EvalReport, out_dir) -> list[Path]:
    """Write report.json, per_class.csv, pr_curves.png and asr_by_class.png."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = report.to_record()
    paths = []

    p = out_dir / "report.json"
    p.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    paths.append(p)

    p = out_dir / "per_class.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "class", "ap", "ar", "asr", "asr_min", "asr_max", "runs"])
    for cond, classes in record["per_class"].items():
        for name, e in classes.items():
            w.writerow([cond, name] + [repr(e[m]) if m in e else "" for m in
                                       ("ap", "ar", "asr", "asr_min", "asr_max")]
                       + [len(e.get("ap_runs", []))])
    p.write_text(buf.getvalue())
    paths.append(p)

    meta = {"Software": None}
    fig, ax = plt.subplots(figsize=(5, 4))
    for cond, cc in record["curves"].items():
        if not cc:
            continue
        prec = np.mean([c["precision"] for c in cc.values()], axis=0)
        ax.plot(RECALL_POINTS, prec, label=cond)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    p = out_dir / "pr_curves.png"
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    conds = [c for c in record["per_class"] if any("asr" in e for e in record["per_class"][c].values())]
    width = 0.8 / max(len(conds), 1)
    for ci, cond in enumerate(conds):
        names = list(record["per_class"][cond])
        entries = [record["per_class"][cond][n] for n in names]
        mean = np.array([e.get("asr", 0.0) for e in entries])
        lo = np.array([e.get("asr_min", 0.0) for e in entries])
        hi = np.array([e.get("asr_max", 0.0) for e in entries])
        xs = np.arange(len(names)) + ci * width
        # plain lists: matplotlib's finiteness check warns on 0-d numpy scalars
        ax.bar(xs.tolist(), mean.tolist(), width, yerr=np.vstack([mean - lo, hi - mean]).tolist(),
               capsize=3, label=cond)
        ax.set_xticks(np.arange(len(names)) + 0.4 - width / 2, names)
    ax.set_ylabel("ASR")
    ax.set_ylim(0, 1.05)
    if conds:
        ax.legend()
    p = out_dir / "asr_by_class.png"
    fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    paths.append(p)
    return paths


def asr_whiskers(report_record: dict, condition: str) -> dict[str, tuple[float, float]]:
    return {name: (e["asr_min"], e["asr_max"])
            for name, e in report_record["per_class"][condition].items() if "asr" in e}
