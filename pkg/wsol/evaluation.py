"""
Box extraction from foreground heatmaps and localization metrics.

Top-1 / Top-5 count a sample when the class is right (argmax / among the five
best) and the box IoU is strictly greater than the threshold; GT-known uses the
IoU criterion alone. mIoU averages IoU per class, then across classes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import orjson
from loguru import logger
from PIL import Image
from scipy import ndimage

from .autodiff import Tensor
from .config import SWEEP_THRESHOLDS, EvalConfig
from .data import Sample, stack
from .exceptions import ContractError
from .model import ClassSelect, WsolNet, forward, foreground_heatmap


@dataclass(frozen=True)
class Box:
    """Half-open integer pixel box."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ContractError("Box", f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def iou(a: Box, b: Box) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def extract_box(heatmap: np.ndarray, theta: float) -> Box:
    """Tight box of the largest 4-connected region with value >= theta * max."""
    values = np.asarray(heatmap.data if isinstance(heatmap, Tensor) else heatmap, dtype=np.float64)
    values = values.reshape(values.shape[-2:])
    peak = values.max()
    if peak <= 0:
        raise ContractError("extract_box", "heatmap has no positive value")
    binary = values >= theta * peak
    if not binary.any():
        raise ContractError("extract_box", f"nothing survives binarisation at theta={theta}")

    labels, count = ndimage.label(binary)
    ids = np.arange(1, count + 1)
    sizes = ndimage.sum_labels(binary, labels, ids)
    raster = np.arange(values.size).reshape(values.shape)
    first = ndimage.minimum(raster, labels, ids)
    # largest first, then earliest top-left raster index
    best = ids[np.lexsort((first, -sizes))[0]]
    ys, xs = ndimage.find_objects(labels)[best - 1]
    return Box(xs.start, ys.start, xs.stop, ys.stop)


@dataclass
class Prediction:
    """Class probabilities [C] and an image-resolution heatmap [S, S]."""
    probs: np.ndarray
    heatmap: np.ndarray


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    top1: float
    top5: float
    gt_known: float


@dataclass
class LocalizationReport:
    top1: float
    top5: float
    gt_known: float
    miou: float
    sweep: List[SweepPoint]
    per_class_iou: Dict[int, List[float]]
    cls_top1: float
    cls_top5: float
    count: int
    iou_threshold: float = 0.5
    theta: float = 0.45
    boxes: List[Box] = field(default_factory=list, repr=False)

    def to_table(self, sweep: bool = False) -> str:
        lines = [
            f"samples      {self.count}",
            f"theta        {self.theta:.2f}",
            f"iou > {self.iou_threshold:.2f}",
            f"  top1       {self.top1:.4f}",
            f"  top5       {self.top5:.4f}",
            f"  gt_known   {self.gt_known:.4f}",
            f"miou         {self.miou:.4f}",
            f"cls_top1     {self.cls_top1:.4f}",
            f"cls_top5     {self.cls_top5:.4f}",
        ]
        if sweep:
            lines.append("threshold  top1    top5    gt_known")
            lines += [f"{p.threshold:.1f}        {p.top1:.4f}  {p.top5:.4f}  {p.gt_known:.4f}" for p in self.sweep]
        return "\n".join(lines)

    def to_lines(self, sweep: bool = False) -> List[str]:
        """Machine-readable ``metric threshold value`` lines."""
        t = f"{self.iou_threshold:.2f}"
        lines = [
            f"top1 {t} {self.top1!r}",
            f"top5 {t} {self.top5!r}",
            f"gt_known {t} {self.gt_known!r}",
            f"miou - {self.miou!r}",
            f"cls_top1 - {self.cls_top1!r}",
            f"cls_top5 - {self.cls_top5!r}",
        ]
        if sweep:
            for p in self.sweep:
                lines += [
                    f"sweep_top1 {p.threshold:.1f} {p.top1!r}",
                    f"sweep_top5 {p.threshold:.1f} {p.top5!r}",
                    f"sweep_gt_known {p.threshold:.1f} {p.gt_known!r}",
                ]
        return lines

    def to_json(self) -> bytes:
        return orjson.dumps(
            {
                "top1": self.top1,
                "top5": self.top5,
                "gt_known": self.gt_known,
                "miou": self.miou,
                "cls_top1": self.cls_top1,
                "cls_top5": self.cls_top5,
                "count": self.count,
                "iou_threshold": self.iou_threshold,
                "theta": self.theta,
                "sweep": [p.__dict__ for p in self.sweep],
                "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            },
            option=orjson.OPT_SORT_KEYS,
        )


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best classes; ties go to the lower class index."""
    order = np.lexsort((np.arange(probs.size), -probs))
    return order[:k]


def evaluate(
    samples: Sequence[Sample],
    predictions: Sequence[Prediction],
    iou_threshold: float = 0.5,
    theta: float = 0.45,
) -> LocalizationReport:
    if len(samples) != len(predictions):
        raise ContractError("evaluate", f"{len(samples)} samples but {len(predictions)} predictions")
    if not samples:
        raise ContractError("evaluate", "nothing to evaluate")

    ious, top1_ok, top5_ok, boxes = [], [], [], []
    per_class: Dict[int, List[float]] = {}
    for i, (sample, pred) in enumerate(zip(samples, predictions)):
        if sample.gt_box is None:
            raise ContractError("evaluate", f"sample {i} ({sample.path}) has no ground-truth box")
        box = extract_box(pred.heatmap, theta)
        value = iou(box, Box(*sample.gt_box))
        boxes.append(box)
        ious.append(value)
        per_class.setdefault(sample.label, []).append(value)
        top1_ok.append(int(np.argmax(pred.probs)) == sample.label)
        top5_ok.append(sample.label in top_k(np.asarray(pred.probs), 5))

    iou_arr = np.asarray(ious)
    cls1 = np.asarray(top1_ok)
    cls5 = np.asarray(top5_ok)

    def rates(threshold: float) -> SweepPoint:
        hit = iou_arr > threshold
        return SweepPoint(
            threshold,
            float(np.mean(hit & cls1)),
            float(np.mean(hit & cls5)),
            float(np.mean(hit)),
        )

    headline = rates(iou_threshold)
    class_means = [float(np.mean(v)) for _, v in sorted(per_class.items())]
    return LocalizationReport(
        top1=headline.top1,
        top5=headline.top5,
        gt_known=headline.gt_known,
        miou=float(np.mean(class_means)),
        sweep=[rates(t) for t in SWEEP_THRESHOLDS],
        per_class_iou=dict(sorted(per_class.items())),
        cls_top1=float(np.mean(cls1)),
        cls_top5=float(np.mean(cls5)),
        count=len(samples),
        iou_threshold=iou_threshold,
        theta=theta,
        boxes=boxes,
    )


def predict(
    net: WsolNet,
    samples: Sequence[Sample],
    class_select: ClassSelect = ClassSelect.GROUND_TRUTH,
    batch_size: int = 32,
    threads: int = 1,
) -> List[Prediction]:
    """Forward every sample (no tape) and upsample its F^fg to image size."""
    size = net.config.input_size
    batches = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(batch: Sequence[Sample]) -> List[Prediction]:
        images, labels = stack(batch)
        bundle = forward(net, Tensor(images), class_select, labels)
        heatmaps = foreground_heatmap(bundle, size).data[:, 0]
        return [Prediction(bundle.probs.data[n].copy(), heatmaps[n].copy()) for n in range(len(batch))]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    logger.debug("Predicted", samples=len(samples), batches=len(batches), threads=threads)
    return [p for chunk in results for p in chunk]


def evaluate_net(net: WsolNet, samples: Sequence[Sample], config: EvalConfig, threads: int = 1) -> LocalizationReport:
    predictions = predict(net, samples, ClassSelect.GROUND_TRUTH, config.batch_size, threads)
    return evaluate(samples, predictions, config.iou_threshold, config.theta)


def save_pgm(values: np.ndarray, path: Path) -> None:
    """8-bit binary PGM (P5) of values in [0, 1], scaled by 255."""
    pixels = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(Path(path), format="PPM")


def binarize(heatmap: np.ndarray, theta: float) -> np.ndarray:
    return (heatmap >= theta * heatmap.max()).astype(np.float64)


def write_metrics(report: LocalizationReport, path: Path, sweep: bool = False) -> None:
    Path(path).write_text("\n".join(report.to_lines(sweep)) + "\n", encoding="ascii")


def report_medians(reports: Sequence[LocalizationReport]) -> Dict[str, float]:
    """Median of the headline metrics across runs (e.g. seeds)."""
    return {
        "top1": float(np.median([r.top1 for r in reports])),
        "top5": float(np.median([r.top5 for r in reports])),
        "gt_known": float(np.median([r.gt_known for r in reports])),
        "miou": float(np.median([r.miou for r in reports])),
    }
