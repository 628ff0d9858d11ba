"""
Synthetic-shapes dataset and a generic directory loader.

A dataset directory holds binary PPM (P6) images and ``index.txt`` with one
sample per line::

    <relative-path> <class-id> [<x0> <y0> <x1> <y1>]

Boxes are half-open pixel coordinates. Boxes are evaluation-only: training
never reads them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image

from .autodiff import Tensor
from .config import DatasetSpec
from .exceptions import DataLoadError, InvalidConfigurationError

INDEX_FILE = "index.txt"
IMAGE_DIR = "images"

SHAPES: Tuple[str, ...] = ("square", "circle", "triangle", "diamond")
COLORS: Tuple[Tuple[float, float, float], ...] = (
    (0.9, 0.1, 0.1),
    (0.1, 0.8, 0.1),
    (0.1, 0.2, 0.9),
    (0.9, 0.9, 0.1),
    (0.8, 0.1, 0.8),
    (0.1, 0.8, 0.8),
    (0.95, 0.95, 0.95),
    (0.05, 0.05, 0.05),
)
# (shape, colour) index pairs by class; every aligned block of len(COLORS) classes uses each colour once
PAIRINGS: Tuple[Tuple[int, int], ...] = tuple(
    sorted(
        ((shape, color) for shape in range(len(SHAPES)) for color in range(len(COLORS))),
        key=lambda pair: ((pair[0] - pair[1]) % len(SHAPES), pair[1]),
    )
)
MAX_CLASSES = len(PAIRINGS)
_MAX_ATTEMPTS = 100

BoxTuple = Tuple[int, int, int, int]


@dataclass(frozen=True)
class Sample:
    """Image [3, S, S] in [0, 1], image-level label, optional ground-truth box."""
    image: Tensor
    label: int
    gt_box: Optional[BoxTuple] = None
    path: Optional[str] = None

    def without_box(self) -> "Sample":
        return replace(self, gt_box=None)


def class_appearance(label: int) -> Tuple[str, Tuple[float, float, float]]:
    """Shape type and colour of a class; the first len(COLORS) classes differ in colour."""
    shape, color = PAIRINGS[label]
    return SHAPES[shape], COLORS[color]


def rasterize(shape: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Boolean [size, size] mask of a filled shape, sampled at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    if shape == "triangle":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    raise InvalidConfigurationError("shape", shape, f"one of {SHAPES}")


def tight_box(mask: np.ndarray) -> BoxTuple:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _draw_sample(spec: DatasetSpec, label: int, index: int) -> Tuple[np.ndarray, BoxTuple]:
    s = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    shape, color = class_appearance(label)

    for _ in range(_MAX_ATTEMPTS):
        radius = rng.uniform(s / 8.0, s / 4.0)
        cx, cy = rng.uniform(radius, s - radius, size=2)
        mask = rasterize(shape, cx, cy, radius, s)
        # regenerate degenerate or oversized draws
        if mask.sum() < 4 or mask.mean() > 0.5:
            continue
        break
    else:
        raise InvalidConfigurationError("image_size", s, "room for a shape")

    base = rng.uniform(0.35, 0.65)
    image = base + spec.noise_level * 0.5 * rng.uniform(-1.0, 1.0, size=(s, s, 3))
    tint = np.asarray(color) + spec.noise_level * 0.1 * rng.uniform(-1.0, 1.0, size=(s, s, 3))
    image[mask] = tint[mask]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, tight_box(mask)


def _to_sample(pixels: np.ndarray, label: int, box: Optional[BoxTuple], path: Optional[str]) -> Sample:
    image = Tensor(pixels.transpose(2, 0, 1).astype(np.float64) / 255.0)
    return Sample(image=image, label=label, gt_box=box, path=path)


def generate(spec: DatasetSpec, out_dir: Optional[Path] = None) -> List[Sample]:
    """Draw samples_per_class samples of every class; optionally write the directory."""
    if spec.num_classes > MAX_CLASSES:
        raise InvalidConfigurationError("num_classes", spec.num_classes, f"at most {MAX_CLASSES}")
    samples = []
    pixels_by_path = []
    index = 0
    for label in range(spec.num_classes):
        for k in range(spec.samples_per_class):
            pixels, box = _draw_sample(spec, label, index)
            rel = f"{IMAGE_DIR}/c{label:02d}_{k:04d}.ppm"
            samples.append(_to_sample(pixels, label, box, rel))
            pixels_by_path.append((rel, pixels))
            index += 1

    if out_dir is not None:
        out = Path(out_dir)
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        for rel, pixels in pixels_by_path:
            Image.fromarray(pixels).save(out / rel, format="PPM")
        write_index(samples, out / INDEX_FILE)
        logger.info("Wrote synthetic dataset", path=str(out), samples=len(samples), classes=spec.num_classes)
    return samples


def write_index(samples: Sequence[Sample], path: Path) -> None:
    lines = []
    for sample in samples:
        fields = [sample.path, str(sample.label)]
        if sample.gt_box is not None:
            fields += [str(v) for v in sample.gt_box]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_image(path: Path) -> np.ndarray:
    """8-bit RGB pixels [H, W, 3] of a PPM (or any Pillow-readable) file."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _parse_int(token: str, what: str, path: str, number: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise DataLoadError(path, f"{what} '{token}' is not an integer", number)


def load(directory: Path) -> List[Sample]:
    """Read a dataset directory in index order; errors name the index line."""
    root = Path(directory)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise DataLoadError(str(index_path), "index file missing")
    where = str(index_path)

    samples = []
    for number, encoded in enumerate(index_path.read_bytes().splitlines(), start=1):
        try:
            line = encoded.decode("ascii").strip()
        except UnicodeDecodeError:
            raise DataLoadError(where, "line is not ASCII text", number)
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (2, 6):
            raise DataLoadError(where, f"expected 2 or 6 fields, got {len(fields)}", number)
        rel = fields[0]
        label = _parse_int(fields[1], "class id", where, number)
        if label < 0:
            raise DataLoadError(where, f"negative class id {label}", number)
        image_path = root / rel
        if not image_path.is_file():
            raise DataLoadError(where, f"image '{rel}' not found", number)
        try:
            pixels = read_image(image_path)
        except OSError as e:
            raise DataLoadError(where, f"unreadable image '{rel}': {e}", number)

        box = None
        if len(fields) == 6:
            x0, y0, x1, y1 = (_parse_int(v, "box coordinate", where, number) for v in fields[2:])
            height, width = pixels.shape[:2]
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise DataLoadError(where, f"box ({x0}, {y0}, {x1}, {y1}) out of range for {width}x{height}", number)
            box = (x0, y0, x1, y1)
        samples.append(_to_sample(pixels, label, box, rel))

    if not samples:
        raise DataLoadError(where, "index lists no samples")
    logger.debug("Loaded dataset", path=str(root), samples=len(samples))
    return samples


def strip_boxes(samples: Sequence[Sample]) -> List[Sample]:
    """The training view of a dataset: images and labels only."""
    return [s.without_box() for s in samples]


def num_classes_of(samples: Sequence[Sample]) -> int:
    return max(s.label for s in samples) + 1


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch images [N, 3, S, S] and labels [N]."""
    images = np.stack([s.image.data for s in samples])
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return images, labels
