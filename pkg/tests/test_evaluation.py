from collections import deque

import numpy as np
import orjson
import pytest
from hypothesis import given, settings, strategies as st

from wsol.autodiff import Tensor
from wsol.config import SWEEP_THRESHOLDS
from wsol.data import Sample
from wsol.evaluation import (
    Box,
    LocalizationReport,
    Prediction,
    evaluate,
    extract_box,
    iou,
    predict,
    save_pgm,
    top_k,
)
from wsol.exceptions import ContractError
from wsol.model import ClassSelect
from PIL import Image


def raster(box: Box, size: int = 64) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[box.y0:box.y1, box.x0:box.x1] = True
    return mask


def pixel_iou(a: Box, b: Box) -> float:
    ma, mb = raster(a), raster(b)
    return int((ma & mb).sum()) / int((ma | mb).sum())


def flood_fill_box(binary: np.ndarray) -> Box:
    """Largest 4-connected region by BFS in raster order; earliest seed wins ties."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    best = None
    for y in range(h):
        for x in range(w):
            if not binary[y, x] or seen[y, x]:
                continue
            queue, members = deque([(y, x)]), []
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                members.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            if best is None or len(members) > len(best):
                best = members
    ys = [p[0] for p in best]
    xs = [p[1] for p in best]
    return Box(min(xs), min(ys), max(xs) + 1, max(ys) + 1)


@st.composite
def boxes(draw, size=64):
    x0 = draw(st.integers(0, size - 1))
    y0 = draw(st.integers(0, size - 1))
    return Box(x0, y0, draw(st.integers(x0 + 1, size)), draw(st.integers(y0 + 1, size)))


def sample(label: int, box, size: int = 16) -> Sample:
    return Sample(Tensor(np.zeros((3, size, size))), label, box)


def heatmap_for(box, size: int = 16) -> np.ndarray:
    heat = np.full((size, size), 0.01)
    heat[box[1]:box[3], box[0]:box[2]] = 1.0
    return heat


def one_hot(label: int, classes: int = 6) -> np.ndarray:
    probs = np.full(classes, 0.01)
    probs[label] = 1.0
    return probs / probs.sum()


class TestIou:
    def test_examples(self):
        a = Box(0, 0, 10, 10)
        assert iou(a, a) == 1.0
        assert iou(a, Box(5, 5, 15, 15)) == 1 / 7
        assert iou(a, Box(10, 0, 20, 10)) == 0.0

    def test_degenerate_box_is_rejected(self):
        with pytest.raises(ContractError):
            Box(3, 0, 3, 5)

    @given(boxes(), boxes())
    @settings(max_examples=10_000, deadline=None)
    def test_matches_pixel_oracle(self, a, b):
        assert iou(a, b) == pixel_iou(a, b)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        value = iou(a, b)
        assert value == iou(b, a)
        assert 0.0 <= value <= 1.0
        assert (value == 1.0) == (a == b)


class TestExtractBox:
    def test_filled_rectangle(self):
        heat = np.zeros((16, 16))
        heat[3:7, 5:12] = 1.0
        assert extract_box(heat, 0.5) == Box(5, 3, 12, 7)

    def test_largest_component_wins(self):
        heat = np.zeros((16, 16))
        heat[0:2, 0:2] = 1.0
        heat[8:11, 8:11] = 0.9
        assert extract_box(heat, 0.5) == Box(8, 8, 11, 11)

    def test_constant_map_gives_full_image(self):
        assert extract_box(np.full((1, 12, 12), 0.3), 0.45) == Box(0, 0, 12, 12)

    def test_size_tie_goes_to_earliest_component(self):
        heat = np.zeros((10, 10))
        heat[6:8, 1:3] = 1.0
        heat[1:3, 6:8] = 1.0
        assert extract_box(heat, 0.5) == Box(6, 1, 8, 3)

    def test_empty_binarisation_is_an_error(self):
        with pytest.raises(ContractError):
            extract_box(np.full((8, 8), 0.5), 1.5)
        with pytest.raises(ContractError):
            extract_box(np.zeros((8, 8)), 0.5)

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            h, w = rng.integers(1, 33, size=2)
            binary = rng.uniform(size=(h, w)) < rng.uniform(0.2, 0.7)
            if not binary.any():
                binary[rng.integers(h), rng.integers(w)] = True
            assert extract_box(binary.astype(float), 1.0) == flood_fill_box(binary)


class TestEvaluate:
    def test_perfect_predictions(self):
        boxes_ = [(2, 2, 8, 8), (4, 1, 12, 6), (0, 0, 16, 16)]
        samples = [sample(i, b) for i, b in enumerate(boxes_)]
        predictions = [Prediction(one_hot(i), heatmap_for(b)) for i, b in enumerate(boxes_)]
        report = evaluate(samples, predictions)
        assert (report.top1, report.top5, report.gt_known, report.miou) == (1.0, 1.0, 1.0, 1.0)
        assert report.cls_top1 == report.cls_top5 == 1.0
        assert report.count == 3

    def test_miou_averages_per_class_first(self):
        gt = (0, 0, 10, 10)
        # predicted boxes with IoU 0.5, 0.7 for class 0 and 0.2 for class 1
        predicted = [(0, 0, 10, 5), (0, 0, 10, 7), (0, 0, 10, 2)]
        samples = [sample(0, gt), sample(0, gt), sample(1, gt)]
        predictions = [Prediction(one_hot(s.label), heatmap_for(p)) for s, p in zip(samples, predicted)]
        report = evaluate(samples, predictions)
        assert report.per_class_iou == {0: [0.5, 0.7], 1: [0.2]}
        assert report.miou == pytest.approx(0.4, abs=1e-15)

    def test_boundary_iou_is_not_a_hit(self):
        samples = [sample(0, (0, 0, 10, 10))]
        predictions = [Prediction(one_hot(0), heatmap_for((0, 0, 10, 5)))]
        report = evaluate(samples, predictions, iou_threshold=0.5)
        assert report.gt_known == 0.0
        assert report.top1 == 0.0

    def test_wrong_class_still_counts_for_gt_known(self):
        samples = [sample(0, (2, 2, 8, 8))]
        predictions = [Prediction(one_hot(3), heatmap_for((2, 2, 8, 8)))]
        report = evaluate(samples, predictions)
        assert (report.top1, report.top5, report.gt_known) == (0.0, 1.0, 1.0)

    def test_sample_without_box(self):
        with pytest.raises(ContractError):
            evaluate([sample(0, None)], [Prediction(one_hot(0), heatmap_for((0, 0, 4, 4)))])

    def test_top_k_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(top_k(np.array([0.1, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0]), 5), [1, 2, 3, 0, 4])

    def test_ordering_and_monotone_sweep_on_random_inputs(self):
        rng = np.random.default_rng(1)
        samples, predictions = [], []
        for _ in range(60):
            x0, y0 = rng.integers(0, 12, size=2)
            gt = (int(x0), int(y0), int(x0 + rng.integers(1, 5)), int(y0 + rng.integers(1, 5)))
            samples.append(sample(int(rng.integers(6)), gt))
            predictions.append(Prediction(rng.dirichlet(np.ones(6)), rng.uniform(size=(16, 16))))
        report = evaluate(samples, predictions)
        assert [p.threshold for p in report.sweep] == list(SWEEP_THRESHOLDS)
        for point in report.sweep:
            assert point.top1 <= point.top5 <= point.gt_known
        for field in ("top1", "top5", "gt_known"):
            values = [getattr(p, field) for p in report.sweep]
            assert all(a >= b for a, b in zip(values, values[1:]))

    def test_report_formats(self):
        samples = [sample(0, (2, 2, 8, 8))]
        report = evaluate(samples, [Prediction(one_hot(0), heatmap_for((2, 2, 8, 8)))])
        assert len(report.to_lines()) == 6
        assert len(report.to_lines(sweep=True)) == 6 + 3 * 9
        assert report.to_lines()[0].split() == ["top1", "0.50", "1.0"]
        table = report.to_table(sweep=True)
        assert "0.9" in table.splitlines()[-1]
        decoded = orjson.loads(report.to_json())
        assert decoded["gt_known"] == 1.0
        assert len(decoded["sweep"]) == 9
        assert isinstance(report, LocalizationReport)


class TestPredict:
    def test_heatmaps_have_image_size(self, small_net, dataset_dir):
        from wsol.data import load

        samples = load(dataset_dir)
        predictions = predict(small_net, samples, ClassSelect.GROUND_TRUTH, batch_size=4)
        assert len(predictions) == len(samples)
        for pred in predictions:
            assert pred.heatmap.shape == (32, 32)
            assert pred.probs.shape == (3,)

    def test_threads_keep_order(self, small_net, dataset_dir):
        from wsol.data import load

        samples = load(dataset_dir)
        serial = predict(small_net, samples, batch_size=2, threads=1)
        parallel = predict(small_net, samples, batch_size=2, threads=3)
        for a, b in zip(serial, parallel):
            assert a.heatmap.tobytes() == b.heatmap.tobytes()


def test_save_pgm(tmp_path):
    values = np.linspace(0.0, 1.0, 12).reshape(3, 4)
    path = tmp_path / "heat.pgm"
    save_pgm(values, path)
    assert path.read_bytes()[:2] == b"P5"
    with Image.open(path) as img:
        assert img.size == (4, 3)
        pixels = np.asarray(img)
    assert pixels[0, 0] == 0 and pixels[-1, -1] == 255
