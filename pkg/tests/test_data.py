import numpy as np
import pytest

from wsol.config import DatasetSpec, validated
from wsol.data import (
    COLORS,
    INDEX_FILE,
    MAX_CLASSES,
    SHAPES,
    class_appearance,
    generate,
    load,
    rasterize,
    read_image,
    strip_boxes,
    tight_box,
)
from wsol.exceptions import DataLoadError, InvalidConfigurationError


def directory_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_same_seed_is_byte_identical(self, tmp_path, tiny_spec):
        generate(tiny_spec, tmp_path / "a")
        generate(tiny_spec, tmp_path / "b")
        assert directory_bytes(tmp_path / "a") == directory_bytes(tmp_path / "b")

    def test_different_seed_changes_images(self, tiny_spec):
        a = generate(tiny_spec)
        b = generate(tiny_spec.model_copy(update={"seed": tiny_spec.seed + 1}))
        assert any(not np.array_equal(x.image.data, y.image.data) for x, y in zip(a, b))

    def test_class_counts(self, tiny_spec):
        samples = generate(tiny_spec)
        labels = [s.label for s in samples]
        assert len(samples) == tiny_spec.num_classes * tiny_spec.samples_per_class
        for c in range(tiny_spec.num_classes):
            assert labels.count(c) == tiny_spec.samples_per_class

    def test_boxes_are_tight_bounds_of_the_shape(self):
        spec = DatasetSpec(num_classes=8, samples_per_class=3, image_size=32, noise_level=0.0, seed=5)
        for sample in generate(spec):
            _, color = class_appearance(sample.label)
            pixels = np.round(sample.image.data.transpose(1, 2, 0) * 255.0)
            # noise-free shapes are painted in their exact class colour
            mask = np.all(pixels == np.round(np.clip(color, 0, 1) * 255.0), axis=2)
            ys, xs = np.nonzero(mask)
            assert sample.gt_box == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)

    def test_boxes_lie_inside_the_image(self, tiny_spec):
        s = tiny_spec.image_size
        for sample in generate(tiny_spec):
            x0, y0, x1, y1 = sample.gt_box
            assert 0 <= x0 < x1 <= s and 0 <= y0 < y1 <= s
            assert sample.image.shape == (3, s, s)
            assert 0.0 <= sample.image.data.min() and sample.image.data.max() <= 1.0

    def test_classes_pair_shape_and_colour(self):
        seen = {class_appearance(c) for c in range(MAX_CLASSES)}
        assert len(seen) == MAX_CLASSES == len(SHAPES) * len(COLORS)

    def test_default_classes_have_distinct_colours(self):
        appearances = [class_appearance(c) for c in range(DatasetSpec().num_classes)]
        assert len({color for _, color in appearances}) == len(appearances)
        assert {shape for shape, _ in appearances} == set(SHAPES)

    def test_too_many_classes(self):
        with pytest.raises(InvalidConfigurationError):
            generate(DatasetSpec(num_classes=MAX_CLASSES + 1, samples_per_class=1))

    @pytest.mark.parametrize("values", [{"num_classes": 1}, {"image_size": 8}, {"noise_level": 1.5}])
    def test_invalid_spec(self, values):
        with pytest.raises(InvalidConfigurationError):
            validated(DatasetSpec, values)


class TestRasterize:
    @pytest.mark.parametrize("shape", ["square", "circle", "triangle", "diamond"])
    def test_shape_is_centred_and_bounded(self, shape):
        mask = rasterize(shape, 16.0, 16.0, 6.0, 32)
        x0, y0, x1, y1 = tight_box(mask)
        assert mask[16, 16] or mask[15, 15]
        assert x0 >= 10 and x1 <= 22 and y0 >= 10 and y1 <= 22

    def test_unknown_shape(self):
        with pytest.raises(InvalidConfigurationError):
            rasterize("hexagon", 8.0, 8.0, 3.0, 16)


class TestLoad:
    def test_round_trip_within_quantisation(self, dataset_dir, tiny_spec):
        generated = generate(tiny_spec)
        loaded = load(dataset_dir)
        assert [s.label for s in loaded] == [s.label for s in generated]
        assert [s.gt_box for s in loaded] == [s.gt_box for s in generated]
        for a, b in zip(loaded, generated):
            assert np.max(np.abs(a.image.data - b.image.data)) <= 1.0 / 255.0

    def test_ppm_files_are_binary_p6(self, dataset_dir):
        first = next((dataset_dir / "images").iterdir())
        assert first.read_bytes()[:2] == b"P6"
        assert read_image(first).dtype == np.uint8

    def test_line_without_box(self, dataset_dir):
        lines = (dataset_dir / INDEX_FILE).read_text().splitlines()
        path, label = lines[0].split()[:2]
        (dataset_dir / INDEX_FILE).write_text(f"{path} {label}\n")
        (sample,) = load(dataset_dir)
        assert sample.gt_box is None
        assert sample.label == int(label)

    @pytest.mark.parametrize(
        "line, fragment",
        [
            ("{path} 0 10 4 5 9", "out of range"),
            ("{path} 0 1 2 3", "fields"),
            ("{path} zero", "not an integer"),
            ("images/missing.ppm 0", "not found"),
            ("{path} -1", "negative"),
        ],
    )
    def test_bad_lines_name_the_line(self, dataset_dir, line, fragment):
        index = dataset_dir / INDEX_FILE
        good = index.read_text().splitlines()[0]
        path = good.split()[0]
        index.write_text(f"# header\n{good}\n{line.format(path=path)}\n")
        with pytest.raises(DataLoadError) as info:
            load(dataset_dir)
        assert info.value.line_number == 3
        assert fragment in info.value.message

    def test_non_ascii_line_names_the_line(self, dataset_dir):
        index = dataset_dir / INDEX_FILE
        count = len(index.read_bytes().splitlines())
        with index.open("ab") as f:
            f.write("images/café.ppm 0\n".encode("utf-8"))
        with pytest.raises(DataLoadError) as info:
            load(dataset_dir)
        assert info.value.line_number == count + 1
        assert "ASCII" in info.value.message

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataLoadError):
            load(tmp_path)

    def test_strip_boxes_removes_supervision(self, dataset_dir):
        stripped = strip_boxes(load(dataset_dir))
        assert all(s.gt_box is None for s in stripped)
