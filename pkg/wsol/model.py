"""
The three-part localization network: a shared feature extractor, a classifier
and a localizer.

Symbols used in docstrings: F^f is the feature map, F^c the classifier score
map, F^cam the localizer's class activation map and F^fg the single-class
foreground mask sliced out of F^cam.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .exceptions import ContractError, DimensionError

EXTRACTOR = "extractor"
CLASSIFIER = "classifier"
LOCALIZER = "localizer"

# spread of [0, 1] pixel values once each image channel is centred on its mean
INPUT_STD = 0.25


class ClassSelect(str, Enum):
    """Which F^cam channel becomes F^fg."""
    GROUND_TRUTH = "ground-truth"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int


def layer_specs(config: ModelConfig) -> List[ConvSpec]:
    """Parameterised layers in a fixed order; a pure function of the config."""
    cf, c = config.feature_channels, config.num_classes
    specs = []
    for i in range(config.backbone_blocks):
        stride = 2 if i < config.downsampling_stages else 1
        specs.append(ConvSpec(f"{EXTRACTOR}.block{i}", 3 if i == 0 else cf, cf, 3, stride, 1))
    specs += [
        ConvSpec(f"{CLASSIFIER}.reduce", cf, cf, 3, 2, 1),
        ConvSpec(f"{CLASSIFIER}.head", cf, c, 1, 1, 0),
        ConvSpec(f"{LOCALIZER}.conv", cf, cf, 3, 1, 1),
        ConvSpec(f"{LOCALIZER}.head", cf, c, 1, 1, 0),
    ]
    return specs


@dataclass
class ActivationBundle:
    """One forward pass: F^f, F^c, F^cam, F^fg, class probabilities p, and the sliced classes."""
    features: Tensor
    score_map: Tensor
    cam: Tensor
    foreground: Tensor
    probs: Tensor
    classes: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]


def standardize(images: np.ndarray) -> np.ndarray:
    """Centre every channel of every image on its own mean and divide by INPUT_STD."""
    return (images - images.mean(axis=(2, 3), keepdims=True)) / INPUT_STD


class WsolNet:
    """Parameter container for the extractor, classifier and localizer convolutions."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.specs = layer_specs(config)
        self._params = params

    @property
    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def named_parameters(self, group: Optional[str] = None) -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            if group is None or name.startswith(group + "."):
                yield name, tensor

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Swap in new parameter values; names and shapes must match exactly."""
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) ^ set(arrays))
            raise DimensionError("load_arrays", f"parameter names differ: {missing}")
        for name, array in arrays.items():
            if array.shape != self._params[name].shape:
                raise DimensionError("load_arrays", f"shape of {name}", (array.shape, self._params[name].shape))
        self._params = {name: Tensor(arrays[name], requires_grad=True) for name in self._params}

    def _conv(self, spec: ConvSpec, x: Tensor, detach_params: bool = False) -> Tensor:
        weight = self._params[f"{spec.name}.weight"]
        bias = self._params[f"{spec.name}.bias"]
        if detach_params:
            weight, bias = ad.detach(weight), ad.detach(bias)
        return ad.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)

    def _spec(self, name: str) -> ConvSpec:
        return next(s for s in self.specs if s.name == name)

    def extract(self, image: Tensor) -> Tensor:
        x = Tensor(standardize(image.data))
        for spec in self.specs:
            if spec.name.startswith(EXTRACTOR + "."):
                x = ad.relu(self._conv(spec, x))
        return x

    def classify(self, features: Tensor, detach_params: bool = False) -> Tensor:
        hidden = ad.relu(self._conv(self._spec(f"{CLASSIFIER}.reduce"), features, detach_params))
        return self._conv(self._spec(f"{CLASSIFIER}.head"), hidden, detach_params)

    def localize(self, features: Tensor) -> Tensor:
        hidden = ad.relu(self._conv(self._spec(f"{LOCALIZER}.conv"), features))
        return ad.sigmoid(self._conv(self._spec(f"{LOCALIZER}.head"), hidden))


def init(config: ModelConfig) -> WsolNet:
    """He-uniform relu convs, Glorot-uniform 1x1 heads, from the seeded generator; biases zero."""
    rng = np.random.default_rng(config.seed)
    params: Dict[str, Tensor] = {}
    for spec in layer_specs(config):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        if spec.kernel > 1:
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + spec.out_channels))
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        params[f"{spec.name}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)
    return WsolNet(config, params)


def forward(
    net: WsolNet,
    image: Tensor,
    class_select: ClassSelect = ClassSelect.GROUND_TRUTH,
    labels: Optional[Sequence[int]] = None,
) -> ActivationBundle:
    """Run E_f, then E_c and E_l on the shared features, and slice F^fg."""
    s = net.config.input_size
    if image.ndim != 4 or image.shape[1:] != (3, s, s):
        raise DimensionError("forward", f"expected [N, 3, {s}, {s}] images", (image.shape,))
    features = net.extract(image)
    score_map = net.classify(features)
    cam = net.localize(features)
    probs = ad.softmax(ad.global_avg_pool(score_map))

    if class_select is ClassSelect.GROUND_TRUTH:
        if labels is None:
            raise ContractError("forward", "ground-truth class selection needs labels")
        classes = np.asarray(labels, dtype=np.int64).reshape(-1)
    else:
        classes = np.argmax(probs.data, axis=1)
    foreground = ad.select_class(cam, classes)
    return ActivationBundle(features, score_map, cam, foreground, probs, classes)


def classify_features(net: WsolNet, features: Tensor, detach_params: bool = False) -> Tensor:
    """Apply the classifier alone to (possibly masked) features."""
    expected = (net.config.feature_channels, net.config.feature_size, net.config.feature_size)
    if features.ndim != 4 or features.shape[1:] != expected:
        raise DimensionError("classify_features", f"expected [N, {expected[0]}, {expected[1]}, {expected[2]}]", (features.shape,))
    return net.classify(features, detach_params=detach_params)


def foreground_heatmap(bundle: ActivationBundle, image_size: int) -> Tensor:
    """F^fg interpolated to image resolution."""
    return ad.bilinear_upsample(bundle.foreground, image_size, image_size)
