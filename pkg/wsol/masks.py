"""
Mask constructions over the foreground mask F^fg.

Threshold selections are computed on detached values; only values that a mask
retains (soft erase, background negation, downsampling) carry gradient.
"""

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, InvalidConfigurationError


class PseudoLabels(NamedTuple):
    labels: Tensor
    fg_mask: Tensor
    bg_mask: Tensor


def erase_binary(foreground: Tensor, t1: float) -> Tensor:
    """0 where F^fg >= t1, 1 elsewhere."""
    return ad.constant(np.where(foreground.data >= t1, 0.0, 1.0))


def erase_soft(foreground: Tensor, t2: float) -> Tensor:
    """0 where F^fg >= t2, F^fg elsewhere; kept cells pass gradient through."""
    keep = ad.constant((foreground.data < t2).astype(np.float64))
    return ad.mul(foreground, keep)


def pseudo_labels(foreground: Tensor, t3: float, t4: float) -> PseudoLabels:
    """1 on cells >= t3, 0 on cells <= t4; cells in between get no label.

    ``labels`` is only meaningful where ``fg_mask`` or ``bg_mask`` is set.
    """
    if t4 >= t3:
        raise InvalidConfigurationError("t4", t4, f"a value below t3={t3}")
    fg = (foreground.data >= t3).astype(np.float64)
    bg = (foreground.data <= t4).astype(np.float64)
    return PseudoLabels(ad.constant(fg.copy()), ad.constant(fg), ad.constant(bg))


def background_mask(foreground: Tensor) -> Tensor:
    return ad.sub(1.0, foreground)


def downsample_mask(mask: Tensor) -> Tensor:
    """Factor-two average pooling to score-map resolution."""
    if mask.ndim != 4 or mask.shape[2] % 2 or mask.shape[3] % 2:
        raise DimensionError("downsample_mask", "mask needs even spatial dimensions", (mask.shape,))
    return ad.avg_pool2d(mask, 2, 2)
