"""
The seven loss terms and their weighted total.

Every term is a batch-mean scalar tensor built on an ``ActivationBundle``.
Gradient routing:

- ``loss_ae`` multiplies by a detached mask, so the localizer gets nothing.
- ``loss_pseudo`` only touches F^fg, so the classifier gets nothing.
- ``loss_bas`` runs the classifier with detached parameters when
  ``bas_detach_classifier`` is set; F^f and F^fg still receive gradient.
"""

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import masks
from .autodiff import Tensor
from .config import LossConfig, LossTerm
from .model import ActivationBundle, WsolNet, classify_features


class PseudoParts(NamedTuple):
    fg: Tensor
    bg: Tensor


class BasParts(NamedTuple):
    value: Tensor
    s_all: np.ndarray
    s_bg: np.ndarray
    skipped: np.ndarray


@dataclass
class LossBreakdown:
    """Per-term values of one batch plus the differentiable total."""
    cls: float = 0.0
    cls_fg: float = 0.0
    ae: float = 0.0
    ae_fg: float = 0.0
    pseudo: float = 0.0
    psd_fg: float = 0.0
    psd_bg: float = 0.0
    bas: float = 0.0
    s_all: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s_bg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ac: float = 0.0
    total: float = 0.0
    bas_skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    total_tensor: Tensor = field(default=None, repr=False)

    def term(self, term: LossTerm) -> float:
        return getattr(self, term.key)

    def terms(self) -> Dict[str, float]:
        return {t.value: self.term(t) for t in LossTerm}


def _masked_cross_entropy(score_map: Tensor, mask: Tensor, labels: Sequence[int]) -> Tensor:
    masked = ad.mul_elementwise(score_map, masks.downsample_mask(mask))
    return ad.cross_entropy_from_scores(ad.global_avg_pool(masked), labels)


def loss_cls(bundle: ActivationBundle, labels: Sequence[int]) -> Tensor:
    return ad.cross_entropy_from_scores(ad.global_avg_pool(bundle.score_map), labels)


def loss_cls_fg(bundle: ActivationBundle, labels: Sequence[int]) -> Tensor:
    """Classification on F^c weighted by the downsampled foreground mask."""
    return _masked_cross_entropy(bundle.score_map, bundle.foreground, labels)


def loss_ae(bundle: ActivationBundle, labels: Sequence[int], t1: float) -> Tensor:
    """Classification after hard-erasing the most confident foreground cells."""
    return _masked_cross_entropy(bundle.score_map, masks.erase_binary(bundle.foreground, t1), labels)


def loss_ae_fg(bundle: ActivationBundle, labels: Sequence[int], t2: float) -> Tensor:
    """Classification with the soft-erased foreground mask."""
    return _masked_cross_entropy(bundle.score_map, masks.erase_soft(bundle.foreground, t2), labels)


def pseudo_parts(bundle: ActivationBundle, t3: float, t4: float) -> PseudoParts:
    fg = bundle.foreground
    pseudo = masks.pseudo_labels(fg, t3, t4)
    fg_part = ad.mean(ad.mul(pseudo.fg_mask, masks.background_mask(fg)))
    bg_part = ad.mean(ad.mul(pseudo.bg_mask, fg))
    return PseudoParts(fg_part, bg_part)


def loss_pseudo(bundle: ActivationBundle, t3: float, t4: float) -> Tensor:
    """Mean absolute residual to the pseudo labels; uncertain cells contribute nothing."""
    parts = pseudo_parts(bundle, t3, t4)
    return ad.add(parts.fg, parts.bg)


def bas_from_scores(s_all: Tensor, s_bg: Tensor, epsilon: float) -> BasParts:
    """s_bg / (s_all + eps) per sample, zeroed (and flagged) where s_bg > s_all."""
    skipped = s_bg.data.reshape(-1) > s_all.data.reshape(-1)
    ratio = ad.div(s_bg, ad.add(s_all, epsilon))
    keep = ad.constant((~skipped).astype(np.float64).reshape(ratio.shape))
    value = ad.mean(ad.mul(ratio, keep))
    return BasParts(value, s_all.data.reshape(-1).copy(), s_bg.data.reshape(-1).copy(), skipped)


def bas_parts(
    bundle: ActivationBundle,
    labels: Sequence[int],
    net: WsolNet,
    epsilon: float,
    detach_classifier: bool = True,
) -> BasParts:
    if detach_classifier:
        score_map = classify_features(net, bundle.features, detach_params=True)
    else:
        score_map = bundle.score_map
    s_all = ad.select_class(ad.global_avg_pool(ad.relu(score_map)), labels)
    background = ad.mul_elementwise(bundle.features, masks.background_mask(bundle.foreground))
    bg_scores = classify_features(net, background, detach_params=detach_classifier)
    s_bg = ad.select_class(ad.global_avg_pool(ad.relu(bg_scores)), labels)
    return bas_from_scores(s_all, s_bg, epsilon)


def loss_bas(
    bundle: ActivationBundle,
    labels: Sequence[int],
    net: WsolNet,
    epsilon: float,
    detach_classifier: bool = True,
) -> Tensor:
    """Background activation suppression: fraction of class score left on background features."""
    return bas_parts(bundle, labels, net, epsilon, detach_classifier).value


def loss_ac(bundle: ActivationBundle) -> Tensor:
    """Area constraint: mean of F^fg."""
    return ad.mean(bundle.foreground)


def total_loss(
    bundle: ActivationBundle,
    labels: Sequence[int],
    net: WsolNet,
    config: LossConfig,
) -> LossBreakdown:
    """Weighted sum of the enabled terms; disabled terms are not computed and report 0."""
    th = config.thresholds
    breakdown = LossBreakdown()
    terms: Dict[LossTerm, Tensor] = {}

    if config.is_enabled(LossTerm.CLS):
        terms[LossTerm.CLS] = loss_cls(bundle, labels)
    if config.is_enabled(LossTerm.CLS_FG):
        terms[LossTerm.CLS_FG] = loss_cls_fg(bundle, labels)
    if config.is_enabled(LossTerm.AE):
        terms[LossTerm.AE] = loss_ae(bundle, labels, th.t1)
    if config.is_enabled(LossTerm.AE_FG):
        terms[LossTerm.AE_FG] = loss_ae_fg(bundle, labels, th.t2)
    if config.is_enabled(LossTerm.PSEUDO):
        parts = pseudo_parts(bundle, th.t3, th.t4)
        terms[LossTerm.PSEUDO] = ad.add(parts.fg, parts.bg)
        breakdown.psd_fg = parts.fg.item()
        breakdown.psd_bg = parts.bg.item()
    if config.is_enabled(LossTerm.BAS):
        bas = bas_parts(bundle, labels, net, config.epsilon, config.bas_detach_classifier)
        terms[LossTerm.BAS] = bas.value
        breakdown.s_all, breakdown.s_bg, breakdown.bas_skipped = bas.s_all, bas.s_bg, bas.skipped
    if config.is_enabled(LossTerm.AC):
        terms[LossTerm.AC] = loss_ac(bundle)

    total = ad.constant(np.asarray(0.0))
    for term in LossTerm:
        if term in terms:
            setattr(breakdown, term.key, terms[term].item())
            total = ad.add(total, ad.mul(terms[term], config.weight(term)))
    breakdown.total = total.item()
    breakdown.total_tensor = total
    return breakdown
