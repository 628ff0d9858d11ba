"""
Finite-difference verification of every loss term's backward pass.

Each term is differentiated on its own tape and compared against central
differences (step 1e-5) on every parameter of a small two-class net with a
64x64 input and an 8x8 feature map. Mask thresholds are placed midway between
neighbouring F^fg values, and coordinates whose perturbation flips a relu,
a threshold mask or a BAS skip decision are not scored.

The default BAS routing, with classifier parameters detached, gets one more
check: its extractor and localizer gradients must match the same finite
differences and its classifier gradients must be exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from . import autodiff as ad
from .autodiff import Tensor
from .config import DatasetSpec, LossConfig, LossTerm, MaskThresholds, ModelConfig
from .data import generate, stack
from .instrumentation import PerformanceTracker
from .losses import total_loss
from .model import CLASSIFIER, ClassSelect, WsolNet, forward, init

STEP = 1e-5
DETACHED_BAS = "bas-detached"
TOLERANCE = 1e-4
GRAD_FLOOR = 1e-5

Arrays = Dict[str, np.ndarray]
GradHook = Callable[[str, Arrays], Arrays]


@dataclass
class TermCheck:
    term: str
    worst_error: float
    worst_param: str
    skipped: int

    @property
    def passed(self) -> bool:
        return self.worst_error < TOLERANCE


@dataclass
class GradcheckReport:
    checks: List[TermCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> List[str]:
        return [
            f"{c.term:<12} worst_rel_err={c.worst_error:.3e} param={c.worst_param} "
            f"skipped={c.skipped} {'ok' if c.passed else 'FAIL'}"
            for c in self.checks
        ]


def toy_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(input_size=64, num_classes=2, feature_channels=3, feature_stride=8, backbone_blocks=3, seed=seed)


def _gap_midpoint(values: np.ndarray, quantile: float) -> float:
    ordered = np.unique(values)
    k = min(int(quantile * (ordered.size - 1)), ordered.size - 2)
    return float((ordered[k] + ordered[k + 1]) / 2.0)


def fitted_thresholds(foreground: np.ndarray) -> MaskThresholds:
    """t1..t4 between observed F^fg values so every mask has members on both sides."""
    high = _gap_midpoint(foreground, 0.8)
    return MaskThresholds(
        t1=high,
        t2=high,
        t3=_gap_midpoint(foreground, 0.5),
        t4=_gap_midpoint(foreground, 0.2),
    )


def _single_term(base: LossConfig, term: LossTerm) -> LossConfig:
    config = base.without(*(t for t in LossTerm if t is not term))
    return config.model_copy(update={"gamma": (1.0,) * 6})


class _Probe:
    """Evaluates all seven terms for given parameter values, plus a smoothness signature."""

    def __init__(self, net: WsolNet, images: np.ndarray, labels: np.ndarray, config: LossConfig):
        self.net = net
        self.images = Tensor(images)
        self.labels = labels
        self.config = config

    def __call__(self, arrays: Arrays) -> Tuple[Dict[str, float], bytes]:
        self.net.load_arrays(arrays)
        th = self.config.thresholds
        with ad.Tape() as tape:
            bundle = forward(self.net, self.images, ClassSelect.GROUND_TRUTH, self.labels)
            breakdown = total_loss(bundle, self.labels, self.net, self.config)
        fg = bundle.foreground.data
        bits = [n.inputs[0].data > 0 for n in tape.nodes if n.op == "relu"]
        bits += [fg >= th.t1, fg >= th.t2, fg >= th.t3, fg <= th.t4, breakdown.bas_skipped]
        signature = np.packbits(np.concatenate([b.ravel() for b in bits])).tobytes()
        return breakdown.terms(), signature


def _analytic(net: WsolNet, images: np.ndarray, labels: np.ndarray, config: LossConfig) -> Arrays:
    params = net.parameters
    with ad.Tape() as tape:
        bundle = forward(net, Tensor(images), ClassSelect.GROUND_TRUTH, labels)
        breakdown = total_loss(bundle, labels, net, config)
    grads = tape.backward(breakdown.total_tensor)
    return {name: grads[t].copy() for name, t in params.items()}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _detached_check(analytic: Arrays, numeric: Arrays, scored: Dict[str, np.ndarray], skipped: int) -> TermCheck:
    worst, worst_name = 0.0, ""
    for name, grad in analytic.items():
        if name.startswith(CLASSIFIER + "."):
            # any leak through the detached classifier fails outright
            error = 0.0 if not grad.any() else float("inf")
        else:
            error = relative_error(grad[scored[name]], numeric[name][scored[name]])
        if error >= worst:
            worst, worst_name = error, name
    return TermCheck(DETACHED_BAS, worst, worst_name, skipped)


def run_gradcheck(seed: int = 0, grad_hook: Optional[GradHook] = None) -> GradcheckReport:
    """Check all seven terms and the detached BAS routing.

    ``grad_hook`` may rewrite analytic gradients (for detector tests).
    """
    tracker = PerformanceTracker("gradcheck")
    samples = generate(DatasetSpec(num_classes=2, samples_per_class=1, image_size=64, seed=seed))
    images, labels = stack(samples)
    net = init(toy_model_config(seed))
    base_arrays = {name: a.copy() for name, a in net.arrays().items()}

    bundle = forward(net, Tensor(images), ClassSelect.GROUND_TRUTH, labels)
    # detach only stops gradients; finite differences see the full dependence
    config = LossConfig(thresholds=fitted_thresholds(bundle.foreground.data), bas_detach_classifier=False)

    analytic: Dict[str, Arrays] = {}
    for term in LossTerm:
        net.load_arrays(base_arrays)
        grads = _analytic(net, images, labels, _single_term(config, term))
        analytic[term.value] = grad_hook(term.value, grads) if grad_hook else grads

    probe = _Probe(net, images, labels, config)
    _, reference = probe(base_arrays)
    numeric = {term.value: {n: np.zeros_like(a) for n, a in base_arrays.items()} for term in LossTerm}
    scored = {n: np.ones(a.shape, dtype=bool) for n, a in base_arrays.items()}

    for name, array in base_arrays.items():
        for index in np.ndindex(array.shape):
            values = {}
            signatures = []
            for sign in (1.0, -1.0):
                perturbed = dict(base_arrays)
                moved = array.copy()
                moved[index] += sign * STEP
                perturbed[name] = moved
                values[sign], sig = probe(perturbed)
                signatures.append(sig)
            if any(sig != reference for sig in signatures):
                scored[name][index] = False
                continue
            for term in LossTerm:
                t = term.value
                numeric[t][name][index] = (values[1.0][t] - values[-1.0][t]) / (2.0 * STEP)
    net.load_arrays(base_arrays)

    report = GradcheckReport()
    skipped = int(sum(np.count_nonzero(~mask) for mask in scored.values()))
    for term in LossTerm:
        worst, worst_name = 0.0, ""
        for name in base_arrays:
            mask = scored[name]
            error = relative_error(analytic[term.value][name][mask], numeric[term.value][name][mask])
            if error >= worst:
                worst, worst_name = error, name
        report.checks.append(TermCheck(term.value, worst, worst_name, skipped))
    detached = config.model_copy(update={"bas_detach_classifier": True})
    net.load_arrays(base_arrays)
    grads = _analytic(net, images, labels, _single_term(detached, LossTerm.BAS))
    if grad_hook:
        grads = grad_hook(DETACHED_BAS, grads)
    report.checks.append(_detached_check(grads, numeric[LossTerm.BAS.value], scored, skipped))
    net.load_arrays(base_arrays)

    tracker.add_metric("parameters", net.parameter_count())
    tracker.add_metric("skipped", skipped)
    report.seconds = tracker.finish()
    logger.info("Gradient check finished", passed=report.passed, seconds=round(report.seconds, 2))
    return report
