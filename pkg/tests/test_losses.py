import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wsol import autodiff as ad
from wsol.autodiff import Tensor
from wsol.config import LossConfig, LossTerm, MaskThresholds
from wsol.losses import (
    bas_from_scores,
    bas_parts,
    loss_ac,
    loss_ae,
    loss_ae_fg,
    loss_bas,
    loss_cls,
    loss_cls_fg,
    loss_pseudo,
    total_loss,
)
from wsol.model import ActivationBundle, ClassSelect, forward


def make_bundle(score_map: np.ndarray, foreground: np.ndarray) -> ActivationBundle:
    n = score_map.shape[0]
    fg = Tensor(foreground)
    scores = Tensor(score_map)
    probs = ad.softmax(ad.global_avg_pool(scores))
    return ActivationBundle(fg, scores, fg, fg, probs, np.zeros(n, dtype=np.int64))


@pytest.fixture
def random_bundle():
    rng = np.random.default_rng(11)
    return make_bundle(rng.normal(size=(3, 4, 2, 2)), rng.uniform(0.05, 0.95, size=(3, 1, 4, 4)))


LABELS = [0, 3, 1]


def run(net, images, labels, build):
    with ad.Tape() as tape:
        bundle = forward(net, images, ClassSelect.GROUND_TRUTH, labels)
        loss = build(bundle)
    return tape.backward(loss)


class TestClassification:
    def test_identical_channels_give_log_c(self):
        bundle = make_bundle(np.full((2, 5, 2, 2), 0.7), np.full((2, 1, 4, 4), 0.5))
        assert loss_cls(bundle, [0, 4]).item() == pytest.approx(math.log(5), abs=1e-12)

    def test_closed_form_two_classes(self):
        scores = np.zeros((1, 2, 2, 2))
        scores[0, 0] = 1.0
        bundle = make_bundle(scores, np.full((1, 1, 4, 4), 0.5))
        assert loss_cls(bundle, [0]).item() == pytest.approx(0.313262, abs=1e-6)

    def test_full_foreground_collapses_to_cls(self, random_bundle):
        ones = make_bundle(random_bundle.score_map.data, np.ones((3, 1, 4, 4)))
        assert loss_cls_fg(ones, LABELS).item() == loss_cls(ones, LABELS).item()

    def test_empty_foreground_gives_log_c(self, random_bundle):
        zeros = make_bundle(random_bundle.score_map.data, np.zeros((3, 1, 4, 4)))
        assert loss_cls_fg(zeros, LABELS).item() == pytest.approx(math.log(4), abs=1e-12)


class TestErasingLosses:
    def test_no_erasing_collapses_to_cls(self, random_bundle):
        assert loss_ae(random_bundle, LABELS, 0.99).item() == loss_cls(random_bundle, LABELS).item()

    def test_no_soft_erasing_collapses_to_cls_fg(self, random_bundle):
        assert loss_ae_fg(random_bundle, LABELS, 0.99).item() == loss_cls_fg(random_bundle, LABELS).item()

    def test_full_erasing_gives_log_c(self, random_bundle):
        assert loss_ae(random_bundle, LABELS, 0.0).item() == pytest.approx(math.log(4), abs=1e-12)
        assert loss_ae_fg(random_bundle, LABELS, 0.0).item() == pytest.approx(math.log(4), abs=1e-12)


class TestPseudo:
    def test_example(self):
        bundle = make_bundle(np.zeros((1, 2, 1, 1)), np.array([[[[0.9, 0.2], [0.3, 0.05]]]]))
        assert loss_pseudo(bundle, 0.4, 0.1).item() == pytest.approx(0.0375, abs=1e-15)

    def test_uncertain_cells_contribute_nothing(self):
        bundle = make_bundle(np.zeros((1, 2, 1, 1)), np.full((1, 1, 2, 2), 0.25))
        assert loss_pseudo(bundle, 0.4, 0.1).item() == 0.0

    def test_saturated_foreground_has_zero_residual(self):
        bundle = make_bundle(np.zeros((1, 2, 1, 1)), np.ones((1, 1, 2, 2)))
        assert loss_pseudo(bundle, 0.4, 0.1).item() == 0.0


class TestBas:
    def test_ratio(self):
        parts = bas_from_scores(Tensor([[2.0]]), Tensor([[0.5]]), 1e-8)
        assert parts.value.item() == pytest.approx(0.25, abs=1e-8)
        assert not parts.skipped.any()

    def test_background_above_total_is_skipped(self):
        parts = bas_from_scores(Tensor([[2.0], [2.0]]), Tensor([[3.0], [1.0]]), 1e-8)
        np.testing.assert_array_equal(parts.skipped, [True, False])
        assert parts.value.item() == pytest.approx(0.25, abs=1e-8)

    def test_skipped_sample_gets_no_gradient(self):
        s_all = Tensor([[2.0], [2.0]], requires_grad=True)
        s_bg = Tensor([[3.0], [1.0]], requires_grad=True)
        with ad.Tape() as tape:
            value = bas_from_scores(s_all, s_bg, 1e-8).value
        grads = tape.backward(value)
        assert grads[s_bg][0, 0] == 0.0
        assert grads[s_all][0, 0] == 0.0

    @given(
        st.lists(st.tuples(st.floats(0.0, 10.0), st.floats(0.0, 10.0)), min_size=1, max_size=8),
    )
    def test_value_in_unit_interval(self, pairs):
        s_all = Tensor([[a] for a, _ in pairs])
        s_bg = Tensor([[b] for _, b in pairs])
        parts = bas_from_scores(s_all, s_bg, 1e-8)
        assert 0.0 <= parts.value.item() <= 1.0
        np.testing.assert_array_equal(parts.skipped, [b > a for a, b in pairs])

    def test_empty_foreground_keeps_every_score(self, small_net, batch):
        images, labels = batch
        bundle = forward(small_net, images, ClassSelect.GROUND_TRUTH, labels)
        bundle.foreground = Tensor(np.zeros(bundle.foreground.shape))
        parts = bas_parts(bundle, labels, small_net, 1e-8)
        np.testing.assert_array_equal(parts.s_bg, parts.s_all)
        assert not parts.skipped.any()
        expected = np.mean(parts.s_all / (parts.s_all + 1e-8))
        assert parts.value.item() == pytest.approx(expected, abs=1e-12)


class TestAreaConstraint:
    def test_half_map(self):
        bundle = make_bundle(np.zeros((2, 2, 2, 2)), np.full((2, 1, 4, 4), 0.5))
        assert loss_ac(bundle).item() == 0.5

    def test_gradient_is_uniform(self):
        fg = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 4, 4)), requires_grad=True)
        bundle = ActivationBundle(fg, fg, fg, fg, fg, np.zeros(2))
        with ad.Tape() as tape:
            value = loss_ac(bundle)
        np.testing.assert_allclose(tape.backward(value)[fg], 1.0 / 32, atol=1e-18)


class TestGradientRouting:
    def test_erasing_loss_skips_localizer(self, small_net, batch):
        images, labels = batch
        grads = run(small_net, images, labels, lambda b: loss_ae(b, labels, 0.5))
        for _, tensor in small_net.named_parameters("localizer"):
            assert not grads[tensor].any()
        assert any(grads[t].any() for _, t in small_net.named_parameters("classifier"))

    def test_pseudo_loss_skips_classifier(self, small_net, batch):
        images, labels = batch
        grads = run(small_net, images, labels, lambda b: loss_pseudo(b, 0.55, 0.45))
        for _, tensor in small_net.named_parameters("classifier"):
            assert not grads[tensor].any()

    def test_bas_skips_classifier_by_default(self, small_net, batch):
        images, labels = batch
        grads = run(small_net, images, labels, lambda b: loss_bas(b, labels, small_net, 1e-8))
        for _, tensor in small_net.named_parameters("classifier"):
            assert not grads[tensor].any()

    def test_foreground_classification_reaches_localizer(self, small_net, batch):
        images, labels = batch
        grads = run(small_net, images, labels, lambda b: loss_cls_fg(b, labels))
        assert any(grads[t].any() for _, t in small_net.named_parameters("localizer"))


class TestTotal:
    def test_cls_only(self, random_bundle, small_net):
        config = LossConfig(gamma=(0.0,) * 6).without(*(t for t in LossTerm if t is not LossTerm.CLS))
        breakdown = total_loss(random_bundle, LABELS, small_net, config)
        assert breakdown.total == breakdown.cls == loss_cls(random_bundle, LABELS).item()
        assert breakdown.ae == breakdown.bas == 0.0

    def test_total_is_weighted_sum(self, small_net, batch):
        images, labels = batch
        bundle = forward(small_net, images, ClassSelect.GROUND_TRUTH, labels)
        config = LossConfig()
        breakdown = total_loss(bundle, labels, small_net, config)
        th = config.thresholds
        independent = [
            loss_cls(bundle, labels).item(),
            loss_cls_fg(bundle, labels).item(),
            loss_ae(bundle, labels, th.t1).item(),
            loss_ae_fg(bundle, labels, th.t2).item(),
            loss_pseudo(bundle, th.t3, th.t4).item(),
            loss_bas(bundle, labels, small_net, config.epsilon).item(),
            loss_ac(bundle).item(),
        ]
        weights = [1.0, *config.gamma]
        assert breakdown.total == pytest.approx(sum(w * v for w, v in zip(weights, independent)), abs=1e-12)
        assert all(v >= 0.0 for v in breakdown.terms().values())
        assert breakdown.pseudo == pytest.approx(breakdown.psd_fg + breakdown.psd_bg, abs=1e-15)

    def test_linear_in_area_weight(self, small_net, batch):
        images, labels = batch
        bundle = forward(small_net, images, ClassSelect.GROUND_TRUTH, labels)
        base = LossConfig()
        doubled = base.model_copy(update={"gamma": (*base.gamma[:5], 2 * base.gamma[5])})
        a = total_loss(bundle, labels, small_net, base)
        b = total_loss(bundle, labels, small_net, doubled)
        assert b.total - a.total == pytest.approx(base.gamma[5] * a.ac, abs=1e-12)

    def test_disabled_terms_report_zero(self, random_bundle, small_net):
        config = LossConfig.preset("baseline").without(LossTerm.BAS)
        breakdown = total_loss(random_bundle, LABELS, small_net, config)
        assert breakdown.ae == breakdown.ae_fg == breakdown.pseudo == 0.0
        assert breakdown.cls_fg > 0.0

    def test_thresholds_are_configurable(self, random_bundle, small_net):
        config = LossConfig(thresholds=MaskThresholds(t1=0.99, t2=0.99)).without(LossTerm.BAS)
        breakdown = total_loss(random_bundle, LABELS, small_net, config)
        assert breakdown.ae == breakdown.cls
        assert breakdown.ae_fg == breakdown.cls_fg
