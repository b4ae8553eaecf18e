import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from gradcheck import check_gradients
from hypothesis import given, settings
from hypothesis import strategies as st

from leuda.core import InvalidInputError, ProbMap
from leuda.losses import (
    DICE_EPS,
    LossBreakdown,
    NonFiniteLossError,
    WeightSnapshot,
    dice_loss,
    ensemble_adv_losses,
    generator_adv_loss,
    inter_consistency,
    intra_consistency,
    lr_at,
    multi_level_adv,
    rampup_weight,
    self_information,
    self_information_map,
    supervised_seg_loss,
    total_student_loss,
)


def peaked_logits(target: torch.Tensor, num_classes: int = 5, margin: float = 20.0):
    return F.one_hot(target, num_classes).permute(0, 3, 1, 2).float() * margin


class TestSupervised:
    def test_perfect_prediction_near_zero(self):
        target = torch.randint(0, 5, (2, 8, 8))
        target[0, 0, :5] = torch.arange(5)  # all classes present
        logits = peaked_logits(target)
        loss = supervised_seg_loss({1: logits, 3: logits.clone()}, target, {1: 1.0, 3: 0.1})
        assert loss.item() < 1e-4

    def test_uniform_probs_ce_is_natural_log_of_classes(self):
        target = torch.randint(0, 5, (1, 4, 4))
        zero_logits = torch.zeros(1, 5, 4, 4)
        loss = supervised_seg_loss({1: zero_logits}, target, {1: 1.0})
        ce = loss - dice_loss(F.softmax(zero_logits, dim=1), target)
        assert ce.item() == pytest.approx(math.log(5), abs=1e-6)

    def test_level_weighting(self):
        target = torch.randint(0, 5, (1, 8, 8))
        g = torch.Generator().manual_seed(0)
        l1 = torch.randn(1, 5, 8, 8, generator=g)
        l3 = torch.randn(1, 5, 8, 8, generator=g)
        only1 = supervised_seg_loss({1: l1}, target, {1: 1.0})
        only3 = supervised_seg_loss({3: l3}, target, {3: 1.0})
        both = supervised_seg_loss({1: l1, 3: l3}, target, {1: 1.0, 3: 0.1})
        assert both.item() == pytest.approx(only1.item() + 0.1 * only3.item(), rel=1e-6)

    def test_out_of_range_labels_rejected(self):
        logits = torch.zeros(1, 5, 4, 4)
        bad = torch.full((1, 4, 4), 5, dtype=torch.int64)
        with pytest.raises(InvalidInputError):
            supervised_seg_loss({1: logits}, bad, {1: 1.0})

    def test_float_target_rejected(self):
        logits = torch.zeros(1, 5, 4, 4)
        with pytest.raises(InvalidInputError):
            supervised_seg_loss({1: logits}, torch.zeros(1, 4, 4), {1: 1.0})

    def test_missing_level_rejected(self):
        logits = torch.zeros(1, 5, 4, 4)
        target = torch.zeros(1, 4, 4, dtype=torch.int64)
        with pytest.raises(InvalidInputError):
            supervised_seg_loss({1: logits}, target, {1: 1.0, 3: 0.1})


class TestDice:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            probs = rng.dirichlet(np.ones(5), size=(2, 6, 6)).transpose(0, 3, 1, 2)
            target = rng.integers(0, 5, size=(2, 6, 6))
            expected = []
            for c in range(1, 5):
                p = probs[:, c]
                g = (target == c).astype(np.float64)
                expected.append(1.0 - 2.0 * (p * g).sum() / (p.sum() + g.sum() + DICE_EPS))
            got = dice_loss(torch.from_numpy(probs), torch.from_numpy(target))
            assert got.item() == pytest.approx(np.mean(expected), rel=1e-10)

    def test_perfect_prediction(self):
        target = torch.stack([torch.arange(5).repeat(5).reshape(5, 5)])
        probs = F.one_hot(target, 5).permute(0, 3, 1, 2).double()
        assert dice_loss(probs, target).item() < 1e-4

    def test_absent_class_contributes_full_loss(self):
        target = torch.zeros(1, 4, 4, dtype=torch.int64)
        probs = torch.zeros(1, 5, 4, 4, dtype=torch.float64)
        probs[:, 0] = 1.0
        assert dice_loss(probs, target).item() == pytest.approx(1.0, abs=1e-6)


class TestIntraConsistency:
    def test_identical_inputs_zero(self):
        p = torch.rand(2, 5, 4, 4)
        assert intra_consistency(p, p.clone()).item() == 0.0

    def test_single_pixel_opposite_onehot(self):
        s = torch.tensor([1.0, 0.0]).reshape(1, 2, 1, 1)
        t = torch.tensor([0.0, 1.0]).reshape(1, 2, 1, 1)
        assert intra_consistency(s, t).item() == pytest.approx(1.0, abs=1e-9)

    def test_single_pixel_half_vs_onehot(self):
        s = torch.tensor([0.5, 0.5]).reshape(1, 2, 1, 1)
        t = torch.tensor([1.0, 0.0]).reshape(1, 2, 1, 1)
        assert intra_consistency(s, t).item() == pytest.approx(0.25, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            intra_consistency(torch.rand(1, 5, 4, 4), torch.rand(1, 5, 8, 8))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_symmetric(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.softmax(torch.randn(1, 3, 4, 4, generator=g), dim=1)
        b = torch.softmax(torch.randn(1, 3, 4, 4, generator=g), dim=1)
        lab = intra_consistency(a, b)
        assert lab.item() >= 0
        assert lab.item() == pytest.approx(intra_consistency(b, a).item(), rel=1e-6)


class TestSelfInformation:
    def test_one_hot_maps_to_zero(self):
        p = torch.tensor([1.0, 0.0, 0.0])
        torch.testing.assert_close(self_information(p), torch.zeros(3), atol=1e-9, rtol=0)

    def test_uniform_binary(self):
        p = torch.tensor([0.5, 0.5])
        torch.testing.assert_close(
            self_information(p), torch.tensor([0.5, 0.5]), atol=1e-5, rtol=0
        )

    def test_quarter_three_quarter(self):
        p = torch.tensor([0.25, 0.75], dtype=torch.float64)
        expected = torch.tensor([0.5, 0.31128], dtype=torch.float64)
        torch.testing.assert_close(self_information(p), expected, atol=1e-5, rtol=0)

    def test_nonnegative_on_simplex(self):
        g = torch.Generator().manual_seed(0)
        p = torch.softmax(torch.randn(100, 5, generator=g), dim=1)
        assert (self_information(p) >= 0).all()

    def test_map_wrapper(self):
        probs = np.full((5, 2, 2), 0.2, dtype=np.float32)
        info = self_information_map(ProbMap(probs))
        np.testing.assert_allclose(info.values, 0.2 * math.log2(5), atol=1e-6)


class TestInterConsistency:
    def test_identical_inputs_zero(self):
        p = torch.softmax(torch.randn(2, 5, 4, 4), dim=1)
        assert inter_consistency(p, p.clone()).item() == 0.0

    def test_single_pixel_onehot_vs_uniform(self):
        s = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        t = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(1, 2, 1, 1)
        assert inter_consistency(s, t).item() == pytest.approx(0.5, abs=1e-9)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(1)
        a = torch.softmax(torch.randn(2, 4, 3, 3, generator=g), dim=1)
        b = torch.softmax(torch.randn(2, 4, 3, 3, generator=g), dim=1)
        assert inter_consistency(a, b).item() == pytest.approx(
            inter_consistency(b, a).item(), rel=1e-6
        )

    def test_sums_channels_averages_pixels(self):
        s = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
        t = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(1, 2, 1, 1)
        s4 = s.expand(1, 2, 2, 2).contiguous()
        t4 = t.expand(1, 2, 2, 2).contiguous()
        assert inter_consistency(s4, t4).item() == pytest.approx(0.5, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            inter_consistency(torch.rand(1, 5, 4, 4), torch.rand(1, 4, 4, 4))


class TestEnsembleAdv:
    def test_log_chance_scores(self):
        zeros = torch.zeros(2, 1, 3, 3)
        d, g = ensemble_adv_losses(zeros, zeros.clone(), variant="log")
        assert d.item() == pytest.approx(2 * math.log(2), rel=1e-6)
        assert g.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_log_perfect_separation(self):
        student = torch.full((1, 1, 2, 2), -20.0)
        teacher = torch.full((1, 1, 2, 2), 20.0)
        d, _ = ensemble_adv_losses(student, teacher, variant="log")
        assert d.item() < 1e-6

    def test_least_squares_values(self):
        student = torch.full((1, 1, 2, 2), 0.5)
        teacher = torch.ones(1, 1, 2, 2)
        d, g = ensemble_adv_losses(student, teacher, variant="least_squares")
        assert g.item() == pytest.approx(0.25, abs=1e-9)
        assert d.item() == pytest.approx(0.25, abs=1e-9)
        d0, _ = ensemble_adv_losses(torch.zeros(1, 1, 2, 2), teacher, variant="least_squares")
        assert d0.item() == pytest.approx(0.0, abs=1e-9)

    def test_generator_loss_nonsaturating_gradient(self):
        score = torch.tensor([-10.0], requires_grad=True)
        g = generator_adv_loss(score, variant="log")
        g.backward()
        assert abs(score.grad.item()) > 0.9  # sigmoid(-10) ~ 0 -> gradient near -1

    def test_nonfinite_scores_raise(self):
        bad = torch.tensor([float("nan")])
        with pytest.raises(NonFiniteLossError):
            ensemble_adv_losses(bad, torch.zeros(1), variant="log")

    def test_unknown_variant(self):
        with pytest.raises(InvalidInputError):
            ensemble_adv_losses(torch.zeros(1), torch.zeros(1), variant="wasserstein")
        with pytest.raises(InvalidInputError):
            generator_adv_loss(torch.zeros(1), variant="hinge")


class TestMultiLevel:
    def test_documented_example(self):
        losses = {1: torch.tensor(0.7), 3: torch.tensor(0.5)}
        out = multi_level_adv(losses, {1: 1.0, 3: 0.1})
        assert out.item() == pytest.approx(0.75, abs=1e-9)

    def test_single_level_identity(self):
        out = multi_level_adv({1: torch.tensor(0.3, dtype=torch.float64)}, {1: 1.0})
        assert out.item() == pytest.approx(0.3, abs=1e-12)

    def test_missing_level_rejected(self):
        with pytest.raises(InvalidInputError):
            multi_level_adv({1: torch.tensor(0.3)}, {1: 1.0, 3: 0.1})


class TestTotalLoss:
    def test_documented_example(self):
        comps = [torch.tensor(float(v)) for v in (1, 2, 3, 4, 5)]
        total, breakdown = total_student_loss(*comps, WeightSnapshot(1.0, 1.0, 1.0, 1.0))
        assert total.item() == pytest.approx(15.0, abs=1e-9)
        assert breakdown.total == pytest.approx(15.0, abs=1e-12)

    def test_zero_weights_reduce_to_seg(self):
        comps = [torch.tensor(float(v)) for v in (2, 7, 7, 7, 7)]
        total, breakdown = total_student_loss(*comps, WeightSnapshot(0.0, 0.0, 0.0, 0.0))
        assert total.item() == pytest.approx(2.0, abs=1e-12)
        assert breakdown.con_intra == 7.0  # components recorded even when inactive

    @given(
        values=st.lists(
            st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=5, max_size=5
        ),
        weights=st.lists(
            st.floats(min_value=0, max_value=2, allow_nan=False), min_size=4, max_size=4
        ),
    )
    @settings(max_examples=50, deadline=None)
    def test_breakdown_additivity(self, values, weights):
        comps = [torch.tensor(v, dtype=torch.float64) for v in values]
        w = WeightSnapshot(*weights)
        total, breakdown = total_student_loss(*comps, w)
        recombined = (
            breakdown.seg
            + w.con_intra * breakdown.con_intra
            + w.adv_intra * breakdown.adv_intra
            + w.con_inter * breakdown.con_inter
            + w.adv_inter * breakdown.adv_inter
        )
        assert abs(breakdown.total - recombined) <= 1e-9
        assert abs(breakdown.recompute_total() - breakdown.total) <= 1e-9

    def test_nonfinite_component_raises(self):
        comps = [torch.tensor(1.0)] * 4 + [torch.tensor(float("inf"))]
        with pytest.raises(NonFiniteLossError):
            total_student_loss(*comps, WeightSnapshot(1.0, 1.0, 1.0, 1.0))

    def test_breakdown_dict_has_weights(self):
        comps = [torch.tensor(1.0)] * 5
        _, breakdown = total_student_loss(*comps, WeightSnapshot(0.5, 0.1, 0.2, 0.3))
        d = breakdown.as_dict()
        assert d["w_con_intra"] == 0.5
        assert d["w_adv_inter"] == 0.3
        assert isinstance(breakdown, LossBreakdown)


class TestSchedules:
    def test_rampup_endpoints(self):
        assert rampup_weight(0.0, 150.0, 1.0) == pytest.approx(math.exp(-5.0), rel=1e-12)
        assert rampup_weight(75.0, 150.0, 1.0) == pytest.approx(math.exp(-1.25), rel=1e-12)
        assert rampup_weight(150.0, 150.0, 1.0) == 1.0
        assert rampup_weight(151.0, 150.0, 1.0) == 1.0

    def test_rampup_scales_with_l_max(self):
        for l_max in (1.0, 0.01, 0.1):
            assert rampup_weight(30.0, 150.0, l_max) == pytest.approx(
                l_max * math.exp(-5.0 * (1 - 0.2) ** 2), rel=1e-12
            )

    def test_rampup_monotone(self):
        grid = np.linspace(0, 150, 301)
        vals = [rampup_weight(float(t), 150.0, 1.0) for t in grid]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_rampup_validation(self):
        with pytest.raises(InvalidInputError):
            rampup_weight(-1.0, 150.0, 1.0)
        with pytest.raises(InvalidInputError):
            rampup_weight(0.0, 0.0, 1.0)
        with pytest.raises(InvalidInputError):
            rampup_weight(0.0, 1.0, -1.0)

    def test_lr_linear_warmup(self):
        assert lr_at(0, 0.005, 30) == 0.0
        assert lr_at(15, 0.005, 30) == pytest.approx(0.0025, abs=1e-15)
        assert lr_at(30, 0.005, 30) == 0.005
        assert lr_at(100, 0.005, 30) == 0.005

    def test_lr_validation(self):
        with pytest.raises(InvalidInputError):
            lr_at(-1, 0.005, 30)


class TestGradients:
    """Spot checks; the acceptance suite runs the full 20-draw sweep."""

    def test_supervised_loss_gradients(self):
        rng = np.random.default_rng(0)
        target = torch.from_numpy(rng.integers(0, 5, size=(2, 6, 6)))
        logits = torch.randn(2, 5, 6, 6, dtype=torch.float64, requires_grad=True)
        check_gradients(
            lambda l: supervised_seg_loss({1: l}, target, {1: 1.0}), [logits], rng=rng
        )

    def test_consistency_gradients(self):
        rng = np.random.default_rng(1)
        a = torch.rand(1, 3, 4, 4, dtype=torch.float64) * 0.8 + 0.1
        b = torch.rand(1, 3, 4, 4, dtype=torch.float64) * 0.8 + 0.1
        a.requires_grad_(True)
        b.requires_grad_(True)
        check_gradients(intra_consistency, [a, b], rng=rng)
        check_gradients(inter_consistency, [a, b], rng=rng)

    def test_adversarial_gradients(self):
        rng = np.random.default_rng(2)
        for variant in ("log", "least_squares"):
            s = (torch.randn(2, 1, 3, 3, dtype=torch.float64) * 2).requires_grad_(True)
            t = (torch.randn(2, 1, 3, 3, dtype=torch.float64) * 2).requires_grad_(True)
            check_gradients(
                lambda a, b: ensemble_adv_losses(a, b, variant=variant)[0], [s, t], rng=rng
            )
            check_gradients(
                lambda a: generator_adv_loss(a, variant=variant), [s], rng=rng
            )
