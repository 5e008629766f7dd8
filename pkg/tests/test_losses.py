import math

import numpy as np
import pytest
import torch

from latrack.geometry import Box, Grid, encode_offset_map
from latrack.labeling import (DegenerateTargetError, LabelConfig, LocSampleSet,
                              RegionMap, SoftTargetMap, assign_regions,
                              binary_cls_targets, build_cls_targets,
                              sample_loc_targets)
from latrack.losses import (IOU_EPS, GradCheckRow, TrainingFaultError,
                            centerness_loss, centerness_target, cls_bce_loss,
                            grad_check, gradient_suite, iou_loss, ladl_loss,
                            loc_loss, total_loss)

GRID = Grid.centered(7, 8.0, 55)
GT = Box(8.0, 6.0, 44.0, 40.0)
CFG = LabelConfig()


def make_region():
    return assign_regions(GT, GRID, CFG)


def region_with_single(category_map):
    cats = np.asarray(category_map, dtype=np.int64)
    lam = np.where(cats == 2, 1.0, np.where(cats == 1, 0.2, 0.0))
    return RegionMap(cats, lam)


def t(values, requires_grad=False):
    return torch.tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


class TestLadlLoss:
    def test_perfect_positive_prediction_vanishes(self):
        region = region_with_single([[2]])
        targets = SoftTargetMap(np.array([[1.0]]), np.array([[True]]))
        loss = ladl_loss(t([[1.0 - 1e-9]]), targets, region)
        assert float(loss) < 1e-6

    def test_negative_cell_values(self):
        region = region_with_single([[0]])
        targets = SoftTargetMap(np.array([[0.0]]), np.array([[False]]))
        # frozen from direct evaluation, cross-checked at 40 digits
        assert float(ladl_loss(t([[0.5]]), targets, region)) == pytest.approx(
            1.0397207708399179, rel=1e-12)
        assert float(ladl_loss(t([[0.9]]), targets, region)) == pytest.approx(
            4.374911676688687, rel=1e-12)

    def test_positive_branch_minimized_at_target(self):
        region = region_with_single([[2]])
        y = 0.37
        targets = SoftTargetMap(np.array([[y]]), np.array([[True]]))
        grid_values = np.linspace(0.01, 0.99, 197)
        losses = [float(ladl_loss(t([[c]]), targets, region)) for c in grid_values]
        assert grid_values[int(np.argmin(losses))] == pytest.approx(y, abs=0.01)

    def test_negative_branch_increasing_and_vanishing(self):
        region = region_with_single([[0]])
        targets = SoftTargetMap(np.array([[0.0]]), np.array([[False]]))
        cs = np.linspace(1e-6, 0.999, 300)
        values = [float(ladl_loss(t([[c]]), targets, region)) for c in cs]
        assert np.all(np.diff(values) > 0)
        assert values[0] < 1e-5

    def test_negative_reweighting_identity(self):
        # negative-branch loss == (1 + c) * plain BCE against target 0, exactly
        region = region_with_single([[0]])
        targets = SoftTargetMap(np.array([[0.0]]), np.array([[False]]))
        zeros = SoftTargetMap(np.array([[0.0]]), np.array([[False]]))
        for c in (0.1, 0.25, 0.5, 0.77, 0.99):
            weighted = float(ladl_loss(t([[c]]), targets, region))
            plain = float(cls_bce_loss(t([[c]]), zeros))
            assert weighted == pytest.approx((1.0 + c) * plain, rel=1e-12)

    def test_normalizer_counts_all_cells(self):
        region = region_with_single([[2, 0]])
        targets = SoftTargetMap(np.array([[1.0, 0.0]]), np.array([[True, False]]))
        scores = t([[0.8, 0.3]])
        pos = -math.log(0.8)
        neg = -(1 + 0.3) * math.log(0.7)
        assert float(ladl_loss(scores, targets, region)) == pytest.approx(
            (pos + neg) / 2, rel=1e-12)

    def test_clamp_keeps_loss_finite(self):
        region = region_with_single([[0]])
        targets = SoftTargetMap(np.array([[0.0]]), np.array([[False]]))
        assert np.isfinite(float(ladl_loss(t([[1.0]]), targets, region)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        region = make_region()
        decoded = GT.to_xyxy() + rng.uniform(-4, 4, size=(7, 7, 4))
        decoded[..., 2:] = np.maximum(decoded[..., 2:], decoded[..., :2] + 2)
        targets = build_cls_targets(region, decoded, GT, CFG)
        scores = rng.uniform(0.05, 0.95, size=(7, 7))
        base = float(ladl_loss(t(scores), targets, region))
        perm = rng.permutation(49)
        shuffle = lambda a: a.ravel()[perm].reshape(7, 7)
        shuffled = float(ladl_loss(
            t(shuffle(scores)),
            SoftTargetMap(shuffle(targets.values), shuffle(targets.mask)),
            RegionMap(shuffle(region.categories), shuffle(region.lambda_map))))
        assert shuffled == pytest.approx(base, rel=1e-12)


class TestIouLoss:
    def test_perfect_regression(self):
        decoded = t(np.broadcast_to(GT.to_xyxy(), (7, 7, 4)).copy())
        region = make_region()
        assert float(iou_loss(decoded, GT, region.positive_mask)) == 0.0

    def test_known_single_cell_value(self):
        # pred shares gt's left/top edges with width 4/e of 4 -> IoU = 1/e
        gt = Box(0, 0, 4, 4)
        pred = np.array([[[0.0, 0.0, 4 / math.e, 4.0]]])
        loss = iou_loss(t(pred), gt, np.array([[True]]))
        assert float(loss) == pytest.approx(1.0, rel=1e-12)

    def test_clamped_at_tiny_overlap(self):
        gt = Box(0, 0, 10, 10)
        pred = np.array([[[100.0, 100.0, 110.0, 110.0]]])  # disjoint
        loss = iou_loss(t(pred), gt, np.array([[True]]))
        assert float(loss) == pytest.approx(-math.log(IOU_EPS), rel=1e-12)

    def test_empty_mask_raises(self):
        decoded = t(np.zeros((7, 7, 4)))
        with pytest.raises(DegenerateTargetError):
            iou_loss(decoded, GT, np.zeros((7, 7), dtype=bool))


class TestLocLoss:
    def test_optimum_equals_entropy(self):
        targets = np.array([0.2, 0.5, 0.9])
        samples = LocSampleSet(np.array([[0, 0], [0, 1], [0, 2]]), targets, 2)
        scores = t([list(targets)])
        entropy = -np.mean([y * math.log(y) + (1 - y) * math.log(1 - y) for y in targets])
        assert float(loc_loss(scores, samples)) == pytest.approx(entropy, rel=1e-12)
        # moving any score away from its target raises the loss
        bumped = t([[0.3, 0.5, 0.9]])
        assert float(loc_loss(bumped, samples)) > entropy

    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_midpoint_score_costs_log2(self, target):
        samples = LocSampleSet(np.array([[0, 0]]), np.array([target]), 1)
        assert float(loc_loss(t([[0.5]]), samples)) == pytest.approx(
            math.log(2), rel=1e-12)

    def test_empty_samples_raise(self):
        samples = LocSampleSet(np.zeros((0, 2), dtype=int), np.zeros(0), 0)
        with pytest.raises(DegenerateTargetError):
            loc_loss(t([[0.5]]), samples)


class TestCenternessLoss:
    def test_target_center_is_one(self):
        assert centerness_target(np.array([3.0, 5.0, 3.0, 5.0])) == 1.0

    def test_target_edge_is_zero(self):
        assert centerness_target(np.array([0.0, 2.0, 4.0, 2.0])) == 0.0

    def test_target_known_value(self):
        assert centerness_target(np.array([1.0, 2.0, 4.0, 2.0])) == pytest.approx(0.5)

    def test_loss_minimized_at_target(self):
        offsets = encode_offset_map(GRID, GT)
        region = make_region()
        targets = np.full((GRID.height, GRID.width), 0.5)
        targets[region.positive_mask] = centerness_target(offsets[region.positive_mask])
        scores = t(np.clip(targets, 1e-6, 1 - 1e-6))
        base = float(centerness_loss(scores, offsets, region.positive_mask))
        bumped = t(np.clip(targets * 0.8 + 0.05, 1e-6, 1 - 1e-6))
        assert base < float(centerness_loss(bumped, offsets, region.positive_mask))


class TestTotalLoss:
    def test_weighted_sum(self):
        out = total_loss(t(1.0), t(2.0), t(3.0), 1.0, 1.0)
        assert float(out.total) == 6.0
        assert float(out.cls) == 1.0

    def test_ablation_weights(self):
        out = total_loss(t(1.0), t(2.0), t(3.0), 0.0, 0.0)
        assert float(out.total) == 1.0

    def test_breakdown_invariant(self):
        out = total_loss(t(0.5), t(1.5), t(2.5), 0.7, 0.3)
        assert float(out.total) == pytest.approx(0.5 + 0.7 * 1.5 + 0.3 * 2.5, rel=1e-12)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_faults_on_nonfinite(self, bad):
        with pytest.raises(TrainingFaultError):
            total_loss(t(1.0), t(bad), t(3.0))


class TestBaselineReduction:
    def test_binary_ladl_off_equals_plain_bce(self):
        # with soft labels disabled the classification objective is exactly
        # the baseline cross entropy
        rng = np.random.default_rng(2)
        region = make_region()
        targets = binary_cls_targets(region)
        scores = t(rng.uniform(0.05, 0.95, size=(7, 7)))
        manual = -(targets.values * np.log(scores.numpy())
                   + (1 - targets.values) * np.log(1 - scores.numpy())).mean()
        assert float(cls_bce_loss(scores, targets)) == pytest.approx(manual, rel=1e-12)


class TestGradCheck:
    def test_ladl_gradient(self):
        rng = np.random.default_rng(3)
        region = make_region()
        decoded = GT.to_xyxy() + rng.uniform(-5, 5, size=(7, 7, 4))
        decoded[..., 2:] = np.maximum(decoded[..., 2:], decoded[..., :2] + 3)
        targets = build_cls_targets(region, decoded, GT, CFG)
        scores = t(rng.uniform(0.05, 0.95, size=(7, 7)), requires_grad=True)
        err = grad_check(lambda: ladl_loss(scores, targets, region), [scores])
        assert err < 1e-4

    def test_loc_gradient(self):
        rng = np.random.default_rng(4)
        region = make_region()
        decoded = GT.to_xyxy() + rng.uniform(-5, 5, size=(7, 7, 4))
        decoded[..., 2:] = np.maximum(decoded[..., 2:], decoded[..., :2] + 3)
        samples = sample_loc_targets(region, decoded, GT, rng)
        scores = t(rng.uniform(0.05, 0.95, size=(7, 7)), requires_grad=True)
        err = grad_check(lambda: loc_loss(scores, samples), [scores])
        assert err < 1e-4

    def test_catches_a_wrong_gradient(self):
        # sanity: the harness must flag an objective with a broken backward
        x = t([2.0], requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                return (v * v).sum()

            @staticmethod
            def backward(ctx, g):
                return (g * 3.0).expand(1)  # correct gradient is 2v = 4

        err = grad_check(lambda: Wrong.apply(x), [x])
        assert err > 0.1


def test_gradient_suite_rows_pass():
    rows = gradient_suite(seed=1)
    names = {row.name for row in rows}
    assert {"ladl_loss", "iou_loss", "loc_loss", "total_objective_model"} <= names
    for row in rows:
        assert isinstance(row, GradCheckRow)
        assert row.passed, f"{row.name}: {row.max_rel_err} >= {row.tolerance}"
