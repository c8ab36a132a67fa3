import math

import numpy as np
import pytest
import torch

import superpoint_lens.loss as loss
from superpoint_lens.components import LayerPrediction
from superpoint_lens.loss import (
    LossBreakdown,
    LossConfig,
    SceneTargets,
    classification_loss,
    focal_mask_loss,
    head_loss,
    mask_loss,
    matched_iou,
    score_loss,
    total_loss,
)
from superpoint_lens.matching import Assignment
from superpoint_lens.scenes import SuperpointInstanceMasks


def prediction(class_probs, masks, scores=None):
    class_probs = torch.as_tensor(np.asarray(class_probs), dtype=torch.float64)
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float64)
    if scores is None:
        scores = [1.0] * class_probs.shape[0]
    scores = torch.as_tensor(np.asarray(scores), dtype=torch.float64)
    return LayerPrediction(class_probs, scores, masks)


def targets(masks, classes, n_superpoints=None):
    masks = np.array(masks, dtype=bool)
    if masks.size == 0:
        masks = np.zeros((0, n_superpoints), dtype=bool)
    classes = np.array(classes, dtype=np.int64)
    return SceneTargets(
        torch.as_tensor(masks, dtype=torch.float64),
        torch.as_tensor(classes),
        SuperpointInstanceMasks(masks, classes),
    )


def pairs(n_queries, *matched):
    proposal_indices = np.array([i for i, _ in matched], dtype=np.int64)
    gt_indices = np.array([k for _, k in matched], dtype=np.int64)
    return Assignment(proposal_indices, gt_indices, n_queries)


def scalar(value):
    return torch.tensor(value, dtype=torch.float64)


class TestClassificationLoss:
    def test_one_hot_correct(self):
        pred = prediction([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [[0.5], [0.5]])
        value = classification_loss(pred, pairs(2, (0, 0)), torch.tensor([1]))
        assert value.item() <= 1e-6

    def test_uniform(self):
        pred = prediction([[0.25] * 4] * 3, [[0.5]] * 3)
        value = classification_loss(pred, pairs(3, (1, 0)), torch.tensor([2]))
        assert value.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_one_matched_one_not(self):
        pred = prediction([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]], [[0.5], [0.5]])
        value = classification_loss(pred, pairs(2, (0, 0)), torch.tensor([0]))
        expected = 0.5 * (-math.log(0.7) - math.log(0.4))
        assert value.item() == pytest.approx(expected, abs=1e-12)


class TestMaskLoss:
    def test_perfect_masks(self):
        pred = prediction([[0.5, 0.5]], [[1.0, 1.0, 0.0]])
        bce, dice = mask_loss(pred, pairs(1, (0, 0)), targets([[1, 1, 0]], [0]).masks)
        assert bce.item() <= 1e-6
        assert dice.item() == pytest.approx(-0.2, abs=1e-12)

    def test_no_ground_truth(self):
        pred = prediction([[0.5, 0.5]], [[0.3, 0.8]])
        bce, dice = mask_loss(pred, pairs(1), targets([], [], n_superpoints=2).masks)
        assert (bce.item(), dice.item()) == (0.0, 0.0)

    def test_single_pair(self):
        pred = prediction([[0.5, 0.5]], [[0.5, 0.5]])
        bce, dice = mask_loss(pred, pairs(1, (0, 0)), targets([[1, 0]], [0]).masks)
        assert bce.item() == pytest.approx(math.log(2), abs=1e-12)
        assert dice.item() == pytest.approx(0.0, abs=1e-12)

    def test_mean_over_pairs(self):
        pred = prediction([[0.5, 0.5]] * 3, [[0.5, 0.5], [1.0, 0.0], [0.2, 0.2]])
        gt_masks = targets([[1, 0], [1, 0]], [0, 0]).masks
        _, dice = mask_loss(pred, pairs(3, (0, 0), (1, 1)), gt_masks)
        # Pair (1, 1) is perfect with k = 1, so its dice is -1/3.
        assert dice.item() == pytest.approx((0.0 - 1 / 3) / 2, abs=1e-12)

    def test_focal(self):
        pred = prediction([[0.5, 0.5]], [[0.5, 0.5]])
        value = focal_mask_loss(pred, pairs(1, (0, 0)), targets([[1, 0]], [0]).masks)
        assert value.item() == pytest.approx(0.125 * math.log(2), abs=1e-12)


class TestScoreLoss:
    gt_masks = targets([[1, 1, 1, 1, 1]], [0]).masks

    def test_iou(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.9, 0.9, 0.1]], scores=[0.6])
        assert matched_iou(pred, pairs(1, (0, 0)), self.gt_masks).tolist() == [0.8]

    def test_squared_error(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.9, 0.9, 0.1]], scores=[0.6])
        value = score_loss(pred, pairs(1, (0, 0)), self.gt_masks)
        assert value.item() == pytest.approx(0.04, abs=1e-12)

    def test_score_equal_to_iou(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.9, 0.9, 0.1]], scores=[0.8])
        assert score_loss(pred, pairs(1, (0, 0)), self.gt_masks).item() == 0.0

    def test_low_iou_is_filtered(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.1, 0.1, 0.1]], scores=[0.6])
        assert score_loss(pred, pairs(1, (0, 0)), self.gt_masks).item() == 0.0

    def test_binarization_is_strict(self):
        pred = prediction([[0.5, 0.5]], [[0.5, 0.9, 0.9, 0.9, 0.9]], scores=[0.6])
        assert matched_iou(pred, pairs(1, (0, 0)), self.gt_masks).tolist() == [0.8]

    def test_given_iou_replaces_measured(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.1, 0.1, 0.1]], scores=[0.6])
        iou = torch.tensor([0.9], dtype=torch.float64)
        value = score_loss(pred, pairs(1, (0, 0)), self.gt_masks, iou)
        assert value.item() == pytest.approx(0.09, abs=1e-12)


class TestTotalLoss:
    def test_head_total_from_parts(self, monkeypatch):
        monkeypatch.setattr(loss, "classification_loss", lambda *args: scalar(1.0))
        monkeypatch.setattr(loss, "score_loss", lambda *args: scalar(0.5))
        monkeypatch.setattr(loss, "mask_loss", lambda *args: (scalar(0.3), scalar(0.2)))
        pred = prediction([[0.5, 0.5]], [[0.5]])
        breakdown = head_loss(pred, targets([[1]], [0]), LossConfig())
        assert breakdown.total.item() == pytest.approx(1.25, abs=1e-12)

    def test_all_parts_zero(self, monkeypatch):
        monkeypatch.setattr(loss, "classification_loss", lambda *args: scalar(0.0))
        monkeypatch.setattr(loss, "score_loss", lambda *args: scalar(0.0))
        monkeypatch.setattr(loss, "mask_loss", lambda *args: (scalar(0.0), scalar(0.0)))
        pred = prediction([[0.5, 0.5]], [[0.5]])
        assert head_loss(pred, targets([[1]], [0]), LossConfig()).total.item() == 0.0

    def test_mean_over_heads(self, monkeypatch):
        head_totals = iter([1.0, 2.0])

        def fake_head_loss(*args):
            value = scalar(next(head_totals))
            zero = scalar(0.0)
            return LossBreakdown(
                zero,
                zero,
                zero,
                zero,
                zero,
                value,
                assignments=[pairs(1)],
                score_targets=[torch.zeros(0, dtype=torch.float64)],
            )

        monkeypatch.setattr(loss, "head_loss", fake_head_loss)
        pred = prediction([[0.5, 0.5]], [[0.5]])
        breakdown = total_loss([pred, pred], targets([[1]], [0]))
        assert breakdown.total.item() == 1.5
        assert len(breakdown.layers) == 2

    def test_breakdown_recomputes_total(self):
        rng = np.random.default_rng(0)
        pred = prediction(
            rng.dirichlet(np.ones(3), size=4).tolist(), rng.random((4, 6)).tolist(), rng.random(4)
        )
        config = LossConfig(mask_losses=("bce", "dice", "focal"))
        gt = targets([[1, 1, 0, 0, 0, 0], [0, 0, 0, 1, 1, 1]], [0, 1])
        breakdown = head_loss(pred, gt, config)
        expected = (
            0.5 * breakdown.classification
            + 0.5 * breakdown.score
            + breakdown.bce
            + breakdown.dice
            + breakdown.focal
        )
        assert torch.allclose(breakdown.total, expected)

    def test_empty_scene_only_classification(self):
        pred = prediction([[0.2, 0.3, 0.5]] * 2, [[0.9, 0.1]] * 2, scores=[0.7, 0.7])
        breakdown = total_loss([pred, pred], targets([], [], n_superpoints=2))
        assert breakdown.classification.item() == pytest.approx(-math.log(0.5), abs=1e-12)
        assert breakdown.bce.item() == breakdown.dice.item() == breakdown.score.item() == 0.0
        assert breakdown.total.item() == pytest.approx(-0.5 * math.log(0.5), abs=1e-12)

    def test_last_head_only(self):
        preds = [
            prediction([[0.9, 0.1]], [[0.9, 0.1]]),
            prediction([[0.1, 0.9]], [[0.1, 0.9]]),
        ]
        last_only = total_loss(preds, targets([[1, 0]], [0]), iterative_prediction=False)
        assert len(last_only.layers) == 1
        expected = total_loss(preds[-1:], targets([[1, 0]], [0]))
        assert last_only.total.item() == expected.total.item()

    def test_without_score_loss(self):
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9]], scores=[0.1])
        breakdown = total_loss([pred], targets([[1, 1]], [0]), use_score_loss=False)
        assert breakdown.score.item() == 0.0

    def test_ground_truth_relabeling(self):
        rng = np.random.default_rng(1)
        preds = [
            prediction(rng.dirichlet(np.ones(4), size=5), rng.random((5, 8)), rng.random(5))
            for _ in range(3)
        ]
        masks = np.zeros((3, 8), dtype=bool)
        masks[0, :3] = masks[1, 3:5] = masks[2, 6:] = True
        classes = [0, 2, 1]
        order = [2, 0, 1]
        original = total_loss(preds, targets(masks, classes))
        relabeled = total_loss(preds, targets(masks[order], [classes[i] for i in order]))
        assert relabeled.total.item() == pytest.approx(original.total.item(), abs=1e-12)

    def test_fixed_assignments(self):
        pred = prediction([[0.5, 0.5]] * 2, [[0.9, 0.1], [0.1, 0.9]])
        forced = total_loss([pred], targets([[1, 0]], [0]), assignments=[pairs(2, (1, 0))])
        assert forced.assignments[0].pairs == [(1, 0)]
        assert total_loss([pred], targets([[1, 0]], [0])).assignments[0].pairs == [(0, 0)]

    def test_wrong_number_of_assignments(self):
        pred = prediction([[0.5, 0.5]], [[0.9]])
        with pytest.raises(ValueError):
            total_loss([pred, pred], targets([[1]], [0]), assignments=[pairs(1, (0, 0))])

    def test_fixed_score_targets(self):
        gt = targets([[1, 1, 1, 1, 1]], [0])
        pred = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.9, 0.9, 0.1]], scores=[0.6])
        measured = total_loss([pred], gt)
        assert measured.score_targets[0].tolist() == [0.8]
        # A mask crossing 0.5 would change the measured IoU but not a fixed target.
        moved = prediction([[0.5, 0.5]], [[0.9, 0.9, 0.9, 0.9, 0.6]], scores=[0.6])
        fixed = total_loss(
            [moved],
            gt,
            assignments=measured.assignments,
            score_targets=measured.score_targets,
        )
        assert fixed.score.item() == pytest.approx(0.04, abs=1e-12)
        assert total_loss([moved], gt).score.item() == pytest.approx(0.16, abs=1e-12)

    def test_wrong_number_of_score_targets(self):
        pred = prediction([[0.5, 0.5]], [[0.9]])
        with pytest.raises(ValueError, match="score targets"):
            total_loss([pred, pred], targets([[1]], [0]), score_targets=[torch.zeros(1)])

    def test_non_finite_term(self):
        value = scalar(float("nan"))
        zero = scalar(0.0)
        assert LossBreakdown(zero, value, zero, zero, zero, value).non_finite_term() == "bce"


class TestLossConfig:
    def test_mask_losses_from_string(self):
        assert LossConfig(mask_losses="bce, focal").mask_losses == ("bce", "focal")

    @pytest.mark.parametrize("mask_losses", ["", ("bce", "l1")])
    def test_invalid_mask_losses(self, mask_losses):
        with pytest.raises(ValueError):
            LossConfig(mask_losses=mask_losses)

    def test_round_trip(self):
        config = LossConfig(class_loss_weight=0.25, mask_losses=("dice",))
        assert LossConfig.from_dict(config.to_dict()) == config
