"""Loss.

The training loss of a :class:`superpoint_lens.HookedSuperpointTransformer`. Every supervised
prediction head is matched to the ground truth on its own, then scored with a classification term,
mask terms over the matched pairs and a regression term for the IoU-aware score. The total is the
mean of the per-head losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from jaxtyping import Float

from superpoint_lens.components import LayerPrediction
from superpoint_lens.matching import (
    LOG_CLAMP,
    Assignment,
    hungarian_assign,
    matching_cost_matrix,
)
from superpoint_lens.scenes import (
    Scene,
    SuperpointInstanceMasks,
    SuperpointPartition,
    project_instance_to_superpoints,
)

MASK_LOSS_NAMES = ("bce", "dice", "focal")
SCORE_IOU_THRESHOLD = 0.5


@dataclass
class LossConfig:
    """
    Weights of the matching cost and of the training loss.

    Args:
        class_cost_weight (float): Weight of the class term of the matching cost.
        mask_cost_weight (float): Weight of the mask term of the matching cost.
        class_loss_weight (float): Weight of the classification loss in a head's loss.
        score_loss_weight (float): Weight of the score regression loss in a head's loss.
        mask_loss_weight (float): Weight of the sum of the selected mask losses.
        mask_losses (tuple of str): Which mask losses to apply, any non-empty subset of
            ``("bce", "dice", "focal")``.
        focal_alpha (float): Positive-class weight of the focal loss.
        focal_gamma (float): Focusing exponent of the focal loss.
    """

    class_cost_weight: float = 0.5
    mask_cost_weight: float = 1.0
    class_loss_weight: float = 0.5
    score_loss_weight: float = 0.5
    mask_loss_weight: float = 1.0
    mask_losses: Tuple[str, ...] = ("bce", "dice")
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if isinstance(self.mask_losses, str):
            self.mask_losses = tuple(
                name.strip() for name in self.mask_losses.split(",") if name.strip()
            )
        self.mask_losses = tuple(self.mask_losses)
        if not self.mask_losses:
            raise ValueError("At least one mask loss must be selected")
        unknown = set(self.mask_losses) - set(MASK_LOSS_NAMES)
        if unknown:
            raise ValueError(f"Unknown mask losses {sorted(unknown)}, expected {MASK_LOSS_NAMES}")
        assert 0 <= self.focal_alpha <= 1, "focal_alpha must lie in [0, 1]"
        assert self.focal_gamma >= 0, "focal_gamma must be non-negative"

    @classmethod
    def from_dict(cls, config_dict: Dict) -> LossConfig:
        return cls(**config_dict)

    def to_dict(self) -> Dict:
        return {**self.__dict__, "mask_losses": list(self.mask_losses)}


@dataclass(frozen=True)
class SceneTargets:
    """Ground truth of one scene expressed over the model's tokens."""

    masks: Float[torch.Tensor, "n_gt n_tokens"]
    classes: torch.Tensor
    superpoint_masks: SuperpointInstanceMasks

    @classmethod
    def from_scene(
        cls, scene: Scene, partition: Optional[SuperpointPartition] = None
    ) -> SceneTargets:
        """Project the scene's instances onto ``partition`` (the scene's superpoints by default)."""
        projected = project_instance_to_superpoints(scene, partition)
        return cls(
            torch.as_tensor(projected.masks, dtype=torch.float64),
            torch.as_tensor(projected.classes, dtype=torch.long),
            projected,
        )

    @property
    def n_instances(self) -> int:
        return self.masks.shape[0]


@dataclass
class LossBreakdown:
    """The loss terms of one head, or their means over the supervised heads.

    ``total`` equals ``class_loss_weight * classification + score_loss_weight * score
    + mask_loss_weight * (sum of the selected mask terms)``.
    """

    classification: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor
    focal: torch.Tensor
    score: torch.Tensor
    total: torch.Tensor
    layers: List[LossBreakdown] = field(default_factory=list)
    assignments: List[Assignment] = field(default_factory=list)
    score_targets: List[torch.Tensor] = field(default_factory=list)
    """IoU of every matched pair, the regression target of the score loss."""

    TERMS = ("classification", "bce", "dice", "focal", "score", "total")

    def items(self) -> Dict[str, float]:
        """The scalar value of every term."""
        return {name: getattr(self, name).item() for name in self.TERMS}

    def non_finite_term(self) -> Optional[str]:
        for name in self.TERMS:
            if not torch.isfinite(getattr(self, name)).all():
                return name
        return None


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype)


def classification_loss(
    prediction: LayerPrediction, assignment: Assignment, gt_classes: torch.Tensor
) -> Float[torch.Tensor, ""]:
    """Mean cross-entropy over all queries; unassigned queries target the "no instance" column.

    >>> uniform = LayerPrediction(torch.full((1, 4), 0.25), torch.ones(1), torch.ones(1, 1))
    >>> empty = Assignment(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1)
    >>> round(classification_loss(uniform, empty, torch.zeros(0, dtype=torch.long)).item(), 4)
    1.3863
    """
    class_probs = prediction.class_probs
    no_instance = class_probs.shape[1] - 1
    targets = torch.full((prediction.n_queries,), no_instance, dtype=torch.long)
    if len(assignment):
        targets[torch.as_tensor(assignment.proposal_indices)] = gt_classes[
            torch.as_tensor(assignment.gt_indices)
        ]
    target_probs = class_probs[torch.arange(prediction.n_queries), targets]
    return -torch.log(target_probs.clamp(min=LOG_CLAMP)).mean()


def _matched(
    prediction: LayerPrediction, assignment: Assignment, gt_masks: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    masks = prediction.masks[torch.as_tensor(assignment.proposal_indices)]
    targets = gt_masks[torch.as_tensor(assignment.gt_indices)].to(masks.dtype)
    return masks, targets


def mask_loss(
    prediction: LayerPrediction, assignment: Assignment, gt_masks: torch.Tensor
) -> Tuple[Float[torch.Tensor, ""], Float[torch.Tensor, ""]]:
    """Mean BCE and mean smoothed dice over the matched pairs; both 0 without ground truth."""
    if len(assignment) == 0:
        return _zero(prediction.masks), _zero(prediction.masks)
    masks, targets = _matched(prediction, assignment, gt_masks)
    clamped = masks.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    bce = -(targets * torch.log(clamped) + (1 - targets) * torch.log(1 - clamped)).mean(dim=-1)
    dice = 1 - 2 * ((masks * targets).sum(-1) + 1) / (masks.sum(-1) + targets.sum(-1) + 1)
    return bce.mean(), dice.mean()


def focal_mask_loss(
    prediction: LayerPrediction,
    assignment: Assignment,
    gt_masks: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Float[torch.Tensor, ""]:
    """Sigmoid focal loss averaged over superpoints, then over the matched pairs."""
    if len(assignment) == 0:
        return _zero(prediction.masks)
    masks, targets = _matched(prediction, assignment, gt_masks)
    p_t = masks * targets + (1 - masks) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    focal = alpha_t * (1 - p_t) ** gamma * -torch.log(p_t.clamp(min=LOG_CLAMP))
    return focal.mean(dim=-1).mean()


@torch.no_grad()
def matched_iou(
    prediction: LayerPrediction, assignment: Assignment, gt_masks: torch.Tensor
) -> Float[torch.Tensor, "n_pairs"]:
    """IoU of every matched pair, with proposal masks binarized at > 0.5."""
    if len(assignment) == 0:
        return torch.zeros(0, dtype=prediction.masks.dtype)
    masks, targets = _matched(prediction.detach(), assignment, gt_masks)
    binary = (masks > 0.5).to(masks.dtype)
    intersection = (binary * targets).sum(-1)
    union = ((binary + targets) > 0).to(masks.dtype).sum(-1)
    return torch.where(union > 0, intersection / union.clamp(min=1), torch.zeros_like(union))


def score_loss(
    prediction: LayerPrediction,
    assignment: Assignment,
    gt_masks: torch.Tensor,
    iou: Optional[torch.Tensor] = None,
) -> Float[torch.Tensor, ""]:
    """Mean squared error between score and IoU over the pairs whose IoU exceeds 0.5.

    ``iou`` overrides the IoU of the matched pairs, which is otherwise measured on ``prediction``.
    """
    if iou is None:
        iou = matched_iou(prediction, assignment, gt_masks)
    keep = iou > SCORE_IOU_THRESHOLD
    if not keep.any():
        return _zero(prediction.scores)
    scores = prediction.scores[torch.as_tensor(assignment.proposal_indices)]
    return ((scores[keep] - iou[keep]) ** 2).mean()


def assign(
    prediction: LayerPrediction, targets: SceneTargets, config: LossConfig
) -> Assignment:
    """Match the proposals of one head to the ground truth."""
    cost = matching_cost_matrix(
        prediction,
        targets.superpoint_masks,
        config.class_cost_weight,
        config.mask_cost_weight,
    )
    return hungarian_assign(cost)


def head_loss(
    prediction: LayerPrediction,
    targets: SceneTargets,
    config: LossConfig,
    assignment: Optional[Assignment] = None,
    use_score_loss: bool = True,
    score_target: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Loss of one prediction head. The head is matched unless ``assignment`` is given."""
    if assignment is None:
        assignment = assign(prediction, targets, config)
    if score_target is None:
        score_target = matched_iou(prediction, assignment, targets.masks)
    classification = classification_loss(prediction, assignment, targets.classes)
    bce, dice = mask_loss(prediction, assignment, targets.masks)
    if "focal" in config.mask_losses:
        focal = focal_mask_loss(
            prediction, assignment, targets.masks, config.focal_alpha, config.focal_gamma
        )
    else:
        focal = _zero(prediction.masks)
    if use_score_loss:
        score = score_loss(prediction, assignment, targets.masks, score_target)
    else:
        score = _zero(prediction.scores)

    selected = {"bce": bce, "dice": dice, "focal": focal}
    mask_total = sum(selected[name] for name in config.mask_losses)
    total = (
        config.class_loss_weight * classification
        + config.score_loss_weight * score
        + config.mask_loss_weight * mask_total
    )
    return LossBreakdown(
        classification,
        bce,
        dice,
        focal,
        score,
        total,
        assignments=[assignment],
        score_targets=[score_target],
    )


def total_loss(
    predictions: Sequence[LayerPrediction],
    targets: SceneTargets,
    config: Optional[LossConfig] = None,
    assignments: Optional[Sequence[Assignment]] = None,
    iterative_prediction: bool = True,
    use_score_loss: bool = True,
    score_targets: Optional[Sequence[torch.Tensor]] = None,
) -> LossBreakdown:
    """Deep-supervision loss, the mean over the supervised heads of each head's loss.

    Args:
        predictions: The ``n_layers + 1`` head outputs of one forward pass.
        targets: Ground truth of the scene.
        config: Loss weights; defaults to :class:`LossConfig`.
        assignments: Fixed assignments, one per supervised head, used instead of matching.
        iterative_prediction: Supervise every head. When False only the last head is supervised.
        use_score_loss: Include the score regression term.
        score_targets: Fixed IoU targets of the score loss, one per supervised head. Holding
            them and ``assignments`` fixed makes the loss a smooth function of the predictions.
    """
    if not predictions:
        raise ValueError("total_loss needs at least one prediction head")
    config = LossConfig() if config is None else config
    supervised = list(predictions) if iterative_prediction else [predictions[-1]]
    if assignments is not None and len(assignments) != len(supervised):
        raise ValueError(
            f"Got {len(assignments)} assignments for {len(supervised)} supervised heads"
        )
    if score_targets is not None and len(score_targets) != len(supervised):
        raise ValueError(
            f"Got {len(score_targets)} score targets for {len(supervised)} supervised heads"
        )

    layers = [
        head_loss(
            prediction,
            targets,
            config,
            None if assignments is None else assignments[index],
            use_score_loss,
            None if score_targets is None else score_targets[index],
        )
        for index, prediction in enumerate(supervised)
    ]
    means = {
        name: torch.stack([getattr(layer, name) for layer in layers]).mean()
        for name in LossBreakdown.TERMS
    }
    return LossBreakdown(
        **means,
        layers=layers,
        assignments=[layer.assignments[0] for layer in layers],
        score_targets=[layer.score_targets[0] for layer in layers],
    )
