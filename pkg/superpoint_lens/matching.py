"""Matching.

Bipartite assignment between the K query proposals of one prediction head and the ground-truth
instances of a scene. The cost of pairing proposal i with instance k is a weighted sum of a class
term and a mask term; the cheapest one-to-one assignment is found with
:func:`scipy.optimize.linear_sum_assignment`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from fancy_einsum import einsum
from jaxtyping import Float
from scipy.optimize import linear_sum_assignment

from superpoint_lens.components import LayerPrediction
from superpoint_lens.kernels import ContractError
from superpoint_lens.scenes import SuperpointInstanceMasks

LOG_CLAMP = 1e-7
"""Mask probabilities are clamped to [LOG_CLAMP, 1 - LOG_CLAMP] before taking logarithms."""

TIE_TOLERANCE = 1e-12
"""Relative difference below which two assignment totals count as equally cheap."""


def batch_bce_cost(
    masks: Float[torch.Tensor, "n_queries n_superpoints"],
    gt_masks: Float[torch.Tensor, "n_gt n_superpoints"],
) -> Float[torch.Tensor, "n_queries n_gt"]:
    """Mean binary cross-entropy over superpoints between every proposal mask and every gt mask."""
    n_superpoints = masks.shape[1]
    clamped = masks.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    pos = -torch.log(clamped)
    neg = -torch.log(1 - clamped)
    cost = einsum("query sp, gt sp -> query gt", pos, gt_masks) + einsum(
        "query sp, gt sp -> query gt", neg, 1 - gt_masks
    )
    return cost / n_superpoints


def batch_dice_cost(
    masks: Float[torch.Tensor, "n_queries n_superpoints"],
    gt_masks: Float[torch.Tensor, "n_gt n_superpoints"],
) -> Float[torch.Tensor, "n_queries n_gt"]:
    """Dice dissimilarity with +1 smoothing, ``1 - 2(m.g + 1) / (|m| + |g| + 1)``.

    The smoothing keeps empty masks well defined: two empty masks cost -1.
    """
    numerator = 2 * (einsum("query sp, gt sp -> query gt", masks, gt_masks) + 1)
    denominator = masks.sum(-1)[:, None] + gt_masks.sum(-1)[None, :] + 1
    return 1 - numerator / denominator


def mask_matching_cost(
    mask: Union[np.ndarray, torch.Tensor, List[float]],
    gt_mask: Union[np.ndarray, torch.Tensor, List[float]],
) -> float:
    """Mask term of the matching cost for a single proposal and ground truth.

    >>> round(mask_matching_cost([1.0, 1.0, 0.0], [1.0, 1.0, 0.0]), 6)
    -0.2
    >>> round(mask_matching_cost([0.5, 0.5], [1.0, 0.0]), 4)
    0.6931
    """
    mask = torch.as_tensor(mask, dtype=torch.float64).detach()
    gt_mask = torch.as_tensor(gt_mask, dtype=torch.float64)
    if mask.dim() != 1 or mask.shape != gt_mask.shape:
        raise ContractError(
            f"Mask of shape {tuple(mask.shape)} cannot be compared with gt mask of shape "
            f"{tuple(gt_mask.shape)}"
        )
    cost = batch_bce_cost(mask[None], gt_mask[None]) + batch_dice_cost(mask[None], gt_mask[None])
    return cost.item()


@dataclass
class CostMatrix:
    """Pairwise matching costs, ``total = class_weight * class_cost + mask_weight * mask_cost``."""

    class_cost: np.ndarray
    """[n_queries, n_gt] negative probability of the gt instance's class."""

    mask_cost: np.ndarray
    """[n_queries, n_gt] BCE plus smoothed dice between proposal and gt masks."""

    class_weight: float = 0.5
    mask_weight: float = 1.0

    def __post_init__(self):
        assert self.class_cost.shape == self.mask_cost.shape, "Cost components disagree in shape"
        if not (np.isfinite(self.class_cost).all() and np.isfinite(self.mask_cost).all()):
            raise ContractError("Matching costs must be finite")

    @classmethod
    def from_total(cls, total: Union[np.ndarray, List[List[float]]]) -> CostMatrix:
        """A cost matrix made of a single component, for costs computed elsewhere."""
        total = np.asarray(total, dtype=np.float64)
        if total.ndim != 2:
            raise ContractError(f"Cost matrix must be 2D, got shape {total.shape}")
        return cls(np.zeros_like(total), total, class_weight=0.0, mask_weight=1.0)

    @property
    def total(self) -> np.ndarray:
        return self.class_weight * self.class_cost + self.mask_weight * self.mask_cost

    @property
    def shape(self) -> Tuple[int, int]:
        return self.class_cost.shape


def matching_cost_matrix(
    prediction: LayerPrediction,
    gt: SuperpointInstanceMasks,
    class_weight: float = 0.5,
    mask_weight: float = 1.0,
) -> CostMatrix:
    """Costs of pairing every proposal of ``prediction`` with every gt instance."""
    with torch.no_grad():
        class_probs = prediction.class_probs.detach()
        masks = prediction.masks.detach()
        if masks.shape[1] != gt.masks.shape[1]:
            raise ContractError(
                f"Predicted masks cover {masks.shape[1]} superpoints but ground truth covers "
                f"{gt.masks.shape[1]}"
            )
        gt_masks = torch.as_tensor(gt.masks, dtype=masks.dtype)
        gt_classes = torch.as_tensor(gt.classes, dtype=torch.long)
        class_cost = -class_probs[:, gt_classes]
        mask_cost = batch_bce_cost(masks, gt_masks) + batch_dice_cost(masks, gt_masks)
    return CostMatrix(
        class_cost.numpy().reshape(prediction.n_queries, gt.n_instances),
        mask_cost.numpy().reshape(prediction.n_queries, gt.n_instances),
        class_weight,
        mask_weight,
    )


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairing of proposals with gt instances, ordered by proposal index."""

    proposal_indices: np.ndarray
    gt_indices: np.ndarray
    n_queries: int

    def __post_init__(self):
        assert self.proposal_indices.shape == self.gt_indices.shape
        assert len(np.unique(self.proposal_indices)) == len(self.proposal_indices)
        assert len(np.unique(self.gt_indices)) == len(self.gt_indices)

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return [(int(i), int(k)) for i, k in zip(self.proposal_indices, self.gt_indices)]

    @property
    def unassigned(self) -> List[int]:
        return sorted(set(range(self.n_queries)) - set(self.proposal_indices.tolist()))

    def __len__(self) -> int:
        return len(self.proposal_indices)


def _same_total(total: float, optimum: float) -> bool:
    return abs(total - optimum) <= TIE_TOLERANCE * max(1.0, abs(optimum))


def _constrained_assignment(
    total: np.ndarray, allowed: np.ndarray, required_rows: np.ndarray
) -> Optional[Tuple[Dict[int, int], float]]:
    """Cheapest assignment using only ``allowed`` pairs and matching every required row.

    Rows left without an instance are matched to zero-cost padding columns, which required rows
    may not use. Returns None when the constraints admit no assignment.
    """
    n_queries, n_gt = total.shape
    padding = np.zeros((n_queries, n_queries - n_gt))
    padding[required_rows] = np.inf
    square = np.hstack([np.where(allowed, total, np.inf), padding])
    try:
        rows, cols = linear_sum_assignment(square)
    except ValueError:
        return None
    matched = cols < n_gt
    pairs = {int(row): int(col) for row, col in zip(rows[matched], cols[matched])}
    if len(pairs) < n_gt:
        return None
    return pairs, math.fsum(total[row, col] for row, col in pairs.items())


def hungarian_assign(cost: Union[CostMatrix, np.ndarray]) -> Assignment:
    """Minimum total cost assignment covering every gt instance.

    Among equally cheap assignments the one using the lowest proposal indices wins: proposals are
    kept in index order while a minimum cost assignment still exists, then each kept proposal,
    lowest first, takes the lowest gt index that keeps the cost minimal.

    >>> hungarian_assign(np.array([[0.0, 9.0], [9.0, 0.0], [5.0, 5.0]])).pairs
    [(0, 0), (1, 1)]
    >>> hungarian_assign(np.array([[0.0, 0.0], [0.0, 2.0], [1.0, 2.0], [2.0, 0.0]])).pairs
    [(0, 1), (1, 0)]
    """
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix.from_total(cost)
    n_queries, n_gt = cost.shape
    if n_queries < 1:
        raise ContractError("Cannot assign without any proposals")
    if n_gt > n_queries:
        raise ContractError(
            f"{n_gt} ground-truth instances cannot be matched to only {n_queries} proposals; "
            "raise n_queries"
        )
    if n_gt == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Assignment(empty, empty.copy(), n_queries)

    total = cost.total
    rows, cols = linear_sum_assignment(total)
    current = {int(row): int(col) for row, col in zip(rows, cols)}
    optimum = math.fsum(total[rows, cols])

    allowed = np.ones(total.shape, dtype=bool)
    required = np.zeros(n_queries, dtype=bool)
    for row in range(n_queries):
        if required.sum() == n_gt:
            allowed[row:] = False
            break
        if row not in current:
            trial = required.copy()
            trial[row] = True
            found = _constrained_assignment(total, allowed, trial)
            if found is None or not _same_total(found[1], optimum):
                allowed[row] = False
                continue
            current = found[0]
        required[row] = True

    for row in sorted(current):
        for col in range(current[row]):
            trial_allowed = allowed.copy()
            trial_allowed[row] = False
            trial_allowed[:, col] = False
            trial_allowed[row, col] = True
            found = _constrained_assignment(total, trial_allowed, required)
            if found is not None and _same_total(found[1], optimum):
                current = found[0]
                break
        col = current[row]
        allowed[row] = False
        allowed[:, col] = False
        allowed[row, col] = True

    proposal_indices = np.array(sorted(current), dtype=np.int64)
    gt_indices = np.array([current[row] for row in proposal_indices], dtype=np.int64)
    return Assignment(proposal_indices, gt_indices, n_queries)
