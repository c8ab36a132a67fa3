"""Evaluation Helpers.

Turning the last prediction head into ranked instance proposals, and scoring proposals against
ground truth with average precision. Proposals are never suppressed: overlapping proposals are all
emitted and all ranked.

Also holds the plain-text formats the command line writes: prediction files, metric reports and
attention tables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from rich.console import Console
from rich.table import Table

from superpoint_lens.components import LayerPrediction
from superpoint_lens.HookedSuperpointTransformer import HookedSuperpointTransformer
from superpoint_lens.scenes import (
    InstanceGroundTruth,
    Scene,
    SceneValidationError,
    SuperpointPartition,
)
from superpoint_lens.utils import to_numpy

BINARIZE_THRESHOLD = 0.5
AP_IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
"""The IoU thresholds mAP averages over, 0.50 to 0.95 in steps of 0.05."""


@dataclass
class InstancePrediction:
    """One emitted instance: a class, a ranking score and a point mask."""

    class_id: int
    score: float
    point_mask: np.ndarray
    """[n_points] bool."""

    query_index: int = -1

    def __post_init__(self):
        self.point_mask = np.asarray(self.point_mask, dtype=bool)
        if not np.isfinite(self.score):
            raise ValueError(f"Instance score must be finite, got {self.score}")

    @property
    def point_indices(self) -> np.ndarray:
        return np.flatnonzero(self.point_mask)


def mask_score(mask_probs: Union[np.ndarray, Sequence[float]]) -> float:
    """Mean of the superpoint probabilities strictly above 0.5, or 0 when there are none.

    >>> round(mask_score([0.6, 0.7, 0.4]), 10)
    0.65
    >>> mask_score([0.5, 0.3])
    0.0
    """
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    confident = mask_probs[mask_probs > BINARIZE_THRESHOLD]
    if confident.size == 0:
        return 0.0
    return float(confident.mean())


def final_score(class_prob: float, score: float, mask_score: float) -> float:
    """Geometric mean of the class probability, the IoU-aware score and the mask score.

    >>> round(final_score(0.8, 0.5, 0.4), 4)
    0.5429
    """
    return float(np.cbrt(class_prob * score * mask_score))


def rank_and_emit(
    prediction: LayerPrediction,
    partition: SuperpointPartition,
    score_floor: float = 0.0,
    top_n: Optional[int] = None,
) -> List[InstancePrediction]:
    """Rank the queries of the last prediction head and turn them into point-level instances.

    Args:
        prediction: Output of the last prediction head.
        partition: The tokens the masks are defined over, used to propagate masks to points.
        score_floor: Proposals scoring below this are dropped.
        top_n: Keep at most this many proposals. None keeps all of them.

    Returns:
        Proposals in decreasing score order, ties broken by query index. Proposals with an empty
        mask are dropped; overlapping proposals are all kept.
    """
    class_probs = to_numpy(prediction.class_probs)
    scores = to_numpy(prediction.scores)
    masks = to_numpy(prediction.masks)
    if masks.shape[1] != partition.n_superpoints:
        raise ValueError(
            f"Masks over {masks.shape[1]} tokens cannot be propagated through a partition of "
            f"{partition.n_superpoints} superpoints"
        )

    # The last column is "no instance" and never emitted.
    class_ids = class_probs[:, :-1].argmax(axis=1)
    candidates = []
    for query in range(prediction.n_queries):
        class_id = int(class_ids[query])
        ranking = final_score(
            float(class_probs[query, class_id]), float(scores[query]), mask_score(masks[query])
        )
        superpoint_mask = masks[query] > BINARIZE_THRESHOLD
        candidates.append(
            InstancePrediction(class_id, ranking, superpoint_mask[partition.ids], query)
        )

    candidates.sort(key=lambda candidate: (-candidate.score, candidate.query_index))
    emitted = [
        candidate
        for candidate in candidates
        if candidate.score >= score_floor and candidate.point_mask.any()
    ]
    if top_n is not None:
        emitted = emitted[:top_n]
    return emitted


def point_iou(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """[n_pred, n_gt] IoU between boolean point masks.

    >>> point_iou(np.array([[True, True, False]]), np.array([[True, False, False]]))
    array([[0.5]])
    """
    pred = pred_masks.astype(np.float64)
    gt = gt_masks.astype(np.float64)
    intersection = pred @ gt.T
    union = pred.sum(1)[:, None] + gt.sum(1)[None, :] - intersection
    return np.divide(intersection, union, out=np.zeros_like(intersection), where=union > 0)


def _match_class(
    predictions: Sequence[Sequence[InstancePrediction]],
    ground_truths: Sequence[InstanceGroundTruth],
    class_id: int,
    iou_threshold: float,
) -> Tuple[np.ndarray, int]:
    """Greedy score-ordered matching of one class across scenes.

    Returns the true-positive flag of every prediction of the class, in decreasing score order,
    and the number of gt instances of the class.
    """
    ranked = []
    ious = []
    n_gt = 0
    for scene_index, (scene_preds, gt) in enumerate(zip(predictions, ground_truths)):
        gt_of_class = np.flatnonzero(gt.instance_classes == class_id)
        n_gt += len(gt_of_class)
        preds_of_class = [pred for pred in scene_preds if pred.class_id == class_id]
        if preds_of_class and len(gt_of_class):
            gt_masks = gt.point_masks()[gt_of_class]
            scene_ious = point_iou(np.stack([pred.point_mask for pred in preds_of_class]), gt_masks)
        else:
            scene_ious = np.zeros((len(preds_of_class), len(gt_of_class)))
        ious.append(scene_ious)
        for rank, pred in enumerate(preds_of_class):
            ranked.append((-pred.score, scene_index, rank))

    ranked.sort()
    matched = [np.zeros(iou.shape[1], dtype=bool) for iou in ious]
    true_positive = np.zeros(len(ranked), dtype=bool)
    for order, (_, scene_index, rank) in enumerate(ranked):
        candidate_ious = np.where(matched[scene_index], -1.0, ious[scene_index][rank])
        if candidate_ious.size == 0:
            continue
        best = int(candidate_ious.argmax())
        if candidate_ious[best] >= iou_threshold:
            matched[scene_index][best] = True
            true_positive[order] = True
    return true_positive, n_gt


def average_precision(true_positive: np.ndarray, n_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    >>> average_precision(np.array([True, False]), 1)
    1.0
    """
    if n_gt == 0 or true_positive.size == 0:
        return 0.0
    tp = np.cumsum(true_positive)
    fp = np.cumsum(~true_positive)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class ClassMetrics:
    ap: float
    ap50: float
    ap25: float
    precision: float
    recall: float
    n_gt: int


@dataclass
class APResult:
    """Instance segmentation metrics, averaged over the classes that have ground truth."""

    map: float
    ap50: float
    ap25: float
    mprec: float
    mrec: float
    per_class: Dict[int, ClassMetrics] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """Per-class rows followed by an ``average`` row."""
        rows = {
            f"class {class_id}": [m.ap, m.ap50, m.ap25, m.precision, m.recall]
            for class_id, m in sorted(self.per_class.items())
        }
        rows["average"] = [self.map, self.ap50, self.ap25, self.mprec, self.mrec]
        return pd.DataFrame.from_dict(
            rows, orient="index", columns=["mAP", "AP50", "AP25", "mPrec", "mRec"]
        )


def _gt_classes(ground_truths: Sequence[InstanceGroundTruth]) -> List[int]:
    classes = set()
    for gt in ground_truths:
        classes.update(int(c) for c in gt.instance_classes)
    return sorted(classes)


def _check_lengths(predictions, ground_truths):
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"Got predictions for {len(predictions)} scenes but ground truth for "
            f"{len(ground_truths)}"
        )


def _precision_recall_of_class(true_positive: np.ndarray, n_gt: int) -> Tuple[float, float]:
    n_tp = int(true_positive.sum())
    precision = n_tp / true_positive.size if true_positive.size else 0.0
    recall = n_tp / n_gt if n_gt else 0.0
    return precision, recall


def precision_recall(
    predictions: Sequence[Sequence[InstancePrediction]],
    ground_truths: Sequence[InstanceGroundTruth],
    iou_threshold: float = 0.5,
) -> Tuple[float, float]:
    """Class-averaged precision and recall at one IoU threshold.

    Precision of a class without predictions is 0. Averages run over the classes with ground truth;
    with no such class both values are 0.
    """
    _check_lengths(predictions, ground_truths)
    values = []
    for class_id in _gt_classes(ground_truths):
        true_positive, n_gt = _match_class(predictions, ground_truths, class_id, iou_threshold)
        values.append(_precision_recall_of_class(true_positive, n_gt))
    if not values:
        return 0.0, 0.0
    precisions, recalls = zip(*values)
    return float(np.mean(precisions)), float(np.mean(recalls))


def compute_ap(
    predictions: Sequence[Sequence[InstancePrediction]],
    ground_truths: Sequence[InstanceGroundTruth],
) -> APResult:
    """mAP over IoU thresholds 0.50 to 0.95, AP50, AP25 and mPrec / mRec at IoU 0.5.

    ``predictions[i]`` and ``ground_truths[i]`` describe the same scene. Predictions of a class
    without ground truth do not enter any average.
    """
    _check_lengths(predictions, ground_truths)
    per_class: Dict[int, ClassMetrics] = {}
    for class_id in _gt_classes(ground_truths):
        aps = {}
        n_gt = 0
        for threshold in [*AP_IOU_THRESHOLDS, 0.25]:
            true_positive, n_gt = _match_class(predictions, ground_truths, class_id, threshold)
            aps[float(threshold)] = average_precision(true_positive, n_gt)
        true_positive, _ = _match_class(predictions, ground_truths, class_id, 0.5)
        precision, recall = _precision_recall_of_class(true_positive, n_gt)
        per_class[class_id] = ClassMetrics(
            ap=float(np.mean([aps[float(t)] for t in AP_IOU_THRESHOLDS])),
            ap50=aps[0.5],
            ap25=aps[0.25],
            precision=precision,
            recall=recall,
            n_gt=n_gt,
        )

    if not per_class:
        logging.warning("No ground-truth instances to evaluate against, reporting zeros")
        return APResult(0.0, 0.0, 0.0, 0.0, 0.0)
    metrics = list(per_class.values())
    return APResult(
        map=float(np.mean([m.ap for m in metrics])),
        ap50=float(np.mean([m.ap50 for m in metrics])),
        ap25=float(np.mean([m.ap25 for m in metrics])),
        mprec=float(np.mean([m.precision for m in metrics])),
        mrec=float(np.mean([m.recall for m in metrics])),
        per_class=per_class,
    )


def format_predictions(predictions: Sequence[InstancePrediction]) -> str:
    """One line per instance: ``class_id score point_index ...``, in ranking order."""
    lines = []
    for pred in predictions:
        indices = " ".join(str(i) for i in pred.point_indices)
        lines.append(f"{pred.class_id} {pred.score!r} {indices}".rstrip())
    return "".join(line + "\n" for line in lines)


def save_predictions(predictions: Sequence[InstancePrediction], path: Union[str, Path]) -> None:
    Path(path).write_text(format_predictions(predictions))


def load_predictions(path: Union[str, Path], n_points: int) -> List[InstancePrediction]:
    """Read a prediction file written by :func:`save_predictions`."""
    predictions = []
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        try:
            class_id, score = int(fields[0]), float(fields[1])
            indices = np.array([int(i) for i in fields[2:]], dtype=np.int64)
        except (IndexError, ValueError) as error:
            raise ValueError(f"{path}:{line_number}: malformed prediction line: {error}") from error
        if indices.size and (indices.min() < 0 or indices.max() >= n_points):
            raise ValueError(
                f"{path}:{line_number}: point index out of range for a scene of {n_points} points"
            )
        mask = np.zeros(n_points, dtype=bool)
        mask[indices] = True
        predictions.append(InstancePrediction(class_id, score, mask))
    return predictions


def format_metrics_report(result: APResult) -> str:
    return result.to_frame().to_string(float_format=lambda value: f"{value:.4f}") + "\n"


def save_metrics_report(result: APResult, path: Union[str, Path]) -> None:
    Path(path).write_text(format_metrics_report(result))


def print_metrics(result: APResult, console: Optional[Console] = None) -> None:
    """Render the metrics as a rich table."""
    frame = result.to_frame()
    table = Table(title="Instance segmentation")
    table.add_column("")
    for column in frame.columns:
        table.add_column(column, justify="right")
    for name, row in frame.iterrows():
        table.add_row(str(name), *(f"{value:.4f}" for value in row))
    (console or Console()).print(table)


def attention_table(
    weights: Union[torch.Tensor, np.ndarray], partition: SuperpointPartition
) -> pd.DataFrame:
    """Per-query attention over superpoints (``sp_*`` columns) and propagated to points
    (``pt_*`` columns, each point taking its superpoint's weight)."""
    weights = to_numpy(weights) if isinstance(weights, torch.Tensor) else np.asarray(weights)
    if weights.shape[1] != partition.n_superpoints:
        raise ValueError(
            f"Attention over {weights.shape[1]} tokens does not match a partition of "
            f"{partition.n_superpoints} superpoints"
        )
    superpoint_part = pd.DataFrame(
        weights, columns=[f"sp_{j}" for j in range(weights.shape[1])]
    )
    point_part = pd.DataFrame(
        weights[:, partition.ids], columns=[f"pt_{n}" for n in range(partition.ids.shape[0])]
    )
    table = pd.concat([superpoint_part, point_part], axis=1)
    table.index.name = "query"
    return table


def save_attention_tables(
    tables: Sequence[pd.DataFrame], directory: Union[str, Path], stem: str = "attention"
) -> List[Path]:
    """Write one tab-separated file per decoder layer, numbered from 1."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, table in enumerate(tables, start=1):
        path = directory / f"{stem}_layer{layer}.tsv"
        table.to_csv(path, sep="\t", float_format="%.10g")
        paths.append(path)
    return paths


@torch.no_grad()
def predict_scene(
    model: HookedSuperpointTransformer,
    scene: Scene,
    score_floor: float = 0.0,
    top_n: Optional[int] = None,
) -> List[InstancePrediction]:
    """Ranked instances of one scene, read off the model's last prediction head."""
    predictions = model(scene)
    return rank_and_emit(predictions[-1], model.token_partition(scene), score_floor, top_n)


def evaluate_model(
    model: HookedSuperpointTransformer,
    scenes: Sequence[Scene],
    score_floor: float = 0.0,
    top_n: Optional[int] = None,
) -> APResult:
    for index, scene in enumerate(scenes):
        if scene.ground_truth is None:
            raise ValueError(f"Scene {index} has no ground truth to evaluate against")
        try:
            scene.ground_truth.check_classes(model.cfg.n_classes)
        except SceneValidationError as error:
            raise SceneValidationError(f"Scene {index}: {error}") from error
    predictions = [predict_scene(model, scene, score_floor, top_n) for scene in scenes]
    return compute_ap(predictions, [scene.ground_truth for scene in scenes])


def attention_tables(model: HookedSuperpointTransformer, scene: Scene) -> List[pd.DataFrame]:
    """One :func:`attention_table` per decoder layer."""
    partition = model.token_partition(scene)
    return [attention_table(weights, partition) for weights in model.attention_maps(scene)]
