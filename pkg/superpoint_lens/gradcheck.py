"""Gradient Check.

Runs :func:`superpoint_lens.kernels.finite_diff_check` over every kernel on small random inputs,
over one decoder layer, and over the full training loss of a toy model on a toy scene. The
attention masks, the matching and the score targets of the toy run are computed once and then held
fixed, which makes the loss a smooth function of the parameters. Model-level gradient entries
smaller than ``MODEL_ATOL`` are held to an absolute error instead of a relative one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
import torch

from superpoint_lens import kernels
from superpoint_lens.HookedSuperpointTransformer import HookedSuperpointTransformer
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.kernels import FiniteDiffReport, finite_diff_check
from superpoint_lens.loss import LossConfig, SceneTargets, total_loss
from superpoint_lens.scenes import (
    Scene,
    SuperpointPartition,
    SyntheticSceneConfig,
    generate_synthetic_scene,
)

DEFAULT_TOLERANCE = 1e-4
KERNEL_STEP = 1e-6
# Step for the checks that run the whole model.
MODEL_STEP = 1e-5
# Error floor for the checks that run the whole model. Their central differences carry round-off
# near 1e-10, so gradient entries below this are compared absolutely.
MODEL_ATOL = 1e-5
TOY_SUPERPOINTS = 20


@dataclass
class GradcheckReport:
    """Finite-difference reports keyed by check name, in the order they ran."""

    entries: Dict[str, FiniteDiffReport] = field(default_factory=dict)
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(report.passed(self.tolerance) for report in self.entries.values())

    def failures(self) -> List[str]:
        return [
            name for name, report in self.entries.items() if not report.passed(self.tolerance)
        ]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "check": name,
                "max_rel_error": report.max_rel_error,
                "parameter": report.param_name or "",
                "index": "" if report.index is None else ",".join(str(i) for i in report.index),
                "passed": report.passed(self.tolerance),
            }
            for name, report in self.entries.items()
        ]
        return pd.DataFrame(rows).set_index("check")


def toy_model_config(seed: int) -> HookedSuperpointTransformerConfig:
    """A two-layer, eight-query model small enough to difference every parameter."""
    return HookedSuperpointTransformerConfig(
        d_hidden=8,
        d_feature=8,
        d_model=8,
        n_heads=2,
        d_mlp=16,
        n_layers=2,
        n_queries=8,
        n_classes=3,
        seed=seed,
    )


def toy_scene(seed: int) -> Scene:
    """Two instances and some floor clutter over ``TOY_SUPERPOINTS`` interleaved superpoints."""
    scene = generate_synthetic_scene(
        seed,
        SyntheticSceneConfig(
            num_instances=2, points_per_instance=24, num_classes=3, background_points=12
        ),
    )
    ids = np.arange(scene.n_points) % TOY_SUPERPOINTS
    return scene.with_superpoints(SuperpointPartition.from_ids(ids))


def _leaf(generator: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=torch.float64).requires_grad_()


def _weighted_sum(output: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # Random weights stop softmax or layer norm outputs from summing to a constant.
    return (output * weights).sum()


KernelCheck = Tuple[Callable[[], torch.Tensor], Dict[str, torch.Tensor]]


def kernel_checks(seed: int) -> Dict[str, KernelCheck]:
    """A scalar function and its leaf inputs for every kernel."""
    generator = torch.Generator().manual_seed(seed)

    def weights(*shape: int) -> torch.Tensor:
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    a, b = _leaf(generator, 2, 3, 4), _leaf(generator, 2, 4, 5)
    matmul_weights = weights(2, 3, 5)

    logits = _leaf(generator, 4, 5)
    add_mask = torch.zeros(4, 5, dtype=torch.float64)
    add_mask[0, [1, 3]] = float("-inf")
    add_mask[3] = float("-inf")
    softmax_weights = weights(4, 5)

    with torch.no_grad():
        x = torch.randn(10, generator=generator, dtype=torch.float64)
        x = x.sign() * (x.abs() + 0.1)
    sigmoid_input = x.clone().requires_grad_()
    relu_input = x.clone().requires_grad_()
    pointwise_weights = weights(10)

    ln_input, gain, bias = _leaf(generator, 4, 6), _leaf(generator, 6), _leaf(generator, 6)
    ln_weights = weights(4, 6)

    features = _leaf(generator, 7, 3)
    ids = torch.tensor([0, 1, 0, 2, 1, 2, 2])
    pool_weights = weights(3, 3)

    return {
        "matmul": (
            lambda: _weighted_sum(kernels.matmul(a, b), matmul_weights),
            {"a": a, "b": b},
        ),
        "masked_softmax_rows": (
            lambda: _weighted_sum(kernels.masked_softmax_rows(logits, add_mask), softmax_weights),
            {"logits": logits},
        ),
        "sigmoid": (
            lambda: _weighted_sum(kernels.sigmoid(sigmoid_input), pointwise_weights),
            {"x": sigmoid_input},
        ),
        "relu": (
            lambda: _weighted_sum(kernels.relu(relu_input), pointwise_weights),
            {"x": relu_input},
        ),
        "layer_norm": (
            lambda: _weighted_sum(kernels.layer_norm(ln_input, gain, bias), ln_weights),
            {"x": ln_input, "gain": gain, "bias": bias},
        ),
        "superpoint_pool": (
            lambda: _weighted_sum(kernels.superpoint_pool(features, ids, 3), pool_weights),
            {"features": features},
        ),
    }


def check_decoder_layer(model: HookedSuperpointTransformer, seed: int) -> FiniteDiffReport:
    """Difference every parameter of the first decoder layer under a fixed partial mask."""
    generator = torch.Generator().manual_seed(seed)
    block = model.blocks[0]
    n_queries, d_model = model.cfg.n_queries, model.cfg.d_model
    with torch.no_grad():
        queries = model.W_query.detach().clone()
        tokens = torch.randn(TOY_SUPERPOINTS, d_model, generator=generator, dtype=torch.float64)
        keep = torch.rand(n_queries, TOY_SUPERPOINTS, generator=generator) < 0.5
        attention_mask = torch.zeros(keep.shape, dtype=torch.float64)
        attention_mask[~keep] = float("-inf")
        weights = torch.randn(n_queries, d_model, generator=generator, dtype=torch.float64)
    params = {name: param for name, param in block.named_parameters()}
    return finite_diff_check(
        lambda: _weighted_sum(block(queries, tokens, attention_mask), weights),
        params,
        step=MODEL_STEP,
        atol=MODEL_ATOL,
    )


def end_to_end_loss(
    model: HookedSuperpointTransformer, scene: Scene, loss_config: LossConfig
) -> Callable[[], torch.Tensor]:
    """The total loss as a function of the parameters, with the attention masks, the matching and
    the score targets frozen at their current values."""
    attention_masks = model.attention_masks(scene)
    targets = SceneTargets.from_scene(scene, model.token_partition(scene))
    with torch.no_grad():
        frozen = total_loss(
            model(scene, attention_masks),
            targets,
            loss_config,
            iterative_prediction=model.cfg.iterative_prediction,
            use_score_loss=model.cfg.use_score_branch,
        )
    assignments, score_targets = frozen.assignments, frozen.score_targets

    def loss() -> torch.Tensor:
        return total_loss(
            model(scene, attention_masks),
            targets,
            loss_config,
            assignments=assignments,
            iterative_prediction=model.cfg.iterative_prediction,
            use_score_loss=model.cfg.use_score_branch,
            score_targets=score_targets,
        ).total

    return loss


def run_gradcheck(seed: int = 1, tolerance: float = DEFAULT_TOLERANCE) -> GradcheckReport:
    """Check every kernel, one decoder layer and the end-to-end loss."""
    report = GradcheckReport(tolerance=tolerance)
    for name, (objective, params) in kernel_checks(seed).items():
        report.entries[name] = finite_diff_check(objective, params, step=KERNEL_STEP)

    model = HookedSuperpointTransformer(toy_model_config(seed))
    report.entries["decoder_layer"] = check_decoder_layer(model, seed)

    loss = end_to_end_loss(model, toy_scene(seed), LossConfig())
    report.entries["end_to_end"] = finite_diff_check(
        loss, dict(model.named_parameters()), step=MODEL_STEP, atol=MODEL_ATOL
    )
    return report
