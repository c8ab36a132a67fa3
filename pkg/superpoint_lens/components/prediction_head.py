"""Hooked Superpoint Transformer Prediction Head Component.

This module contains the shared prediction head :class:`PredictionHead` and its output
:class:`LayerPrediction`.
"""
from dataclasses import dataclass
from typing import Dict, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.components.mlp import MLP
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.utils import init_uniform_fan_in_


@dataclass
class LayerPrediction:
    """Everything the shared head predicts for the K queries of one decoder layer."""

    class_probs: Float[torch.Tensor, "n_queries n_classes_plus_one"]
    """Softmax over the classes, the last column being "no instance"."""

    scores: Float[torch.Tensor, "n_queries"]
    """IoU-aware scores in [0, 1]."""

    masks: Float[torch.Tensor, "n_queries n_superpoints"]
    """Superpoint mask probabilities in [0, 1]."""

    @property
    def n_queries(self) -> int:
        return self.class_probs.shape[0]

    def detach(self) -> "LayerPrediction":
        return LayerPrediction(
            self.class_probs.detach(), self.scores.detach(), self.masks.detach()
        )


class PredictionHead(nn.Module):
    """Class, score and mask predictions from query vectors, shared by every decoder layer."""

    def __init__(self, cfg: Union[Dict, HookedSuperpointTransformerConfig]):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        d_model = self.cfg.d_model
        self.class_mlp = MLP(self.cfg, d_model, d_model, self.cfg.n_classes + 1)
        if self.cfg.use_score_branch:
            self.score_mlp = MLP(self.cfg, d_model, d_model, 1)
        if self.cfg.project_mask_queries:
            self.W_mask = nn.Parameter(torch.empty(d_model, d_model, dtype=self.cfg.dtype))
            self.b_mask = nn.Parameter(torch.zeros(d_model, dtype=self.cfg.dtype))

        self.hook_class_logits = HookPoint()  # [n_queries, n_classes + 1]
        self.hook_mask_logits = HookPoint()  # [n_queries, n_superpoints]

    def init_weights(self):
        self.class_mlp.init_weights()
        if self.cfg.use_score_branch:
            self.score_mlp.init_weights()
        if self.cfg.project_mask_queries:
            init_uniform_fan_in_(self.W_mask)
            init_uniform_fan_in_(self.b_mask, fan_in=self.cfg.d_model)

    def forward(
        self,
        queries: Float[torch.Tensor, "n_queries d_model"],
        mask_features: Float[torch.Tensor, "n_superpoints d_model"],
    ) -> LayerPrediction:
        class_logits = self.hook_class_logits(self.class_mlp(queries))
        class_probs = kernels.masked_softmax_rows(class_logits, torch.zeros_like(class_logits))

        if self.cfg.use_score_branch:
            scores = kernels.sigmoid(self.score_mlp(queries))[:, 0]
        else:
            scores = torch.ones(queries.shape[0], dtype=queries.dtype)

        if self.cfg.project_mask_queries:
            mask_queries = kernels.matmul(queries, self.W_mask) + self.b_mask
        else:
            mask_queries = queries
        mask_logits = self.hook_mask_logits(kernels.matmul(mask_queries, mask_features.T))
        return LayerPrediction(class_probs, scores, kernels.sigmoid(mask_logits))
