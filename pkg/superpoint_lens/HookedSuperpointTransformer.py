"""Hooked Superpoint Transformer.

The superpoint transformer model: a per-point backbone, superpoint pooling, and a query decoder
whose shared head predicts a class, an IoU-aware score and a superpoint mask for every query after
every decoder layer. Every intermediate activation is exposed through a
:class:`superpoint_lens.hook_points.HookPoint`.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.components import (
    MLP,
    DecoderBlock,
    LayerPrediction,
    PointBackbone,
    PredictionHead,
    superpoint_pool,
)
from superpoint_lens.hook_points import HookedRootModule, HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.scenes import PointCloud, Scene, SuperpointPartition
from superpoint_lens.utils import get_act_name, init_uniform_fan_in_


class HookedSuperpointTransformer(HookedRootModule):
    """Instance segmentation model over superpoints.

    Calling the model on a :class:`superpoint_lens.scenes.Scene` returns ``n_layers + 1``
    :class:`LayerPrediction` objects. The first comes from the learned query vectors alone; each
    later one follows a decoder layer whose cross-attention is restricted to the superpoints the
    previous prediction's masks cover.
    """

    def __init__(self, cfg: Union[HookedSuperpointTransformerConfig, Dict]):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        dtype = self.cfg.dtype

        self.backbone = PointBackbone(self.cfg)
        self.W_superpoint = nn.Parameter(
            torch.empty(self.cfg.d_feature, self.cfg.d_model, dtype=dtype)
        )
        self.b_superpoint = nn.Parameter(torch.zeros(self.cfg.d_model, dtype=dtype))
        self.mask_branch = MLP(self.cfg, self.cfg.d_feature, self.cfg.d_model, self.cfg.d_model)
        self.W_query = nn.Parameter(torch.empty(self.cfg.n_queries, self.cfg.d_model, dtype=dtype))
        self.blocks = nn.ModuleList(
            [DecoderBlock(self.cfg, block_index) for block_index in range(self.cfg.n_layers)]
        )
        self.head = PredictionHead(self.cfg)

        self.hook_point_features = HookPoint()  # [n_points, d_feature]
        self.hook_superpoint_features = HookPoint()  # [n_superpoints, d_feature]
        self.hook_superpoint_tokens = HookPoint()  # [n_superpoints, d_model]
        self.hook_mask_features = HookPoint()  # [n_superpoints, d_model]
        self.hook_queries = HookPoint()  # [n_queries, d_model]

        self.init_weights()

        # Gives each module a parameter with its name (relative to this root module)
        # Needed for HookPoints to work
        self.setup()

    def init_weights(self):
        """Initialize weights.

        Every weight matrix and bias is drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)],
        where a bias uses the fan in of its weight. Layer norms start at gain 1 and bias 0. The seed
        is set here so the same config always yields the same parameters.
        """
        if self.cfg.seed is not None:
            torch.manual_seed(self.cfg.seed)

        self.backbone.init_weights()
        init_uniform_fan_in_(self.W_superpoint)
        init_uniform_fan_in_(self.b_superpoint, fan_in=self.cfg.d_feature)
        self.mask_branch.init_weights()
        init_uniform_fan_in_(self.W_query, fan_in=self.cfg.d_model)
        for block in self.blocks:
            block.init_weights()
        self.head.init_weights()

    def token_partition(self, scene: Scene) -> SuperpointPartition:
        """The grouping of points into decoder tokens: the scene's superpoints, or single points
        when superpoint pooling is switched off."""
        if self.cfg.use_superpoint_pooling:
            return scene.superpoints
        return SuperpointPartition.identity(scene.n_points)

    def encode_points(self, cloud: PointCloud) -> Float[torch.Tensor, "n_points d_feature"]:
        return self.hook_point_features(self.backbone.encode_points(cloud))

    def superpoint_features(self, scene: Scene) -> Float[torch.Tensor, "n_superpoints d_feature"]:
        point_features = self.encode_points(scene.cloud)
        return self.hook_superpoint_features(
            superpoint_pool(point_features, self.token_partition(scene))
        )

    def mask_features(
        self, superpoint_features: Float[torch.Tensor, "n_superpoints d_feature"]
    ) -> Float[torch.Tensor, "n_superpoints d_model"]:
        """Mask-aware superpoint features, a row-wise MLP of the pooled features."""
        return self.hook_mask_features(self.mask_branch(superpoint_features))

    @staticmethod
    def build_attention_mask(
        masks: Float[torch.Tensor, "n_queries n_superpoints"], threshold: float
    ) -> Float[torch.Tensor, "n_queries n_superpoints"]:
        """Additive mask that is 0 where ``masks >= threshold`` and -inf elsewhere.

        >>> HookedSuperpointTransformer.build_attention_mask(torch.tensor([[0.6, 0.5, 0.4]]), 0.5)
        tensor([[0., 0., -inf]])
        """
        if not 0 < threshold < 1:
            raise ValueError(f"Attention mask threshold must lie in (0, 1), got {threshold}")
        masks = masks.detach()
        return torch.where(
            masks >= threshold,
            torch.zeros_like(masks),
            torch.full_like(masks, float("-inf")),
        )

    def decode(
        self,
        superpoint_features: Float[torch.Tensor, "n_superpoints d_feature"],
        attention_masks: Optional[Sequence[torch.Tensor]] = None,
    ) -> List[LayerPrediction]:
        """Run the query decoder over pooled superpoint features.

        Args:
            superpoint_features: Pooled backbone features, one row per superpoint.
            attention_masks: Optional additive masks, one per decoder layer, used instead of the
                masks built from the previous predictions. Holding them fixed makes the decoder
                a smooth function of its parameters.

        Returns:
            ``n_layers + 1`` predictions, the first made from the query vectors alone.
        """
        if attention_masks is not None and len(attention_masks) != self.cfg.n_layers:
            raise ValueError(
                f"Expected {self.cfg.n_layers} attention masks, got {len(attention_masks)}"
            )
        superpoint_tokens = self.hook_superpoint_tokens(
            kernels.matmul(superpoint_features, self.W_superpoint) + self.b_superpoint
        )
        mask_features = self.mask_features(superpoint_features)
        queries = self.hook_queries(self.W_query)

        predictions = [self.head(queries, mask_features)]
        for block_index, block in enumerate(self.blocks):
            if attention_masks is not None:
                attention_mask = attention_masks[block_index]
            elif self.cfg.use_attention_mask:
                attention_mask = self.build_attention_mask(
                    predictions[-1].masks, self.cfg.mask_threshold
                )
            else:
                attention_mask = torch.zeros_like(predictions[-1].masks.detach())
            queries = block(queries, superpoint_tokens, attention_mask)
            predictions.append(self.head(queries, mask_features))
        return predictions

    def forward(
        self, scene: Scene, attention_masks: Optional[Sequence[torch.Tensor]] = None
    ) -> List[LayerPrediction]:
        return self.decode(self.superpoint_features(scene), attention_masks)

    def attention_masks(self, scene: Scene) -> List[torch.Tensor]:
        """The additive masks each decoder layer used on ``scene``."""
        names = [get_act_name("attn_mask", layer) for layer in range(self.cfg.n_layers)]
        with torch.no_grad():
            _, cache = self.run_with_cache(scene, names_filter=names)
        return [cache[name] for name in names]

    def attention_maps(self, scene: Scene) -> List[Float[torch.Tensor, "n_queries n_superpoints"]]:
        """Cross-attention weights of every decoder layer, averaged over heads."""
        names = [get_act_name("pattern", layer) for layer in range(self.cfg.n_layers)]
        with torch.no_grad():
            _, cache = self.run_with_cache(scene, names_filter=names)
        if not names:
            logging.warning("Model has no decoder layers, so there is no attention to report")
        return [cache[name].mean(dim=0) for name in names]
