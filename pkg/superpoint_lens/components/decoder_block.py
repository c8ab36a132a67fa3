"""Hooked Superpoint Transformer Decoder Block Component.

This module contains all the component :class:`DecoderBlock`.
"""
from typing import Dict, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens.components.attention import Attention
from superpoint_lens.components.layer_norm import LayerNorm
from superpoint_lens.components.mlp import MLP
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


class DecoderBlock(nn.Module):
    """One decoder layer: cross-attention, self-attention and feed-forward sublayers.

    Every sublayer is post-norm, ``ln(x + sublayer(x))``. Cross-attention runs first unless
    ``cfg.cross_attention_first`` is False.
    """

    def __init__(self, cfg: Union[Dict, HookedSuperpointTransformerConfig], block_index: int):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        self.block_index = block_index

        self.cross_attn = Attention(self.cfg)
        self.ln_cross = LayerNorm(self.cfg)
        self.self_attn = Attention(self.cfg)
        self.ln_self = LayerNorm(self.cfg)
        self.mlp = MLP(self.cfg)
        self.ln_mlp = LayerNorm(self.cfg)

        self.hook_attn_mask = HookPoint()  # [n_queries, n_superpoints]
        self.hook_resid_pre = HookPoint()  # [n_queries, d_model]
        self.hook_cross_out = HookPoint()  # [n_queries, d_model]
        self.hook_self_out = HookPoint()  # [n_queries, d_model]
        self.hook_mlp_out = HookPoint()  # [n_queries, d_model]
        self.hook_resid_post = HookPoint()  # [n_queries, d_model]

    def init_weights(self):
        self.cross_attn.init_weights()
        self.self_attn.init_weights()
        self.mlp.init_weights()

    def _cross_sublayer(
        self,
        queries: Float[torch.Tensor, "n_queries d_model"],
        superpoint_tokens: Float[torch.Tensor, "n_superpoints d_model"],
        attention_mask: Float[torch.Tensor, "n_queries n_superpoints"],
    ) -> Float[torch.Tensor, "n_queries d_model"]:
        cross_out = self.hook_cross_out(
            self.cross_attn(queries, superpoint_tokens, superpoint_tokens, attention_mask)
        )
        return self.ln_cross(queries + cross_out)

    def _self_sublayer(
        self, queries: Float[torch.Tensor, "n_queries d_model"]
    ) -> Float[torch.Tensor, "n_queries d_model"]:
        self_out = self.hook_self_out(self.self_attn(queries, queries, queries))
        return self.ln_self(queries + self_out)

    def forward(
        self,
        queries: Float[torch.Tensor, "n_queries d_model"],
        superpoint_tokens: Float[torch.Tensor, "n_superpoints d_model"],
        attention_mask: Float[torch.Tensor, "n_queries n_superpoints"],
    ) -> Float[torch.Tensor, "n_queries d_model"]:
        """Update the query vectors.

        Args:
            queries: The previous layer's query vectors.
            superpoint_tokens: Superpoint features projected to d_model.
            attention_mask: Additive mask of 0 / -inf built from the previous prediction's masks.
        """
        attention_mask = self.hook_attn_mask(attention_mask)
        resid = self.hook_resid_pre(queries)
        if self.cfg.cross_attention_first:
            resid = self._cross_sublayer(resid, superpoint_tokens, attention_mask)
            resid = self._self_sublayer(resid)
        else:
            resid = self._self_sublayer(resid)
            resid = self._cross_sublayer(resid, superpoint_tokens, attention_mask)
        mlp_out = self.hook_mlp_out(self.mlp(resid))
        return self.hook_resid_post(self.ln_mlp(resid + mlp_out))
