"""Hooked Superpoint Transformer Attention Component.

This module contains all the component :class:`Attention`.
"""
from typing import Dict, Optional, Union

import einops
import numpy as np
import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.utils import init_uniform_fan_in_


class Attention(nn.Module):
    """Multi-head attention from a set of queries to a set of keys, with no positional terms.

    The same module serves as superpoint cross-attention (keys and values are the projected
    superpoint features, restricted by an additive mask) and as query self-attention.
    """

    def __init__(self, cfg: Union[Dict, HookedSuperpointTransformerConfig]):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        n_heads, d_model, d_head = self.cfg.n_heads, self.cfg.d_model, self.cfg.d_head
        dtype = self.cfg.dtype
        self.W_Q = nn.Parameter(torch.empty(n_heads, d_model, d_head, dtype=dtype))
        self.W_K = nn.Parameter(torch.empty(n_heads, d_model, d_head, dtype=dtype))
        self.W_V = nn.Parameter(torch.empty(n_heads, d_model, d_head, dtype=dtype))
        self.W_O = nn.Parameter(torch.empty(n_heads, d_head, d_model, dtype=dtype))
        self.b_Q = nn.Parameter(torch.zeros(n_heads, d_head, dtype=dtype))
        self.b_K = nn.Parameter(torch.zeros(n_heads, d_head, dtype=dtype))
        self.b_V = nn.Parameter(torch.zeros(n_heads, d_head, dtype=dtype))
        self.b_O = nn.Parameter(torch.zeros(d_model, dtype=dtype))

        self.attn_scale = np.sqrt(d_head)

        self.hook_q = HookPoint()  # [n_heads, n_queries, d_head]
        self.hook_k = HookPoint()  # [n_heads, n_keys, d_head]
        self.hook_v = HookPoint()  # [n_heads, n_keys, d_head]
        self.hook_attn_scores = HookPoint()  # [n_heads, n_queries, n_keys]
        self.hook_pattern = HookPoint()  # [n_heads, n_queries, n_keys]
        self.hook_z = HookPoint()  # [n_heads, n_queries, d_head]

    def init_weights(self):
        d_model = self.cfg.d_model
        for param in [self.W_Q, self.W_K, self.W_V, self.W_O]:
            # W_O reads the concatenation of all heads, which is d_model wide.
            init_uniform_fan_in_(param, fan_in=d_model)
        for param in [self.b_Q, self.b_K, self.b_V, self.b_O]:
            init_uniform_fan_in_(param, fan_in=d_model)

    def _project(
        self,
        x: Float[torch.Tensor, "rows d_model"],
        W: Float[torch.Tensor, "n_heads d_model d_head"],
        b: Float[torch.Tensor, "n_heads d_head"],
    ) -> Float[torch.Tensor, "n_heads rows d_head"]:
        per_head = einops.repeat(
            x, "rows d_model -> n_heads rows d_model", n_heads=self.cfg.n_heads
        )
        return kernels.matmul(per_head, W) + b[:, None, :]

    def forward(
        self,
        query_input: Float[torch.Tensor, "n_queries d_model"],
        key_input: Float[torch.Tensor, "n_keys d_model"],
        value_input: Float[torch.Tensor, "n_keys d_model"],
        additive_attention_mask: Optional[Float[torch.Tensor, "n_queries n_keys"]] = None,
    ) -> Float[torch.Tensor, "n_queries d_model"]:
        """
        ``additive_attention_mask`` holds 0 where a query may attend to a key and -inf elsewhere;
        None lets every query attend everywhere.
        """
        q = self.hook_q(self._project(query_input, self.W_Q, self.b_Q))
        k = self.hook_k(self._project(key_input, self.W_K, self.b_K))
        v = self.hook_v(self._project(value_input, self.W_V, self.b_V))

        attn_scores = self.hook_attn_scores(
            kernels.matmul(q, k.transpose(-1, -2)) / self.attn_scale
        )
        if additive_attention_mask is None:
            mask = torch.zeros_like(attn_scores)
        else:
            mask = einops.repeat(
                additive_attention_mask,
                "n_queries n_keys -> n_heads n_queries n_keys",
                n_heads=self.cfg.n_heads,
            )
        pattern = self.hook_pattern(kernels.masked_softmax_rows(attn_scores, mask))
        z = self.hook_z(kernels.matmul(pattern, v))
        per_head_out = kernels.matmul(z, self.W_O)
        return einops.reduce(per_head_out, "n_heads rows d_model -> rows d_model", "sum") + self.b_O
