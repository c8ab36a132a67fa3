"""Hooked Superpoint Transformer Layer Norm Component.

This module contains all the component :class:`LayerNorm`.
"""
from typing import Dict, Optional, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


class LayerNorm(nn.Module):
    def __init__(
        self, cfg: Union[Dict, HookedSuperpointTransformerConfig], length: Optional[int] = None
    ):
        """
        LayerNorm with optional length parameter

        length (Optional[int]): The dimension of the LayerNorm. If not provided, assumed to be
            d_model
        """
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        self.eps = self.cfg.eps
        self.length = self.cfg.d_model if length is None else length

        self.w = nn.Parameter(torch.ones(self.length, dtype=self.cfg.dtype))
        self.b = nn.Parameter(torch.zeros(self.length, dtype=self.cfg.dtype))

        # Hook_normalized is on the LN output
        self.hook_normalized = HookPoint()  # [n_queries, length]

    def forward(self, x: Float[torch.Tensor, "... length"]) -> Float[torch.Tensor, "... length"]:
        return self.hook_normalized(kernels.layer_norm(x, self.w, self.b, self.eps))
