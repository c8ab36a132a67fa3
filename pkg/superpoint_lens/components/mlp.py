"""Hooked Superpoint Transformer MLP Component.

This module contains all the component :class:`MLP`.
"""
from typing import Dict, Optional, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.utils import init_uniform_fan_in_


class MLP(nn.Module):
    """Row-wise two-layer perceptron ``relu(x W_in + b_in) W_out + b_out``.

    Used as the decoder feed-forward sublayer (d_model -> d_mlp -> d_model, the default), the mask
    branch and the class and score heads.
    """

    def __init__(
        self,
        cfg: Union[Dict, HookedSuperpointTransformerConfig],
        d_in: Optional[int] = None,
        d_hidden: Optional[int] = None,
        d_out: Optional[int] = None,
    ):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        self.d_in = self.cfg.d_model if d_in is None else d_in
        self.d_hidden = self.cfg.d_mlp if d_hidden is None else d_hidden
        self.d_out = self.cfg.d_model if d_out is None else d_out

        self.W_in = nn.Parameter(torch.empty(self.d_in, self.d_hidden, dtype=self.cfg.dtype))
        self.b_in = nn.Parameter(torch.zeros(self.d_hidden, dtype=self.cfg.dtype))
        self.W_out = nn.Parameter(torch.empty(self.d_hidden, self.d_out, dtype=self.cfg.dtype))
        self.b_out = nn.Parameter(torch.zeros(self.d_out, dtype=self.cfg.dtype))

        self.hook_pre = HookPoint()  # [rows, d_hidden]
        self.hook_post = HookPoint()  # [rows, d_hidden]

    def init_weights(self):
        init_uniform_fan_in_(self.W_in)
        init_uniform_fan_in_(self.b_in, fan_in=self.d_in)
        init_uniform_fan_in_(self.W_out)
        init_uniform_fan_in_(self.b_out, fan_in=self.d_hidden)

    def forward(self, x: Float[torch.Tensor, "rows d_in"]) -> Float[torch.Tensor, "rows d_out"]:
        pre_act = self.hook_pre(kernels.matmul(x, self.W_in) + self.b_in)
        post_act = self.hook_post(kernels.relu(pre_act))
        return kernels.matmul(post_act, self.W_out) + self.b_out
