"""Hooked Superpoint Transformer Backbone Component.

This module contains the per-point feature extractor :class:`PointBackbone` and the superpoint
pooling layer :func:`superpoint_pool`.
"""
from typing import Dict, Union

import torch
import torch.nn as nn
from jaxtyping import Float

from superpoint_lens import kernels
from superpoint_lens.hook_points import HookPoint
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.scenes import PointCloud, SuperpointPartition
from superpoint_lens.utils import init_uniform_fan_in_


class PointBackbone(nn.Module):
    """Three-layer per-point MLP, d_input -> d_hidden -> d_hidden -> d_feature.

    Rows are processed independently; all mixing between points happens in superpoint pooling.
    """

    def __init__(self, cfg: Union[Dict, HookedSuperpointTransformerConfig]):
        super().__init__()
        self.cfg = HookedSuperpointTransformerConfig.unwrap(cfg)
        dtype = self.cfg.dtype
        self.W_in = nn.Parameter(torch.empty(self.cfg.d_input, self.cfg.d_hidden, dtype=dtype))
        self.b_in = nn.Parameter(torch.zeros(self.cfg.d_hidden, dtype=dtype))
        self.W_hidden = nn.Parameter(torch.empty(self.cfg.d_hidden, self.cfg.d_hidden, dtype=dtype))
        self.b_hidden = nn.Parameter(torch.zeros(self.cfg.d_hidden, dtype=dtype))
        self.W_out = nn.Parameter(torch.empty(self.cfg.d_hidden, self.cfg.d_feature, dtype=dtype))
        self.b_out = nn.Parameter(torch.zeros(self.cfg.d_feature, dtype=dtype))

        self.hook_in = HookPoint()  # [n_points, d_hidden]
        self.hook_hidden = HookPoint()  # [n_points, d_hidden]

    def init_weights(self):
        init_uniform_fan_in_(self.W_in)
        init_uniform_fan_in_(self.b_in, fan_in=self.cfg.d_input)
        init_uniform_fan_in_(self.W_hidden)
        init_uniform_fan_in_(self.b_hidden, fan_in=self.cfg.d_hidden)
        init_uniform_fan_in_(self.W_out)
        init_uniform_fan_in_(self.b_out, fan_in=self.cfg.d_hidden)

    def forward(
        self, points: Float[torch.Tensor, "n_points d_input"]
    ) -> Float[torch.Tensor, "n_points d_feature"]:
        x = self.hook_in(kernels.relu(kernels.matmul(points, self.W_in) + self.b_in))
        x = self.hook_hidden(kernels.relu(kernels.matmul(x, self.W_hidden) + self.b_hidden))
        return kernels.matmul(x, self.W_out) + self.b_out

    def encode_points(self, cloud: PointCloud) -> Float[torch.Tensor, "n_points d_feature"]:
        """Point-wise features of a point cloud."""
        points = torch.as_tensor(cloud.features(), dtype=self.cfg.dtype)
        return self(points)


def superpoint_pool(
    features: Float[torch.Tensor, "n_points d_feature"], partition: SuperpointPartition
) -> Float[torch.Tensor, "n_superpoints d_feature"]:
    """Average the point features of every superpoint.

    >>> features = torch.tensor([[1.0, 3.0], [5.0, 7.0]], dtype=torch.float64)
    >>> superpoint_pool(features, SuperpointPartition.from_ids([0, 0]))
    tensor([[3., 5.]], dtype=torch.float64)
    """
    if features.shape[0] != partition.ids.shape[0]:
        raise kernels.ShapeError(
            f"{features.shape[0]} feature rows cannot be pooled over a partition of "
            f"{partition.ids.shape[0]} points"
        )
    ids = torch.as_tensor(partition.ids, dtype=torch.long)
    return kernels.superpoint_pool(features, ids, partition.n_superpoints)
