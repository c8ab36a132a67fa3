"""Utils.

This module contains varied utility functions used throughout the library.
"""

from __future__ import annotations

import re
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn


def to_numpy(tensor):
    """
    Helper function to convert a tensor to a numpy array. Also works on lists, tuples, and numpy
    arrays.
    """
    if isinstance(tensor, np.ndarray):
        return tensor
    elif isinstance(tensor, (list, tuple)):
        return np.array(tensor)
    elif isinstance(tensor, (torch.Tensor, torch.nn.parameter.Parameter)):
        return tensor.detach().cpu().numpy()
    elif isinstance(tensor, (int, float, bool, str)):
        return np.array(tensor)
    else:
        raise ValueError(f"Input to to_numpy has invalid type: {type(tensor)}")


def calc_fan_in_and_fan_out(tensor):
    """
    Calculate the fan in and fan out of a tensor. Linear weights are stored d_in x d_out and
    attention head weights n_heads x d_model x d_head, so torch's own helper gets these backwards.
    """
    shape = tensor.shape

    if len(shape) == 0:
        raise ValueError("Fan in and fan out can not be computed for scalars.")
    elif len(shape) == 1:
        fan_in = 1
        fan_out = shape[0]
    elif len(shape) == 2:  # Linear transform
        fan_in = shape[0]
        fan_out = shape[1]
    elif len(shape) == 3:  # Attention head weight, has shape n_heads x d_model x d_head
        fan_in = shape[1]
        fan_out = shape[0] * shape[2]
    else:
        raise ValueError(f"Fan in and fan out can not be computed for shape {shape} tensors.")

    return fan_in, fan_out


def init_uniform_fan_in_(param: nn.Parameter, fan_in: Optional[int] = None) -> torch.Tensor:
    """Fill ``param`` uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    Biases and output projections pass the fan in of the weight they belong to.
    """
    if fan_in is None:
        fan_in, _ = calc_fan_in_and_fan_out(param)
    bound = 1.0 / np.sqrt(fan_in)
    return nn.init.uniform_(param, -bound, bound)


def get_act_name(name: str, layer: Optional[Union[int, str]] = None) -> str:
    """
    Helper to convert shorthand to a hook point name of a HookedSuperpointTransformer.

    The first run of digits in ``name`` (if any) is read as the decoder layer index, counted from
    zero over the decoder blocks.

    >>> get_act_name("pattern", 1)
    'blocks.1.cross_attn.hook_pattern'
    >>> get_act_name("self_pattern0")
    'blocks.0.self_attn.hook_pattern'
    >>> get_act_name("attn_mask", 2)
    'blocks.2.hook_attn_mask'
    >>> get_act_name("superpoint_features")
    'hook_superpoint_features'
    """
    if ("." in name or name.startswith("hook_")) and layer is None:
        return name
    match = re.match(r"([a-z_]+?)(\d+)$", name)
    if match is not None:
        name, layer = match.group(1), match.group(2)

    prefix = "" if layer is None else f"blocks.{layer}."
    if name in ["q", "k", "v", "z", "attn_scores", "pattern"]:
        return f"{prefix}cross_attn.hook_{name}"
    if name.startswith("self_"):
        return f"{prefix}self_attn.hook_{name[len('self_'):]}"
    if name in ["pre", "post"]:
        return f"{prefix}mlp.hook_{name}"
    return f"{prefix}hook_{name}"
