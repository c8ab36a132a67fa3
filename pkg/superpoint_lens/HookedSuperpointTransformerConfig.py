"""Hooked Superpoint Transformer Config.

Module with a dataclass for storing the configuration of a
:class:`superpoint_lens.HookedSuperpointTransformer` model.
"""

from __future__ import annotations

import logging
import pprint
import random
from dataclasses import dataclass
from typing import Any, Dict, Union

import numpy as np
import torch

DTYPE_FROM_STRING = {
    "float64": torch.float64,
    "float32": torch.float32,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "large": {"n_layers": 6, "n_queries": 400},
}


@dataclass
class HookedSuperpointTransformerConfig:
    """
    Configuration class to store the configuration of a HookedSuperpointTransformer model.

    See further_comments.md for more details on the ablation switches.

    Args:
        d_input (int): Width of a raw point row (xyz + rgb). Always 6.
        d_hidden (int): Hidden width of the per-point backbone MLP. Defaults to 64.
        d_feature (int): Width of the point and superpoint features produced by the backbone.
            Defaults to 32.
        d_model (int): Width of the query vectors and of the projected superpoint features.
            Defaults to 32.
        n_heads (int): Number of attention heads. Must divide d_model. Defaults to 4.
        d_mlp (int): Hidden width of the decoder feed-forward sublayers. Defaults to 64.
        n_layers (int): Number of decoder layers. The model makes n_layers + 1 predictions, the
            first one from the raw query vectors. Defaults to 3.
        n_queries (int): Number of query vectors, i.e. the most instances a scene can yield.
            Defaults to 20.
        n_classes (int): Number of semantic classes, not counting the extra "no instance" class.
            Defaults to 4.
        mask_threshold (float): A query attends to a superpoint in the next layer iff its
            previous mask probability there is at least this value. Must lie in (0, 1). Defaults
            to 0.5.
        eps (float): Epsilon added to the variance in layer norm. Defaults to 1e-5.
        use_attention_mask (bool): Whether cross-attention is restricted by the previous layer's
            masks. Defaults to True.
        iterative_prediction (bool): Whether every prediction (including the query-only one) is
            supervised, or only the last. Defaults to True.
        cross_attention_first (bool): Whether a decoder layer runs cross-attention before
            self-attention. Defaults to True.
        use_superpoint_pooling (bool): Whether point features are pooled into superpoints. If
            False, every point is a token of its own. Defaults to True.
        use_score_branch (bool): Whether the IoU-aware score is predicted and trained. If False,
            scores are fixed to 1. Defaults to True.
        project_mask_queries (bool): Whether queries pass through a learned linear projection
            before the product with the mask features. Defaults to True.
        seed (int, *optional*): The seed used to initialize the weights. Also seeds Python,
            PyTorch and NumPy. Defaults to None.
        dtype (torch.dtype): The model's dtype. Defaults to torch.float64 so that gradients can be
            checked against finite differences.
    """

    d_input: int = 6
    d_hidden: int = 64
    d_feature: int = 32
    d_model: int = 32
    n_heads: int = 4
    d_mlp: int = 64
    n_layers: int = 3
    n_queries: int = 20
    n_classes: int = 4
    mask_threshold: float = 0.5
    eps: float = 1e-5
    use_attention_mask: bool = True
    iterative_prediction: bool = True
    cross_attention_first: bool = True
    use_superpoint_pooling: bool = True
    use_score_branch: bool = True
    project_mask_queries: bool = True
    seed: Union[int, None] = None
    dtype: torch.dtype = torch.float64

    def __post_init__(self):
        if isinstance(self.dtype, str):
            if self.dtype not in DTYPE_FROM_STRING:
                raise ValueError(
                    f"Unknown dtype {self.dtype}, expected one of {list(DTYPE_FROM_STRING)}"
                )
            self.dtype = DTYPE_FROM_STRING[self.dtype]
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not 0 < self.mask_threshold < 1:
            raise ValueError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        assert self.d_input == 6, "Points are read as xyz + rgb rows"
        assert self.n_layers >= 0, "n_layers must be non-negative"
        assert self.n_queries >= 1, "n_queries must be positive"
        assert self.n_classes >= 1, "n_classes must be positive"
        if self.dtype != torch.float64:
            logging.warning(
                "dtype %s is below float64; finite-difference gradient checks will not reach "
                "their tolerance.",
                self.dtype,
            )
        if self.seed is not None:
            self.set_seed_everywhere(self.seed)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_predictions(self) -> int:
        return self.n_layers + 1

    @classmethod
    def unwrap(
        cls, config: Union[Dict, "HookedSuperpointTransformerConfig"]
    ) -> HookedSuperpointTransformerConfig:
        """
        Convenience function to avoid duplicate code from a common way config is passed to various
        components
        """
        return cls.from_dict(config) if isinstance(config, Dict) else config

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> HookedSuperpointTransformerConfig:
        """
        Instantiates a `HookedSuperpointTransformerConfig` from a Python dictionary of
        parameters.
        """
        return cls(**config_dict)

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> HookedSuperpointTransformerConfig:
        """
        Instantiates a config from a named preset. "desk" is the default desk-scale model and
        "large" the 6-layer, 400-query decoder.
        """
        if name not in PRESETS:
            raise ValueError(f"Unknown preset {name}, expected one of {list(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> Dict[str, Any]:
        """Plain-value dictionary, with the dtype stored by name."""
        config_dict = dict(self.__dict__)
        config_dict["dtype"] = str(self.dtype).replace("torch.", "")
        return config_dict

    def __repr__(self):
        return "HookedSuperpointTransformerConfig:\n" + pprint.pformat(self.to_dict())

    def set_seed_everywhere(self, seed: int):
        torch.manual_seed(seed)
        random.seed(seed)
        np.random.seed(seed)
