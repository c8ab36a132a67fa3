"""Hooked Superpoint Transformer Components.

This module contains all the components (e.g. :class:`Attention`, :class:`MLP`, :class:`LayerNorm`)
used by :class:`superpoint_lens.HookedSuperpointTransformer`.
"""

# Independent classes
from .layer_norm import LayerNorm
from .mlp import MLP
from .backbone import PointBackbone, superpoint_pool

# Only dependent on independent modules
from .attention import Attention
from .prediction_head import LayerPrediction, PredictionHead

# Interdependent modules
from .decoder_block import DecoderBlock
