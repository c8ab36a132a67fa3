import torch

from superpoint_lens.components import LayerNorm
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


def test_starts_as_plain_normalization():
    ln = LayerNorm(HookedSuperpointTransformerConfig(), length=2)
    out = ln(torch.tensor([[1.0, 3.0]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[-1.0, 1.0]], dtype=torch.float64), atol=1e-5)


def test_default_length_is_d_model():
    ln = LayerNorm({"d_model": 16, "n_heads": 2})
    assert ln.w.shape == (16,)
    assert ln.eps == 1e-5
