import torch

from superpoint_lens.components import DecoderBlock
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


def make_block(**kwargs) -> DecoderBlock:
    block = DecoderBlock(HookedSuperpointTransformerConfig(**kwargs), 0)
    torch.manual_seed(0)
    block.init_weights()
    return block


def inputs(n_queries=6, n_superpoints=9, seed=0):
    generator = torch.Generator().manual_seed(seed)
    queries = torch.randn(n_queries, 32, generator=generator, dtype=torch.float64)
    tokens = torch.randn(n_superpoints, 32, generator=generator, dtype=torch.float64)
    keep = torch.rand(n_queries, n_superpoints, generator=generator) < 0.5
    mask = torch.zeros(n_queries, n_superpoints, dtype=torch.float64).masked_fill(
        ~keep, float("-inf")
    )
    return queries, tokens, mask


def test_output_shape_for_any_number_of_superpoints():
    block = make_block()
    for n_superpoints in [1, 4, 17]:
        assert block(*inputs(n_superpoints=n_superpoints)).shape == (6, 32)


def test_superpoint_permutation_leaves_queries_unchanged():
    block = make_block()
    queries, tokens, mask = inputs()
    order = torch.randperm(tokens.shape[0])
    out = block(queries, tokens, mask)
    permuted = block(queries, tokens[order], mask[:, order])
    assert torch.allclose(out, permuted, atol=1e-12)


def test_deterministic():
    block = make_block()
    assert torch.equal(block(*inputs()), block(*inputs()))


def test_sublayer_order_matters():
    cross_first = make_block()
    self_first = make_block(cross_attention_first=False)
    self_first.load_state_dict(cross_first.state_dict())
    assert not torch.allclose(cross_first(*inputs()), self_first(*inputs()))


def test_cross_attention_sees_the_mask_hook():
    block = make_block()
    queries, tokens, mask = inputs()
    seen = {}

    def save(activation, hook):
        seen[hook] = activation

    block.hook_attn_mask.add_hook(save)
    block(queries, tokens, mask)
    assert torch.equal(seen[block.hook_attn_mask], mask)


def test_post_norm_output():
    block = make_block()
    out = block(*inputs())
    # The final sublayer is a layer norm with unit gain and zero bias.
    assert torch.allclose(out.mean(-1), torch.zeros(6, dtype=torch.float64), atol=1e-10)
