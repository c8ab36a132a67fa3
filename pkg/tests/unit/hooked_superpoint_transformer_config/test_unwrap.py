"""
Tests that config passed around superpoint_lens can be unwrapped into an actual configuration object
"""

from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


def test_hooked_superpoint_transformer_config_object():
    config = HookedSuperpointTransformerConfig(n_layers=2, n_queries=8, d_model=16, n_heads=2)
    result = HookedSuperpointTransformerConfig.unwrap(config)
    # Assert that the same object was returned
    assert result is config


def test_hooked_superpoint_transformer_config_dict():
    config_dict = {
        "n_layers": 2,
        "n_queries": 8,
        "d_model": 16,
        "n_heads": 2,
        "use_attention_mask": False,
    }
    result = HookedSuperpointTransformerConfig.unwrap(config_dict)
    # Assert that the new returned value has been transformed into a config object
    assert isinstance(result, HookedSuperpointTransformerConfig)
    assert not result.use_attention_mask
