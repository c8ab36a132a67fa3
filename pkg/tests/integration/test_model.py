import numpy as np
import pytest
import torch

from superpoint_lens import HookedSuperpointTransformer, HookedSuperpointTransformerConfig
from superpoint_lens.evals import attention_tables, evaluate_model, predict_scene
from superpoint_lens.scenes import (
    InstanceGroundTruth,
    Scene,
    SyntheticSceneConfig,
    generate_synthetic_scene,
)
from superpoint_lens.utils import get_act_name

cfg = HookedSuperpointTransformerConfig(
    d_hidden=16,
    d_feature=8,
    d_model=8,
    n_heads=2,
    d_mlp=16,
    n_layers=3,
    n_queries=6,
    n_classes=4,
    seed=0,
)
model = HookedSuperpointTransformer(cfg)
scene = generate_synthetic_scene(
    0, SyntheticSceneConfig(num_instances=3, points_per_instance=16, background_points=16)
)


class Counter:
    def __init__(self):
        self.count = 0

    def inc(self, *args, **kwargs):
        self.count += 1


def test_predictions_per_layer():
    predictions = model(scene)
    assert len(predictions) == cfg.n_layers + 1
    for prediction in predictions:
        assert prediction.class_probs.shape == (cfg.n_queries, cfg.n_classes + 1)
        assert prediction.scores.shape == (cfg.n_queries,)
        assert prediction.masks.shape == (cfg.n_queries, scene.n_superpoints)
        assert torch.allclose(prediction.class_probs.sum(-1), torch.ones(cfg.n_queries).double())


def test_same_seed_same_model():
    other = HookedSuperpointTransformer(cfg)
    for (name, param), other_param in zip(model.named_parameters(), other.parameters()):
        assert torch.equal(param, other_param), name


def test_cache_holds_named_activations():
    _, cache = model.run_with_cache(scene)
    assert cache["hook_point_features"].shape == (scene.n_points, cfg.d_feature)
    assert cache["hook_superpoint_tokens"].shape == (scene.n_superpoints, cfg.d_model)
    pattern = cache[get_act_name("pattern", 1)]
    assert pattern.shape == (cfg.n_heads, cfg.n_queries, scene.n_superpoints)
    assert get_act_name("resid_post", 2) in cache
    assert get_act_name("self_pattern", 0) in cache


def test_attention_mask_follows_previous_masks():
    predictions, cache = model.run_with_cache(scene)
    for layer in range(cfg.n_layers):
        attention_mask = cache[get_act_name("attn_mask", layer)]
        keep = predictions[layer].masks >= cfg.mask_threshold
        assert torch.equal(attention_mask == 0, keep)
        assert torch.isneginf(attention_mask[~keep]).all()


def test_attention_mask_threshold_is_inclusive():
    masks = torch.tensor([[0.5, 0.5 - 1e-12, 1.0, 0.0]], dtype=torch.float64)
    attention_mask = HookedSuperpointTransformer.build_attention_mask(masks, 0.5)
    assert attention_mask[0, 0] == 0
    assert torch.isneginf(attention_mask[0, 1:2]).all()
    assert attention_mask[0, 2] == 0


def test_masked_superpoints_get_no_attention():
    _, cache = model.run_with_cache(scene)
    for layer in range(cfg.n_layers):
        pattern = cache[get_act_name("pattern", layer)]
        attention_mask = cache[get_act_name("attn_mask", layer)]
        fully_masked = torch.isneginf(attention_mask).all(-1)
        blocked = torch.isneginf(attention_mask) & ~fully_masked[:, None]
        assert (pattern[:, blocked] == 0).all()
        assert torch.allclose(pattern.sum(-1), torch.ones_like(pattern.sum(-1)))


def test_without_attention_mask():
    unmasked = HookedSuperpointTransformer({**cfg.to_dict(), "use_attention_mask": False})
    _, cache = unmasked.run_with_cache(scene)
    assert (cache[get_act_name("attn_mask", 0)] == 0).all()


def test_without_superpoint_pooling():
    pointwise = HookedSuperpointTransformer({**cfg.to_dict(), "use_superpoint_pooling": False})
    assert pointwise(scene)[-1].masks.shape == (cfg.n_queries, scene.n_points)
    assert predict_scene(pointwise, scene)[0].point_mask.shape == (scene.n_points,)


def test_fixed_attention_masks():
    masks = model.attention_masks(scene)
    assert len(masks) == cfg.n_layers
    with torch.no_grad():
        for free, fixed in zip(model(scene), model(scene, masks)):
            assert torch.equal(free.masks, fixed.masks)
    with pytest.raises(ValueError):
        model(scene, masks[:1])


def test_hook_context_manager():
    counter = Counter()
    name = get_act_name("pattern", 0)
    with model.hooks(fwd_hooks=[(name, counter.inc)]):
        model(scene)
    model(scene)
    assert counter.count == 1


def test_hook_can_edit_activation():
    def zero_queries(queries, hook):
        return torch.zeros_like(queries)

    with torch.no_grad():
        predictions = model.run_with_hooks(scene, fwd_hooks=[("hook_queries", zero_queries)])
    class_probs = predictions[0].class_probs
    assert torch.allclose(class_probs, class_probs[:1].expand_as(class_probs))


def test_attention_maps_and_tables():
    maps = model.attention_maps(scene)
    assert len(maps) == cfg.n_layers
    tables = attention_tables(model, scene)
    assert tables[0].shape == (cfg.n_queries, scene.n_superpoints + scene.n_points)
    assert np.allclose(tables[0].filter(like="sp_").sum(axis=1), 1.0)


def test_evaluate_model_needs_ground_truth():
    without_gt = Scene(scene.cloud, scene.superpoints)
    with pytest.raises(ValueError, match="Scene 1"):
        evaluate_model(model, [scene, without_gt])


def test_evaluate_model_rejects_unknown_classes():
    gt = scene.ground_truth
    classes = np.full_like(gt.instance_classes, cfg.n_classes)
    relabeled = Scene(scene.cloud, scene.superpoints, InstanceGroundTruth(gt.instance_ids, classes))
    with pytest.raises(ValueError, match="Scene 0: Instance classes"):
        evaluate_model(model, [relabeled])
