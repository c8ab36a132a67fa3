import numpy as np
import pytest

from superpoint_lens import HookedSuperpointTransformerConfig
from superpoint_lens.evals import evaluate_model
from superpoint_lens.scenes import SceneSetConfig, generate_scene_set
from superpoint_lens.train import TrainConfig, train

# Eight scenes of two to four instances from four classes.
overfit_scenes = generate_scene_set(SceneSetConfig(num_scenes=8, seed=0))
overfit_model = HookedSuperpointTransformerConfig.from_preset("desk")


def final_pass_loss(result, n_scenes):
    """Mean total loss over the last visit to every scene."""
    return float(np.mean([row["total"] for row in result.history[-n_scenes:]]))


@pytest.fixture(scope="module")
def overfit():
    return train(TrainConfig(model=overfit_model, num_steps=500, seed=0), overfit_scenes)


def test_overfits_training_scenes(overfit):
    metrics = evaluate_model(overfit.model, overfit_scenes)
    assert metrics.map >= 0.9, metrics.to_frame()
    assert metrics.ap50 >= 0.95, metrics.to_frame()


def test_every_parameter_is_trained(overfit):
    names = {name for name, _ in overfit.model.named_parameters()}
    assert overfit.trained_parameters == names


def test_attention_mask_helps(overfit):
    unmasked = TrainConfig(
        model={**overfit_model.to_dict(), "use_attention_mask": False}, num_steps=500, seed=0
    )
    unmasked_result = train(unmasked, overfit_scenes)
    n_scenes = len(overfit_scenes)
    assert final_pass_loss(overfit, n_scenes) <= final_pass_loss(unmasked_result, n_scenes)


def test_toy_run_lowers_loss():
    scenes = generate_scene_set(SceneSetConfig(num_scenes=4, min_instances=2, max_instances=2))
    config = TrainConfig(model=overfit_model, num_steps=300, lr=1e-3, seed=0, print_every=100)
    result = train(config, scenes)
    assert result.history[-1]["total"] < result.history[0]["total"]


@pytest.mark.parametrize(
    "overrides",
    [
        {"use_attention_mask": False},
        {"iterative_prediction": False},
        {"cross_attention_first": False},
        {"use_superpoint_pooling": False},
        {"use_score_branch": False},
        {"project_mask_queries": False},
        {"n_layers": 1, "n_queries": 10},
        {"n_layers": 6, "n_queries": 20},
        {"n_layers": 3, "n_queries": 40},
    ],
)
def test_ablations_train(overrides):
    config = TrainConfig(
        model={**overfit_model.to_dict(), **overrides}, num_steps=100, seed=0, print_every=None
    )
    result = train(config, overfit_scenes)
    assert len(result.history) == 100
    assert all(np.isfinite(row["total"]) for row in result.history)


@pytest.mark.parametrize("mask_losses", [("bce",), ("dice",), ("bce", "dice", "focal")])
def test_mask_loss_choices_train(mask_losses):
    config = TrainConfig(
        model=overfit_model,
        loss={"mask_losses": mask_losses},
        num_steps=100,
        seed=0,
        print_every=None,
    )
    result = train(config, overfit_scenes)
    assert all(np.isfinite(row["total"]) for row in result.history)
