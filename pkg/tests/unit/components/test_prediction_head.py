import math

import pytest
import torch

from superpoint_lens.components import PredictionHead
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig


def make_head(**kwargs) -> PredictionHead:
    head = PredictionHead(HookedSuperpointTransformerConfig(**kwargs))
    torch.manual_seed(0)
    head.init_weights()
    return head


def rows(n: int, d: int = 32) -> torch.Tensor:
    return torch.randn(n, d, dtype=torch.float64)


def test_output_ranges():
    prediction = make_head(n_classes=3)(rows(5), rows(7))
    assert prediction.class_probs.shape == (5, 4)
    assert torch.allclose(prediction.class_probs.sum(-1), torch.ones(5, dtype=torch.float64))
    assert prediction.scores.shape == (5,)
    assert ((prediction.scores >= 0) & (prediction.scores <= 1)).all()
    assert prediction.masks.shape == (5, 7)
    assert ((prediction.masks >= 0) & (prediction.masks <= 1)).all()


def test_zero_class_mlp_is_uniform():
    head = make_head(n_classes=3)
    with torch.no_grad():
        for param in head.class_mlp.parameters():
            param.zero_()
    prediction = head(rows(2), rows(3))
    assert torch.equal(prediction.class_probs, torch.full((2, 4), 0.25, dtype=torch.float64))


def test_zero_mask_projection_gives_half():
    head = make_head()
    with torch.no_grad():
        head.W_mask.zero_()
        head.b_mask.zero_()
    prediction = head(rows(2), rows(3))
    assert torch.equal(prediction.masks, torch.full((2, 3), 0.5, dtype=torch.float64))


def test_one_by_one_mask_by_hand():
    head = make_head(d_model=1, n_heads=1, project_mask_queries=False)
    queries = torch.tensor([[math.log(3)]], dtype=torch.float64)
    prediction = head(queries, torch.ones(1, 1, dtype=torch.float64))
    assert prediction.masks.item() == pytest.approx(0.75, abs=1e-12)


def test_without_score_branch_scores_are_one():
    head = make_head(use_score_branch=False)
    assert not hasattr(head, "score_mlp")
    prediction = head(rows(3), rows(2))
    assert torch.equal(prediction.scores, torch.ones(3, dtype=torch.float64))


def test_detach():
    head = make_head()
    prediction = head(rows(2), rows(3)).detach()
    assert not prediction.masks.requires_grad
    assert prediction.n_queries == 2
