import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from guideline_distill.errors import ShapeError
from guideline_distill.scoring import (
    BACKBONES,
    FocalLossParams,
    build_scoring_model,
    focal_loss,
    score_forward,
    stack_samples,
)


def reference_focal(logits, labels, weights, gamma):
    total = 0.0
    for row, y in zip(logits, labels):
        p = np.exp(row - row.max())
        p /= p.sum()
        total += -weights[y - 1] * (1 - p[y - 1]) ** gamma * np.log(p[y - 1])
    return total / len(labels)


def test_focal_loss_hand_values():
    # uniform logits: p = 1/5 for every class
    logits = torch.zeros(2, 5)
    expected = 2.0 * 0.8**2 * np.log(5)
    assert focal_loss(logits, [1, 2]).item() == pytest.approx(expected, rel=1e-6)
    assert focal_loss(logits, [3, 4]).item() == pytest.approx(expected / 2, rel=1e-6)
    # gamma 0 with unit weights is cross-entropy
    params = FocalLossParams((1, 1, 1, 1, 1), 0.0)
    x = torch.randn(6, 5)
    y = torch.tensor([1, 2, 3, 4, 5, 1])
    torch.testing.assert_close(focal_loss(x, y, params), torch.nn.functional.cross_entropy(x, y - 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 4.0))
def test_focal_loss_matches_reference(seed, gamma):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(7, 5))
    labels = rng.integers(1, 6, size=7)
    params = FocalLossParams((2, 2, 1, 1, 1), gamma)
    got = focal_loss(torch.from_numpy(logits), labels, params).item()
    assert got == pytest.approx(reference_focal(logits, labels, params.class_weights, gamma), rel=1e-9, abs=1e-12)


def test_focal_loss_confident_and_single():
    logits = torch.tensor([[50.0, 0, 0, 0, 0]])
    assert focal_loss(logits, [1]).item() == pytest.approx(0.0, abs=1e-12)
    assert focal_loss(torch.zeros(5), 3).ndim == 0
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(1, 5), [0])
    with pytest.raises(ValueError):
        FocalLossParams((1, 1, 1, 1), 2.0)
    with pytest.raises(ValueError):
        FocalLossParams(gamma=-1.0)


def test_focal_loss_gradient_finite_differences():
    torch.manual_seed(0)
    logits = torch.randn(8, 5, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([1, 2, 3, 4, 5, 2, 1, 3])
    assert torch.autograd.gradcheck(lambda z: focal_loss(z, labels), (logits,), eps=1e-6, atol=1e-8, rtol=1e-3)


@pytest.mark.parametrize("name", sorted(BACKBONES))
def test_backbone_shapes_and_determinism(name, tiny_train):
    m = build_scoring_model(name, seed=1)
    f, logits = score_forward(m, tiny_train[:3])
    assert f.shape == (3, 64) and logits.shape == (3, 5)
    f1, _ = score_forward(m, tiny_train[0])
    torch.testing.assert_close(f1, f[0], rtol=1e-5, atol=1e-6)
    m2 = build_scoring_model(name, seed=1)
    assert torch.equal(score_forward(m2, tiny_train[:3])[1], logits)
    preds = m.predict(stack_samples(tiny_train[:3]))
    assert preds.min() >= 1 and preds.max() <= 5
    assert m.training  # predict restores the mode
    with pytest.raises(ShapeError):
        m(torch.zeros(1, 2, 4, 32, 32))


def test_unknown_backbone():
    with pytest.raises(ValueError):
        build_scoring_model("alexnet3d")
