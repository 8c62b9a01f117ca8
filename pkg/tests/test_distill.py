import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from guideline_distill.distill import (
    AlignmentHead,
    FeatureCache,
    LossConfig,
    build_feature_cache,
    combined_objective,
    kl_feature_loss,
    normalize_teacher,
)
from guideline_distill.errors import ConsistencyError, LoadError, ShapeError, StateError
from guideline_distill.guideline_network import STAGE2, build_guideline_network


def identity_head(dim):
    head = AlignmentHead(dim, dim)
    with torch.no_grad():
        head.fc.weight.copy_(torch.eye(dim))
        head.fc.bias.zero_()
    return head


def test_kl_zero_at_equality():
    t = torch.randn(5, 8)
    assert kl_feature_loss(t, t.clone(), identity_head(8)).item() == pytest.approx(0.0, abs=1e-7)


def test_kl_hand_value():
    # two-way: p = softmax([0, 0]) = (.5, .5), q = softmax([ln 3, 0]) = (.75, .25)
    t = torch.zeros(1, 2)
    s = torch.tensor([[float(np.log(3.0)), 0.0]])
    expected = 0.5 * np.log(0.5 / 0.75) + 0.5 * np.log(0.5 / 0.25)
    assert kl_feature_loss(t, s, identity_head(2)).item() == pytest.approx(expected, rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0), st.floats(-50, 50))
def test_kl_nonnegative_and_shift_invariant(seed, temperature, shift):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(4, 6, generator=g, dtype=torch.float64) * 3
    s = torch.randn(4, 6, generator=g, dtype=torch.float64) * 3
    head = identity_head(6).double()
    base = kl_feature_loss(t, s, head, temperature).item()
    assert base >= 0
    assert kl_feature_loss(t + shift, s, head, temperature).item() == pytest.approx(base, abs=1e-6)
    assert kl_feature_loss(t, s + shift, head, temperature).item() == pytest.approx(base, abs=1e-6)


def test_kl_gradient_and_detached_teacher():
    torch.manual_seed(0)
    head = AlignmentHead(4, 6).double()
    t = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    s = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: kl_feature_loss(t, x, head, 0.7), (s,), eps=1e-6, atol=1e-8, rtol=1e-3)
    kl_feature_loss(t, s, head).backward()
    assert t.grad is None and s.grad is not None and head.fc.weight.grad is not None


def test_kl_shape_errors_and_single_vector():
    head = AlignmentHead(4, 6)
    with pytest.raises(ShapeError):
        kl_feature_loss(torch.zeros(2, 5), torch.zeros(2, 4), head)
    with pytest.raises(ShapeError):
        kl_feature_loss(torch.zeros(3, 6), torch.zeros(2, 4), head)
    assert kl_feature_loss(torch.zeros(6), torch.zeros(4), head).ndim == 0


def test_combined_objective_and_config():
    assert combined_objective(torch.tensor(1.0), torch.tensor(2.0), LossConfig(alpha=0.4)).item() == pytest.approx(1.8)
    assert combined_objective(1.0, 5.0, LossConfig(alpha=0.0)) == 1.0
    for bad in (dict(alpha=-0.1), dict(temperature=0.0), dict(teacher_norm="l2")):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_normalize_teacher():
    v = torch.tensor([[1.0, 10.0], [3.0, 10.0], [5.0, 10.0]])
    out = normalize_teacher(v)
    torch.testing.assert_close(out.mean(0), torch.zeros(2), rtol=0, atol=1e-6)
    assert out[:, 0].std(unbiased=False).item() == pytest.approx(1.0, rel=1e-5)
    assert torch.equal(out[:, 1], torch.zeros(3))  # constant dimension stays finite
    assert normalize_teacher(v, "none") is v
    with pytest.raises(ValueError):
        normalize_teacher(v, "minmax")


def test_cache_round_trip(tmp_path):
    cache = FeatureCache(["a", "b", "c"], np.arange(6, dtype=np.float32).reshape(3, 2), "abc")
    cache.save(tmp_path / "c")
    back = FeatureCache.load(tmp_path / "c")
    assert back.ids == cache.ids and np.array_equal(back.vectors, cache.vectors)
    assert back.checksum == cache.checksum and back.source_digest == "abc"
    assert back.lookup(["c", "a"]).tolist() == [[4.0, 5.0], [0.0, 1.0]]
    assert "b" in back and "z" not in back and len(back) == 3
    with pytest.raises(KeyError):
        back.lookup(["z"])


def test_cache_corruption(tmp_path):
    FeatureCache(["a", "b"], np.ones((2, 3)), "").save(tmp_path)
    blob = bytearray((tmp_path / "cache.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "cache.bin").write_bytes(bytes(blob))
    with pytest.raises(ConsistencyError):
        FeatureCache.load(tmp_path)
    (tmp_path / "cache.bin").write_bytes(bytes(blob[:-4]))
    with pytest.raises(LoadError):
        FeatureCache.load(tmp_path)
    with pytest.raises(LoadError):
        FeatureCache.load(tmp_path / "missing")
    with pytest.raises(ConsistencyError):
        FeatureCache(["a", "a"], np.ones((2, 1)))
    with pytest.raises(ConsistencyError):
        FeatureCache(["a"], np.array([[np.nan]]))


def test_build_feature_cache(small_cfg, tiny_train, tokenizer, registry):
    with pytest.raises(StateError):
        build_feature_cache(None, tiny_train, tokenizer, registry)
    m = build_guideline_network(small_cfg, seed=0)
    with pytest.raises(StateError):
        build_feature_cache(m, tiny_train[:2], tokenizer, registry)
    m.stage = STAGE2
    a = build_feature_cache(m, tiny_train[:5], tokenizer, registry, "d", batch_size=2)
    b = build_feature_cache(m, tiny_train[:5], tokenizer, registry, "d", batch_size=5)
    assert a.ids == [s.id for s in tiny_train[:5]] and a.feature_dim == 32
    np.testing.assert_allclose(a.vectors, b.vectors, rtol=1e-5, atol=1e-6)
    assert len(build_feature_cache(m, [], tokenizer, registry)) == 0
