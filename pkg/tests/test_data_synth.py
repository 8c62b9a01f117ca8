import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guideline_distill.data_synth import (
    CAPTION_WORDS,
    CRITERIA,
    FULL_SHAPE,
    KIND_ORDER,
    TOY_SHAPE,
    LesionAttributes,
    SequenceKind,
    assigned_score,
    check_shape,
    criterion_phrase,
    generate_dataset,
    generate_sample,
    load_dataset,
    max_diameter,
    read_manifest,
    render_caption,
    render_volume,
    resize_volume,
    sample_attributes,
    sample_rng,
    score_from_attributes,
    stage1_group,
)
from guideline_distill.errors import ConfigError, LoadError


def attrs(d, c=0.5, irr=0.0, center=(2, 16, 16)):
    return LesionAttributes(d, c, irr, center)


@pytest.mark.parametrize(
    "d, c, score",
    [(0, 0, 1), (12, 0.9, 4), (20, 0.9, 5), (4.9, 0.9, 2), (5, 0.1, 3), (9.99, 1, 3),
     (10, 0.9, 4), (15, 0.29, 4), (15, 0.3, 5), (2, 0.15, 2)],
)
def test_rule_table(d, c, score):
    assert score_from_attributes(attrs(d, c)) == score


def test_stage1_grouping():
    assert [stage1_group(k) for k in KIND_ORDER] == ["T2W", "ADC&DWI", "ADC&DWI"]


def test_caption_contains_criteria():
    assert CRITERIA["none"] in render_caption(1, attrs(0, 0))
    cap = render_caption(5, attrs(20, 0.9))
    assert CRITERIA["xlarge"] in cap and CRITERIA["clear"] in cap
    assert "diameter 20.0" in cap and "contrast 0.90" in cap
    assert render_caption(5, attrs(20, 0.9)) == cap
    faint = render_caption(4, attrs(18, 0.2))
    assert CRITERIA["xlarge"] in faint and CRITERIA["faint"] in faint


@pytest.mark.parametrize("score", [0, 6, -1])
def test_caption_rejects_bad_score(score):
    with pytest.raises(ValueError):
        render_caption(score, attrs(3))


@settings(max_examples=60, deadline=None)
@given(score=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_sampled_attributes_respect_rules(score, seed):
    a = sample_attributes(score, np.random.default_rng(seed), TOY_SHAPE)
    assert score_from_attributes(a) == score
    a.validate(TOY_SHAPE)
    assert (a.diameter_voxels == 0) == (score == 1)
    words = set(render_caption(score, a).replace(".", " ").replace(",", " ").split())
    assert all(w in CAPTION_WORDS or w.replace(".", "").isdigit() for w in words)
    assert criterion_phrase(score, a) in render_caption(score, a)


def test_shape_limits():
    assert max_diameter(TOY_SHAPE) == 24.0
    assert max_diameter(FULL_SHAPE) == 24.0
    check_shape((2, 32, 32))
    with pytest.raises(ConfigError):
        check_shape((4, 16, 16))
    with pytest.raises(ConfigError):
        generate_dataset("/nonexistent-never-written", n_train=1, n_val=0, n_test=0, volume_shape=(4, 8, 8))


def test_volume_invariants():
    s = generate_sample(7, "train", 3, [0.2] * 5)
    for k in KIND_ORDER:
        v = s.volumes[k].data
        assert v.dtype == np.float32 and v.shape == TOY_SHAPE
        assert np.all(np.isfinite(v)) and v.min() >= 0 and v.max() <= 1
    assert s.stacked().shape == (3, *TOY_SHAPE)
    assert s.caption == render_caption(s.score, s.attrs)


def test_regeneration_is_exact():
    a = generate_sample(11, "val", 5, [0.2] * 5)
    b = generate_sample(11, "val", 5, [0.2] * 5)
    assert np.array_equal(a.stacked(), b.stacked()) and a.caption == b.caption
    assert sample_rng(1, "x").random() != sample_rng(2, "x").random()


def test_class_frequencies_follow_distribution():
    dist = [0.1, 0.15, 0.3, 0.25, 0.2]
    scores = np.array([assigned_score(5, "train", i, dist) for i in range(1000)])
    freq = np.bincount(scores, minlength=6)[1:] / len(scores)
    assert np.max(np.abs(freq - dist)) <= 0.03


def test_sequence_kinds_linearly_separable():
    # mean and variance alone separate T2W from the diffusion pair
    rng = np.random.default_rng(0)
    feats, labels = [], []
    for i in range(1000):
        kind = KIND_ORDER[i % 3]
        score = int(rng.integers(1, 6))
        v = render_volume(kind, sample_attributes(score, rng, TOY_SHAPE), TOY_SHAPE, rng)
        feats.append([v.mean(), v.var()])
        labels.append(kind is SequenceKind.T2W)
    x, y = np.array(feats), np.array(labels)
    # least-squares linear discriminant on [mean, var, 1]
    a = np.c_[x, np.ones(len(x))]
    w, *_ = np.linalg.lstsq(a, np.where(y, 1.0, -1.0), rcond=None)
    assert np.mean((a @ w > 0) == y) >= 0.99


def test_dataset_round_trip(tmp_path):
    m1 = generate_dataset(tmp_path / "a", seed=7, n_train=16, n_val=4, n_test=4)
    generate_dataset(tmp_path / "b", seed=7, n_train=16, n_val=4, n_test=4)
    assert (m1.n_train, m1.n_val, m1.n_test) == (16, 4, 4)
    for f in sorted((tmp_path / "a" / "train").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()
    train = load_dataset(tmp_path / "a", "train")
    assert [s.id for s in train] == read_manifest(tmp_path / "a").ids["train"]
    again = load_dataset(tmp_path / "a", "train")
    assert all(np.array_equal(x.stacked(), y.stacked()) for x, y in zip(train, again))
    assert all(score_from_attributes(s.attrs) == s.score for s in train)
    regen = generate_sample(7, "train", 2, m1.class_distribution)
    assert np.array_equal(regen.stacked(), train[2].stacked())


def test_default_split_manifest(tmp_path):
    m = generate_dataset(tmp_path, seed=7, n_train=683, n_val=79, n_test=0, volume_shape=(1, 32, 32))
    assert (m.n_train, m.n_val) == (683, 79)


def test_empty_dataset(tmp_path):
    m = generate_dataset(tmp_path, seed=7, n_train=0, n_val=0, n_test=0)
    assert read_manifest(tmp_path) == m
    assert load_dataset(tmp_path, "train") == []


def test_bad_distribution(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(tmp_path, n_train=1, n_val=0, n_test=0, class_distribution=[0.5, 0.5, 0.1, 0, 0])
    with pytest.raises(ConfigError):
        generate_dataset(tmp_path, n_train=-1)


def test_tampered_file_names_sample(tmp_path):
    generate_dataset(tmp_path, seed=1, n_train=4, n_val=0, n_test=0)
    victim = tmp_path / "train" / "train-00002_ADC.vol"
    raw = bytearray(victim.read_bytes())
    raw[10] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(LoadError) as info:
        load_dataset(tmp_path, "train")
    assert info.value.item_id == "train-00002"


def test_manifest_count_mismatch(tmp_path):
    generate_dataset(tmp_path, seed=1, n_train=3, n_val=0, n_test=0)
    (tmp_path / "train" / "train-00001_DWI.vol").unlink()
    with pytest.raises(LoadError):
        read_manifest(tmp_path)


def test_resize_to_canonical(tmp_path):
    generate_dataset(tmp_path, seed=1, n_train=2, n_val=0, n_test=0, volume_shape=(2, 32, 32))
    s = load_dataset(tmp_path, "train", canonical_shape=TOY_SHAPE)[0]
    assert s.stacked().shape == (3, *TOY_SHAPE)
    flat = np.full((2, 4, 4), 0.3, dtype=np.float32)
    assert np.allclose(resize_volume(flat, (4, 8, 8)), 0.3)


def test_label_noise_flips_by_one(tmp_path):
    samples = [generate_sample(2, "train", i, [0.2] * 5, TOY_SHAPE, label_noise=1.0) for i in range(30)]
    for s in samples:
        assert abs(s.score - s.clean_score) == 1
        assert s.caption == render_caption(s.clean_score, s.attrs)
    clean = [generate_sample(2, "train", i, [0.2] * 5, TOY_SHAPE, label_noise=1.0).stacked() for i in range(3)]
    assert all(np.array_equal(a, s.stacked()) for a, s in zip(clean, samples))


def test_meta_header_is_structured(tmp_path):
    generate_dataset(tmp_path, seed=1, n_train=1, n_val=0, n_test=0)
    meta = json.loads((tmp_path / "train" / "train-00000_T2W.meta").read_text())
    assert {"shape", "kind", "attrs", "score", "caption", "sha256"} <= set(meta)
