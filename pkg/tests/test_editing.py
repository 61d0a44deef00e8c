import numpy as np
import pytest
import torch

from inv3d.editing import (AttributeDirection, apply_edit,
                           build_attribute_set, brightness_score,
                           fit_direction, hue_score, silhouette_area_score)
from inv3d.generator import LatentCode, RenderConfig


def _blobs(n=200, dim=32, sep=8.0, seed=0):
    """Two Gaussian blobs 4 sigma apart along a random direction (sigma=1,
    distance sep/2 from origin each): linearly separable by construction."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=dim)
    axis /= np.linalg.norm(axis)
    x = rng.normal(size=(n, dim))
    y = np.where(rng.random(n) < 0.5, 1, -1)
    x += np.outer(y * sep / 2, axis)
    return x, y, axis


def test_fit_direction_separable_perfect_accuracy():
    x, y, _ = _blobs()
    d = fit_direction(x, y, seed=0)
    assert d.test_accuracy == 1.0
    assert abs(np.linalg.norm(d.direction) - 1.0) <= 1e-9


def test_fit_direction_label_flip_flips_direction():
    x, y, _ = _blobs(seed=1)
    d1 = fit_direction(x, y, seed=0)
    d2 = fit_direction(x, -y, seed=0)
    cos = float(d1.direction @ d2.direction)
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))) > 179.0


def test_fit_direction_single_class_rejected():
    x, y, _ = _blobs()
    with pytest.raises(ValueError):
        fit_direction(x, np.ones_like(y))


def test_fit_direction_deterministic():
    x, y, _ = _blobs(seed=2)
    d1 = fit_direction(x, y, seed=5)
    d2 = fit_direction(x, y, seed=5)
    assert np.array_equal(d1.direction, d2.direction)
    assert d1.test_accuracy == d2.test_accuracy


def test_fit_direction_split_disjoint_and_sized():
    """70/30 split: train and test indices are disjoint by construction;
    verify via the held-out accuracy being computed on 30% of the data."""
    x, y, _ = _blobs(n=100)
    d = fit_direction(x, y, train_fraction=0.7, seed=0)
    # with 30 test points, accuracy is a multiple of 1/30
    assert abs(d.test_accuracy * 30 - round(d.test_accuracy * 30)) < 1e-9


def test_build_attribute_set_ordering(fresh_generator):
    render = RenderConfig(image_size=16, samples_per_ray=8)
    lats, labels, scores = build_attribute_set(
        fresh_generator, brightness_score, n_samples=12, k_extreme=3,
        seed=0, render=render)
    assert lats.shape == (6, fresh_generator.config.num_layers
                          * fresh_generator.config.latent_dim)
    lo = scores[labels == -1]
    hi = scores[labels == 1]
    assert lo.max() <= hi.min()


def test_build_attribute_set_all_labeled_when_n_equals_2k(fresh_generator):
    render = RenderConfig(image_size=16, samples_per_ray=8)
    lats, labels, _ = build_attribute_set(
        fresh_generator, brightness_score, n_samples=6, k_extreme=3,
        seed=0, render=render)
    assert len(lats) == 6
    assert (labels == 1).sum() == 3 and (labels == -1).sum() == 3


def test_build_attribute_set_deterministic(fresh_generator):
    render = RenderConfig(image_size=16, samples_per_ray=8)
    a = build_attribute_set(fresh_generator, brightness_score, 8, 2,
                            seed=3, render=render)
    b = build_attribute_set(fresh_generator, brightness_score, 8, 2,
                            seed=3, render=render)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_build_attribute_set_precondition(fresh_generator):
    with pytest.raises(ValueError):
        build_attribute_set(fresh_generator, brightness_score, 5, 3, seed=0)


def test_build_attribute_set_nonfinite_scorer(fresh_generator):
    render = RenderConfig(image_size=16, samples_per_ray=8)
    with pytest.raises(ValueError):
        build_attribute_set(fresh_generator, lambda img: float("nan"), 4, 2,
                            seed=0, render=render)


def test_apply_edit_identity_and_additivity():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=4 * 64)
    vec /= np.linalg.norm(vec)
    d = AttributeDirection(direction=vec, bias=0.1, attribute_name="t",
                           test_accuracy=1.0)
    w = LatentCode(torch.rand(4, 64, dtype=torch.float64), "Wplus")
    same = apply_edit(w, d, 0.0)
    assert torch.equal(same.styles, w.styles)
    fwd = apply_edit(w, d, 1.7)
    back = apply_edit(fwd, d, -1.7)
    assert float((back.styles - w.styles).abs().max()) < 1e-12


def test_apply_edit_score_linear_in_strength():
    rng = np.random.default_rng(1)
    vec = rng.normal(size=4 * 64)
    vec /= np.linalg.norm(vec)
    d = AttributeDirection(direction=vec, bias=-0.3, attribute_name="t",
                           test_accuracy=1.0)
    w = LatentCode(torch.rand(4, 64, dtype=torch.float64), "Wplus")
    s0 = d.score(w)
    for s in (-2.0, 0.5, 3.0):
        assert abs(d.score(apply_edit(w, d, s)) - (s0 + s)) < 1e-9


def test_apply_edit_argmax_label_flips_past_margin():
    """For strength > margin, the classifier labels the edit +1."""
    rng = np.random.default_rng(2)
    vec = rng.normal(size=4 * 64)
    vec /= np.linalg.norm(vec)
    d = AttributeDirection(direction=vec, bias=0.0, attribute_name="t",
                           test_accuracy=1.0)
    w = LatentCode(torch.rand(4, 64, dtype=torch.float64), "Wplus")
    margin = -d.score(w)
    edited = apply_edit(w, d, margin + 1e-6)
    assert d.score(edited) > 0


def test_apply_edit_layer_range():
    vec = np.zeros(4 * 64)
    vec[:64] = 1.0
    vec /= np.linalg.norm(vec)
    d = AttributeDirection(direction=vec, bias=0.0, attribute_name="t",
                           test_accuracy=1.0)
    w = LatentCode(torch.zeros(4, 64, dtype=torch.float64), "Wplus")
    out = apply_edit(w, d, 1.0, layer_range=(1, 3))
    assert torch.equal(out.styles, w.styles)  # direction lives in row 0 only
    out2 = apply_edit(w, d, 1.0, layer_range=(0, 1))
    assert float(out2.styles[0].abs().sum()) > 0


def test_apply_edit_dimension_mismatch():
    vec = np.ones(10) / np.sqrt(10)
    d = AttributeDirection(direction=vec, bias=0.0, attribute_name="t",
                           test_accuracy=1.0)
    w = LatentCode(torch.zeros(4, 64), "Wplus")
    with pytest.raises(ValueError):
        apply_edit(w, d, 1.0)


def test_direction_json_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    vec = rng.normal(size=16)
    vec /= np.linalg.norm(vec)
    d = AttributeDirection(direction=vec, bias=0.25,
                           attribute_name="brightness", test_accuracy=0.95)
    d.save(tmp_path / "d.json")
    back = AttributeDirection.load(tmp_path / "d.json")
    assert np.array_equal(back.direction, d.direction)
    assert back.bias == d.bias and back.attribute_name == d.attribute_name


def test_toy_scorers_behave():
    bright = np.full((8, 8, 3), 0.8)
    dark = np.full((8, 8, 3), 0.2)
    assert brightness_score(bright) > brightness_score(dark)
    red = np.zeros((8, 8, 3)); red[..., 0] = 1
    blue = np.zeros((8, 8, 3)); blue[..., 2] = 1
    assert hue_score(red) > 0 > hue_score(blue)
    obj = np.ones((8, 8, 3))
    obj[2:6, 2:6] = 0.0
    assert silhouette_area_score(obj) == pytest.approx(16 / 64)
