import numpy as np
import pytest

from xferlab.model import (CompatibilityError, ConfigurationError, DimensionError, HeadMatrix,
                           ModelConfig, config_layout, flatten, forward, init_parameters,
                           make_head, patchify, predict_class, unflatten)


def test_config_rejects_bad_geometry():
    with pytest.raises(ConfigurationError):
        ModelConfig(image_size=10, patch_size=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(num_layers=0)


def test_default_geometry():
    cfg = ModelConfig()
    assert cfg.num_patches == 16 and cfg.embed_dim == 64 and cfg.num_layers == 4


def test_head_columns_unit_norm_and_deterministic():
    h1 = make_head(["cat", "dog", "owl"], 64)
    h2 = make_head(["owl", "cat"], 64)
    np.testing.assert_allclose(np.linalg.norm(h1.W, axis=0), 1.0, atol=1e-12)
    # same name, same column, whatever the label set
    np.testing.assert_array_equal(h1.W[:, 0], h2.W[:, 1])
    np.testing.assert_array_equal(h1.W[:, 2], h2.W[:, 0])


def test_distinct_names_nearly_orthogonal():
    names = [f"class-{i}" for i in range(40)]
    W = make_head(names, 64).W
    G = W.T @ W
    off = np.abs(G[~np.eye(len(names), dtype=bool)])
    assert off.max() < 0.9


def test_head_rejects_duplicates_and_empty():
    with pytest.raises(ConfigurationError):
        make_head(["a", "a"], 8)
    with pytest.raises(ConfigurationError):
        make_head([], 8)


def test_head_subset():
    h = make_head(["a", "b", "c"], 8)
    s = h.subset(["c", "a"])
    np.testing.assert_array_equal(s.W, h.W[:, [2, 0]])


def test_flatten_round_trip():
    named = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([7.0, 8.0]), "a": np.array([[1.5]])}
    theta = flatten(named)
    # layout is sorted by name
    assert [n for n, _, _ in theta.layout] == ["a", "b", "w"]
    np.testing.assert_array_equal(theta.values, [1.5, 7.0, 8.0, 0, 1, 2, 3, 4, 5])
    back = unflatten(theta)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])


def test_unflatten_checks_layout(tiny_cfg):
    theta = init_parameters(tiny_cfg)
    other = ModelConfig(image_size=6, patch_size=2, embed_dim=12, num_layers=1, num_heads=2)
    with pytest.raises(CompatibilityError):
        unflatten(theta, config_layout(other))
    with pytest.raises(CompatibilityError):
        theta.check_compatible(init_parameters(other))


def test_init_deterministic(tiny_cfg):
    a, b = init_parameters(tiny_cfg), init_parameters(tiny_cfg)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.content_fingerprint == b.content_fingerprint


def test_patchify_order():
    cfg = ModelConfig(image_size=4, patch_size=2, channels=1, embed_dim=4, num_heads=1)
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    p = patchify(x, cfg)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 3], [10, 11, 14, 15])


def test_forward_shapes(tiny_cfg, tiny_model, rng):
    theta, head = tiny_model
    x = rng.random((5, 3, 6, 6))
    out = forward(theta, head, x, tiny_cfg)
    assert out.logits.shape == (5, 3)
    assert out.attributions.shape == (5, tiny_cfg.num_patches, 3)
    single = forward(theta, head, x[2], tiny_cfg)
    assert single.logits.shape == (3,)
    np.testing.assert_allclose(single.logits, out.logits[2], rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(single.attributions, out.attributions[2], rtol=1e-12, atol=1e-13)


def test_forward_rejects_wrong_geometry(tiny_cfg, tiny_model):
    theta, head = tiny_model
    with pytest.raises(DimensionError):
        forward(theta, head, np.zeros((1, 3, 8, 8)), tiny_cfg)
    with pytest.raises(DimensionError):
        forward(theta, make_head(["a"], 16), np.zeros((1, 3, 6, 6)), tiny_cfg)


def test_head_permutation_equivariance(tiny_cfg, tiny_model, rng):
    theta, head = tiny_model
    x = rng.random((3, 3, 6, 6))
    perm = [2, 0, 1]
    permuted = HeadMatrix(head.W[:, perm], tuple(head.class_names[i] for i in perm))
    a = forward(theta, head, x, tiny_cfg)
    b = forward(theta, permuted, x, tiny_cfg)
    np.testing.assert_allclose(b.logits, a.logits[:, perm], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(b.attributions, a.attributions[..., perm], rtol=1e-12, atol=1e-14)


def test_head_linearity(tiny_cfg, tiny_model, rng):
    theta, head = tiny_model
    x = rng.random((2, 3, 6, 6))
    a = forward(theta, head, x, tiny_cfg)
    b = forward(theta, HeadMatrix(2.0 * head.W, head.class_names), x, tiny_cfg)
    np.testing.assert_allclose(b.logits, 2.0 * a.logits, rtol=1e-12)
    np.testing.assert_allclose(b.attributions, 2.0 * a.attributions, rtol=1e-12)


def test_predict_class_examples():
    assert predict_class(np.array([0.1, 0.9])) == 1
    assert predict_class(np.array([0.5, 0.5])) == 0
    np.testing.assert_array_equal(predict_class(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 3.0]])), [0, 2])
