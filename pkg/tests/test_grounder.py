import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptground import ConfigError, ShapeError
from conceptground.grounder import (
    AttentionMap,
    HyperParams,
    ModelParams,
    aggregate_common,
    attended_independent,
    attention_argmax_point,
    attention_forward,
    backward_batch,
    concat_tile,
    decode,
    export_heatmap,
    forward_batch,
    heatmap_pixels,
    init_params,
    read_pgm,
)
from conceptground.numcore import affine, grad_check, relu, softmax
from conceptground.train import loss_total

TINY = HyperParams(channels=4, embed_dim=3, grid_h=2, grid_w=2, num_concepts=3,
                   attn_widths=(6, 5, 4, 1), proj_channels=2, concept_batch_size=2)


def random_params(hyper, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    params = init_params(hyper, rng, zero_logit_layer=False)
    params.flat += rng.normal(0.0, scale, params.flat.size)
    return params


def tiny_problem(seed):
    rng = np.random.default_rng(seed)
    params = init_params(TINY, rng, zero_logit_layer=False)
    params.flat += rng.normal(0.0, 0.1, params.flat.size)
    V = rng.normal(size=(2, 4, 4))
    t = rng.normal(size=(2, 3))
    return params, V, t, int(rng.integers(3))


def test_layout_round_trip():
    params = random_params(TINY, 0)
    rebuilt = ModelParams(HyperParams.from_dict(TINY.to_dict()), params.flat.copy())
    for name in params.names():
        np.testing.assert_array_equal(rebuilt[name], params[name])
    assert params.flat.size == TINY.num_params


def test_views_alias_flat_buffer():
    params = ModelParams(TINY)
    params.flat[params.slice_of("proj.b")] = 7.0
    np.testing.assert_array_equal(params["proj.b"], [7.0, 7.0])


def test_hyper_rejects_bad_widths():
    with pytest.raises(ConfigError):
        HyperParams(4, 3, 2, 2, 3, attn_widths=(6, 5, 4, 2))


def test_concat_tile_examples():
    out = concat_tile(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([9.0]))
    np.testing.assert_array_equal(out, [[1, 2], [3, 4], [9, 9]])
    out = concat_tile(np.ones((3, 5)), np.zeros(2))
    np.testing.assert_array_equal(out[3:], np.zeros((2, 5)))


def test_concat_tile_columnwise_oracle():
    rng = np.random.default_rng(1)
    V, t = rng.normal(size=(5, 7)), rng.normal(size=4)
    out = concat_tile(V, t)
    for j in range(7):
        np.testing.assert_array_equal(out[:, j], np.concatenate([V[:, j], t]))


def test_attention_zero_params_uniform():
    attn = attention_forward(np.ones((4, 4)), np.ones(3), ModelParams(TINY))
    np.testing.assert_allclose(attn.weights, 0.25, rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_is_distribution(seed):
    rng = np.random.default_rng(seed)
    attn = attention_forward(rng.normal(size=(4, 4)), rng.normal(size=3), random_params(TINY, seed, 1.0))
    assert np.all(attn.weights >= 0)
    assert abs(attn.weights.sum() - 1.0) < 1e-12


def test_attention_compositional_oracle():
    params = random_params(TINY, 2, 0.5)
    rng = np.random.default_rng(3)
    V, t = rng.normal(size=(4, 4)), rng.normal(size=3)
    h = concat_tile(V, t)
    for i in range(3):
        h = relu(affine(params[f"attn{i}.W"], params[f"attn{i}.b"], h))
    logits = affine(params["attn3.W"], np.zeros(1), h)[0]
    np.testing.assert_allclose(attention_forward(V, t, params).weights, softmax(logits), rtol=0, atol=1e-12)


def test_attended_uniform_and_one_hot():
    params = random_params(TINY, 4, 1.0)
    V = np.random.default_rng(5).normal(size=(4, 4))
    out = attended_independent(np.full(4, 0.25), V, params)
    np.testing.assert_allclose(out, affine(params["proj.W"], params["proj.b"], V / 4), atol=1e-14)
    out = attended_independent(np.array([0.0, 0.0, 1.0, 0.0]), V, params)
    for j in (0, 1, 3):
        np.testing.assert_array_equal(out[:, j], params["proj.b"])


def test_attended_columnwise_oracle():
    params = random_params(TINY, 6, 1.0)
    rng = np.random.default_rng(7)
    V, w = rng.normal(size=(4, 4)), softmax(rng.normal(size=4))
    out = attended_independent(w, V, params)
    for j in range(4):
        expected = params["proj.W"] @ (w[j] * V[:, j]) + params["proj.b"]
        np.testing.assert_allclose(out[:, j], expected, rtol=0, atol=1e-12)


def test_aggregate_cases():
    F = np.random.default_rng(8).normal(size=(2, 4))
    np.testing.assert_array_equal(aggregate_common([F]), F)
    np.testing.assert_allclose(aggregate_common([F, F, F]), 3 * F)
    items = np.random.default_rng(9).normal(size=(5, 2, 4))
    expected = np.zeros((2, 4))
    for a in items:
        for i in range(2):
            for j in range(4):
                expected[i, j] += a[i, j]
    np.testing.assert_allclose(aggregate_common(list(items)), expected, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        aggregate_common([F, F[:, :3]])


def test_decode_cases():
    zero = ModelParams(TINY)
    flat = np.random.default_rng(10).normal(size=8)
    np.testing.assert_allclose(decode(flat, "common", zero), [1 / 3] * 3, atol=1e-15)
    params = random_params(TINY, 11, 1.0)
    for head, key in (("common", "common"), ("independent", "indep")):
        p = decode(flat, head, params)
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(p, softmax(affine(params[f"{key}.W"], params[f"{key}.b"], flat[:, None])[:, 0]),
                                   rtol=0, atol=1e-12)


def test_forward_batch_zero_params_uniform():
    rng = np.random.default_rng(12)
    out = forward_batch(rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 3)), ModelParams(TINY))
    np.testing.assert_allclose(out.attention, 0.25, atol=1e-15)
    np.testing.assert_allclose(out.independent, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(out.common, 1 / 3, atol=1e-15)


def test_forward_batch_permutation():
    params, V, t, _ = tiny_problem(13)
    a = forward_batch(V, t, params)
    b = forward_batch(V[::-1], t[::-1], params)
    np.testing.assert_allclose(a.common, b.common, rtol=0, atol=1e-14)
    np.testing.assert_allclose(a.independent[::-1], b.independent, rtol=0, atol=1e-15)
    np.testing.assert_allclose(a.attention[::-1], b.attention, rtol=0, atol=1e-15)


def test_forward_batch_compositional_oracle():
    params, V, t, _ = tiny_problem(14)
    out = forward_batch(V, t, params)
    attended = []
    for i in range(2):
        attn = attention_forward(V[i], t[i], params)
        np.testing.assert_allclose(out.attention[i], attn.weights, rtol=0, atol=1e-12)
        F = attended_independent(attn, V[i], params)
        np.testing.assert_allclose(out.independent[i], decode(F.reshape(-1), "independent", params),
                                   rtol=0, atol=1e-12)
        attended.append(F)
    common = decode(aggregate_common(attended).reshape(-1), "common", params)
    np.testing.assert_allclose(out.common, common, rtol=0, atol=1e-12)


def test_forward_batch_wrong_k():
    params, V, t, _ = tiny_problem(15)
    with pytest.raises(ConfigError):
        forward_batch(V[:1], t[:1], params)


def test_cc_gradient_ignores_independent_head():
    params, V, t, target = tiny_problem(16)
    g = ModelParams(TINY, backward_batch(V, t, params, target, "cc"))
    assert not g["indep.W"].any() and not g["indep.b"].any()
    g = ModelParams(TINY, backward_batch(V, t, params, target, "ic"))
    assert not g["common.W"].any() and not g["common.b"].any()


def test_scaled_loss_doubles_gradient():
    from conceptground.grounder import backward_from_outputs

    params, V, t, target = tiny_problem(17)
    out = forward_batch(V, t, params)
    g1 = backward_from_outputs(out, params, target, "icc")
    g2 = backward_from_outputs(out, params, target, "icc", scale=2.0)
    np.testing.assert_array_equal(g2, 2.0 * g1)


def _loss_fn(V, t, target, mode):
    def fn(x):
        q = ModelParams(TINY, x)
        return loss_total(forward_batch(V, t, q), target, mode).total, backward_batch(V, t, q, target, mode)
    return fn


@pytest.mark.parametrize("mode", ["ic", "cc", "icc"])
def test_gradient_matches_finite_differences(mode):
    params, V, t, target = tiny_problem(3)
    assert grad_check(_loss_fn(V, t, target, mode), params.flat) < 1e-5


@pytest.mark.parametrize("seed", range(0, 40, 3))
def test_gradient_finite_difference_noise_aware_sweep(seed):
    # coordinates whose true gradient is structurally zero (shift-invariant
    # directions of the softmax) only see finite-difference rounding noise,
    # so this sweep bounds absolute error as well as relative error
    params, V, t, target = tiny_problem(seed)
    eps = 1e-5
    for mode in ("ic", "cc", "icc"):
        analytic = backward_batch(V, t, params, target, mode)
        x = params.flat.copy()
        for i in range(x.size):
            orig = x[i]
            x[i] = orig + eps
            up = loss_total(forward_batch(V, t, ModelParams(TINY, x)), target, mode).total
            x[i] = orig - eps
            down = loss_total(forward_batch(V, t, ModelParams(TINY, x)), target, mode).total
            x[i] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(analytic[i] - numeric) <= 1e-5 * max(abs(analytic[i]), abs(numeric)) + 1e-9, (mode, i)


def test_argmax_back_projection():
    w = np.zeros(49)
    w[0] = 1.0
    assert attention_argmax_point(AttentionMap(w, 7, 7), 224, 224) == (16.0, 16.0)
    w = np.zeros(49)
    w[3 * 7 + 3] = 1.0
    assert attention_argmax_point(AttentionMap(w, 7, 7), 224, 224) == (112.0, 112.0)


def test_argmax_tie_break_lowest_index():
    w = np.zeros(49)
    w[5] = w[9] = 0.5
    # cell 5 is row 0, column 5
    assert attention_argmax_point(AttentionMap(w, 7, 7), 224, 224) == (5.5 * 32, 16.0)


def test_heatmap_uniform_is_constant_zero():
    img = heatmap_pixels(AttentionMap(np.full(49, 1 / 49), 7, 7), 224, 224)
    assert img.shape == (224, 224) and not img.any()


def test_heatmap_one_hot_peak_in_footprint():
    w = np.zeros(49)
    w[2 * 7 + 4] = 1.0
    img = heatmap_pixels(AttentionMap(w, 7, 7), 224, 224)
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert 64 <= r < 96 and 128 <= c < 160
    assert img[64:96, 128:160].max() == 255


def test_heatmap_hand_table():
    # value at pixel (r, c) = (1 - fy)(1 - fx) with clamped fractional cell
    # coordinates [0, .25, .75, 1] along each axis, then scaled by 255
    expected = np.array([
        [255, 191, 64, 0],
        [191, 143, 48, 0],
        [64, 48, 16, 0],
        [0, 0, 0, 0],
    ], dtype=np.uint8)
    img = heatmap_pixels(AttentionMap(np.array([1.0, 0.0, 0.0, 0.0]), 2, 2), 4, 4)
    np.testing.assert_array_equal(img, expected)


def test_export_heatmap_pgm(tmp_path):
    attn = AttentionMap(np.array([1.0, 0.0, 0.0, 0.0]), 2, 2)
    path = export_heatmap(attn, 4, 6, tmp_path / "h.pgm")
    assert path.read_bytes().startswith(b"P5\n6 4\n255\n")
    np.testing.assert_array_equal(read_pgm(path), heatmap_pixels(attn, 4, 6))
