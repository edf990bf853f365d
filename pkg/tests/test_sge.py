import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgexpress import autodiff as ad
from sgexpress.autodiff import Tensor
from sgexpress.gradcheck import grad_check
from sgexpress.perception import SceneConfig, generate_scene
from sgexpress.sge import (ACTIVATED, RAW, EmptyMaskError, SceneGraph, SceneGraphExpression, SGEConfig,
                           bilinear_sample, build_graph, inject_prompt, message_pass, pool_mask_features,
                           pooling_matrix, sge_forward)

SMALL = SGEConfig(d_e=6, d_g=8, d_t=8, mp_layers=2, mp_heads=2, prompt_heads=2)
SCENES = SceneConfig(canvas=(16, 16), n_entities_range=(2, 4), size_range=(2, 4), border=1, nest_prob=0.3)


def fixture(seed, n_tokens=3, hw=(4, 4)):
    rng = np.random.default_rng(seed)
    scene = generate_scene(seed, SCENES)
    fmap = Tensor(rng.normal(size=(SMALL.d_e, *hw)))
    prompt = Tensor(rng.normal(size=(n_tokens, SMALL.d_t)))
    return scene, fmap, prompt


def zero_linear(lin):
    lin.weight.data[:] = 0.0
    if lin.bias is not None:
        lin.bias.data[:] = 0.0


# -- bilinear_sample --------------------------------------------------------

def test_bilinear_at_grid_point():
    fmap = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)))
    assert np.array_equal(bilinear_sample(fmap, 2.0, 3.0).data, fmap.data[:, 3, 2])


def test_bilinear_constant_map():
    fmap = Tensor(np.full((2, 3, 3), 4.25))
    assert np.allclose(bilinear_sample(fmap, 0.37, 1.91).data, 4.25, rtol=0, atol=1e-15)


def test_bilinear_cell_centre():
    fmap = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]] * 2))
    assert np.array_equal(bilinear_sample(fmap, 0.5, 0.5).data, [1.5, 1.5])


def test_bilinear_out_of_bounds():
    with pytest.raises(ValueError):
        bilinear_sample(Tensor(np.zeros((1, 3, 3))), 2.5, 0.0)


def test_bilinear_gradient():
    fmap = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
    assert grad_check(lambda: (bilinear_sample(fmap, 1.3, 0.6) * Tensor([1.0, -2.0])).sum(), {"f": fmap}).passed


# -- pool_mask_features -----------------------------------------------------

def test_pool_single_pixel_is_grid_point():
    fmap = Tensor(np.random.default_rng(2).normal(size=(3, 8, 8)))
    mask = np.zeros((1, 8, 8), dtype=bool)
    mask[0, 5, 2] = True
    assert np.array_equal(pool_mask_features(fmap, mask).data[0], fmap.data[:, 5, 2])


def test_pool_full_mask_constant_map():
    fmap = Tensor(np.full((3, 4, 4), -1.5))
    out = pool_mask_features(fmap, np.ones((1, 32, 32), dtype=bool)).data
    assert np.allclose(out, -1.5, rtol=0, atol=1e-14)


def test_pool_two_points():
    fmap = Tensor(np.zeros((2, 2, 2)))
    fmap.data[:, 0, 0] = [1.0, 0.0]
    fmap.data[:, 1, 1] = [0.0, 1.0]
    mask = np.zeros((1, 2, 2), dtype=bool)
    mask[0, 0, 0] = mask[0, 1, 1] = True
    assert np.array_equal(pool_mask_features(fmap, mask).data, [[0.5, 0.5]])


def test_pool_empty_mask_rejected():
    masks = np.zeros((2, 8, 8), dtype=bool)
    masks[0, 1, 1] = True
    with pytest.raises(EmptyMaskError):
        pool_mask_features(Tensor(np.zeros((2, 4, 4))), masks)


def test_pool_no_entities():
    out = pool_mask_features(Tensor(np.zeros((5, 4, 4))), np.zeros((0, 16, 16), dtype=bool))
    assert out.shape == (0, 5)


def test_pool_caps_sample_points_deterministically():
    masks = np.ones((1, 32, 32), dtype=bool)
    a = pooling_matrix(masks, (4, 4), sample_points_cap=100)
    assert np.array_equal(a, pooling_matrix(masks, (4, 4), sample_points_cap=100))
    # each point spreads weight 1 over its neighbours, so weights are multiples of 1/cap after scaling
    assert np.isclose(a.sum(), 1.0, rtol=0, atol=1e-12)
    assert not np.array_equal(a, pooling_matrix(masks, (4, 4), sample_points_cap=1024))


@given(st.integers(0, 2**32), st.integers(1, 4), st.integers(4, 12), st.integers(4, 12))
def test_pool_matches_arithmetic_mean(seed, n, h, w):
    rng = np.random.default_rng(seed)
    fmap = rng.normal(size=(3, h, w))
    owner = rng.integers(-1, n, size=(h, w))
    masks = np.stack([owner == i for i in range(n)])
    masks = masks[masks.any(axis=(1, 2))]
    if not len(masks):
        return
    out = pool_mask_features(Tensor(fmap), masks).data
    for i, m in enumerate(masks):
        assert np.max(np.abs(out[i] - fmap[:, m].mean(axis=1))) <= 1e-12


# -- build_graph / message_pass / inject_prompt -----------------------------

def test_build_graph_empty():
    sge = SceneGraphExpression(SMALL)
    g = build_graph(Tensor(np.zeros((0, 6))), sge)
    assert g.n_nodes == 0 and g.state == RAW


def test_build_graph_identity_projection():
    cfg = SGEConfig(d_e=8, d_g=8, d_t=8, mp_heads=2, prompt_heads=2)
    sge = SceneGraphExpression(cfg)
    sge.node_in.weight.data[:] = np.eye(8)
    sge.node_in.bias.data[:] = 0
    f = np.random.default_rng(3).normal(size=(3, 8))
    g = build_graph(Tensor(f), sge)
    assert np.array_equal(g.features(), f) and g.n_nodes == 3


def test_message_pass_empty_is_identity():
    sge = SceneGraphExpression(SMALL)
    g = build_graph(Tensor(np.zeros((0, 6))), sge)
    assert message_pass(g, sge) is g


def test_message_pass_zero_output_projections():
    sge = SceneGraphExpression(SMALL, seed=4)
    for block in sge.mp:
        zero_linear(block.attn.wo)
        zero_linear(block.ffn.fc2)
    g = build_graph(Tensor(np.random.default_rng(4).normal(size=(3, 6))), sge)
    assert np.array_equal(message_pass(g, sge).node_features.data, g.node_features.data)


def test_message_pass_single_node_runs_layers():
    sge = SceneGraphExpression(SMALL, seed=5)
    g = build_graph(Tensor(np.random.default_rng(5).normal(size=(1, 6))), sge)
    out = message_pass(g, sge)
    assert out.n_nodes == 1 and not np.array_equal(out.features(), g.features())


@given(st.integers(0, 2**32), st.integers(1, 6))
def test_message_pass_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    sge = SceneGraphExpression(SMALL, seed=seed % 1000)
    f = rng.normal(size=(n, 6))
    perm = rng.permutation(n)
    a = message_pass(build_graph(Tensor(f), sge), sge).features()
    b = message_pass(build_graph(Tensor(f[perm]), sge), sge).features()
    assert np.max(np.abs(a[perm] - b)) < 1e-12


def test_inject_prompt_empty_graph():
    sge = SceneGraphExpression(SMALL)
    g = inject_prompt(build_graph(Tensor(np.zeros((0, 6))), sge), Tensor(np.ones((2, 8))), sge)
    assert g.state == ACTIVATED and g.n_nodes == 0


def test_inject_prompt_identical_keys_uniform():
    sge = SceneGraphExpression(SMALL, seed=6)
    g = build_graph(Tensor(np.random.default_rng(6).normal(size=(3, 6))), sge)
    token = np.random.default_rng(7).normal(size=(1, 8))
    _, weights = sge.inject_prompt(g, Tensor(np.repeat(token, 5, axis=0)))
    assert np.allclose(weights.data, 1 / 5, rtol=0, atol=1e-15)


def test_inject_prompt_zero_output_projection():
    sge = SceneGraphExpression(SMALL, seed=8)
    zero_linear(sge.prompt_attn.wo)
    g = build_graph(Tensor(np.random.default_rng(8).normal(size=(3, 6))), sge)
    out = inject_prompt(g, Tensor(np.ones((2, 8))), sge)
    assert out.state == ACTIVATED and np.array_equal(out.node_features.data, g.node_features.data)


def test_inject_prompt_needs_tokens():
    sge = SceneGraphExpression(SMALL)
    g = build_graph(Tensor(np.ones((2, 6))), sge)
    with pytest.raises(ValueError):
        inject_prompt(g, Tensor(np.zeros((0, 8))), sge)


def test_states_only_move_forward():
    sge = SceneGraphExpression(SMALL)
    g = inject_prompt(build_graph(Tensor(np.ones((2, 6))), sge), Tensor(np.ones((1, 8))), sge)
    with pytest.raises(ValueError):
        message_pass(g, sge)
    with pytest.raises(ValueError):
        inject_prompt(g, Tensor(np.ones((1, 8))), sge)


def test_prompt_off_leaves_graph():
    cfg = SGEConfig(d_e=6, d_g=8, d_t=8, mp_heads=2, prompt_heads=2, use_prompt=False, use_mp=False)
    sge = SceneGraphExpression(cfg)
    assert not any(n.startswith(("sge.prompt", "sge.mp")) for n, _ in sge.named_parameters())
    g = build_graph(Tensor(np.ones((2, 6))), sge)
    out = inject_prompt(message_pass(g, sge), Tensor(np.ones((1, 8))), sge)
    assert out.state == ACTIVATED and np.array_equal(out.node_features.data, g.node_features.data)


# -- sge_forward ------------------------------------------------------------

def test_forward_empty_scene():
    sge = SceneGraphExpression(SMALL)
    g = sge_forward(Tensor(np.zeros((6, 4, 4))), np.zeros((0, 16, 16), dtype=bool), Tensor(np.ones((2, 8))), sge)
    assert g.n_nodes == 0 and g.state == ACTIVATED


def test_forward_deterministic():
    scene, fmap, prompt = fixture(9)
    a = sge_forward(fmap, scene.masks, prompt, SceneGraphExpression(SMALL, 9)).node_features.data
    b = sge_forward(fmap, scene.masks, prompt, SceneGraphExpression(SMALL, 9)).node_features.data
    assert np.array_equal(a, b)


def test_forward_gradients():
    scene, fmap, prompt = fixture(10)
    sge = SceneGraphExpression(SMALL, 10)
    fmap.requires_grad = prompt.requires_grad = True
    r = Tensor(np.random.default_rng(11).normal(size=(len(scene.entities), SMALL.d_g)))
    tensors = {**dict(sge.named_parameters()), "fmap": fmap, "prompt": prompt}
    report = grad_check(lambda: (sge_forward(fmap, scene.masks, prompt, sge).node_features[0] * r).sum(), tensors)
    assert report.passed and report.max_rel_err < 1e-5


def test_every_parameter_gets_gradient():
    scene, fmap, prompt = fixture(12)
    sge = SceneGraphExpression(SMALL, 12)
    params = dict(sge.named_parameters())
    r = Tensor(np.random.default_rng(13).normal(size=(len(scene.entities), SMALL.d_g)))
    grads = ad.backward((sge_forward(fmap, scene.masks, prompt, sge).node_features[0] * r).sum(), params)
    dead = [n for n, g in grads.items() if not np.any(g)]
    assert not dead


def test_prompt_influences_graph():
    scene, fmap, prompt = fixture(14)
    sge = SceneGraphExpression(SMALL, 14)
    other = Tensor(np.random.default_rng(15).normal(size=prompt.shape))
    a = sge_forward(fmap, scene.masks, prompt, sge).node_features.data
    b = sge_forward(fmap, scene.masks, other, sge).node_features.data
    assert np.max(np.abs(a - b)) > 0


@given(st.integers(0, 2**32))
def test_forward_permutation_equivariant(seed):
    scene, fmap, prompt = fixture(seed % 100000)
    sge = SceneGraphExpression(SMALL, seed % 1000)
    perm = np.random.default_rng(seed).permutation(len(scene.entities))
    a = sge_forward(fmap, scene.masks, prompt, sge).node_features.data[0]
    b = sge_forward(fmap, scene.masks[perm], prompt, sge).node_features.data[0]
    assert np.max(np.abs(a[perm] - b)) < 1e-9


@given(st.integers(0, 2**32), st.integers(1, 6))
def test_prompt_attention_rows_sum_to_one(seed, n_tokens):
    scene, fmap, prompt = fixture(seed % 100000, n_tokens)
    sge = SceneGraphExpression(SMALL, seed % 1000)
    f_e = pool_mask_features(fmap, scene.masks)
    _, weights = sge.inject_prompt(sge.message_pass(sge.build_graph(f_e)), prompt)
    assert np.max(np.abs(weights.data.sum(axis=-1) - 1)) < 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        SGEConfig(d_g=10, mp_heads=4).validate()
    with pytest.raises(ValueError):
        SGEConfig(sample_points_cap=0).validate()
