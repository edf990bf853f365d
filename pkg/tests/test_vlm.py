import itertools
import math

import numpy as np
import pytest

from sgexpress import autodiff as ad
from sgexpress import config as cfg
from sgexpress.autodiff import ShapeError, Tensor
from sgexpress.data import relation_dataset
from sgexpress.gradcheck import grad_check
from sgexpress.layers import Linear
from sgexpress.model import Preparer, SceneGraphVLM, collate
from sgexpress.perception import render_feature_map
from sgexpress.sge import ACTIVATED, RAW, SceneGraph, sge_forward
from sgexpress.vlm import (LLMConfig, SequenceLayout, SequenceTooLongError, ToyLLM, assemble_sequence,
                           autoregressive_loss, llm_forward, project_graph, project_visual)

D = 8


def rows(n, seed=0, d=D):
    return Tensor(np.random.default_rng(seed).normal(size=(n, d)))


def sentinels():
    return rows(2, 99)


def identity_linear(d):
    lin = Linear("p", d, d, np.random.default_rng(0))
    lin.weight.data[:] = np.eye(d)
    return lin


@pytest.fixture(scope="module")
def llm():
    return ToyLLM(LLMConfig(vocab_size=20, d_llm=D, layers=2, heads=2, max_len=32), seed=3)


# -- projections ------------------------------------------------------------

def test_project_visual_identity_row_major():
    fmap = np.random.default_rng(1).normal(size=(D, 2, 3))
    out = project_visual(Tensor(fmap), identity_linear(D)).data
    assert out.shape == (6, D)
    assert np.array_equal(out[4], fmap[:, 1, 1])
    assert np.array_equal(out, fmap.reshape(D, -1).T)


def test_project_visual_row_count():
    lin = Linear("p", 5, D, np.random.default_rng(0))
    assert project_visual(Tensor(np.ones((5, 2, 2))), lin).shape == (4, D)


def test_project_visual_dimension_mismatch():
    with pytest.raises(ShapeError):
        project_visual(Tensor(np.ones((4, 2, 2))), Linear("p", 5, D, np.random.default_rng(0)))


def test_project_visual_gradient():
    lin = Linear("p", 5, D, np.random.default_rng(2))
    fmap = Tensor(np.random.default_rng(3).normal(size=(5, 2, 2)))
    r = Tensor(np.random.default_rng(4).normal(size=(4, D)))
    assert grad_check(lambda: (project_visual(fmap, lin) * r).sum(), {"w": lin.weight, "b": lin.bias}).passed


def graph(features, state=ACTIVATED):
    f = np.asarray(features, dtype=float)
    return SceneGraph(Tensor(f[None]), np.ones((1, len(f)), dtype=bool), state)


def test_project_graph_empty():
    assert project_graph(graph(np.zeros((0, D))), identity_linear(D)).shape == (0, D)


def test_project_graph_identity_and_permutation():
    f = np.random.default_rng(5).normal(size=(4, D))
    lin = Linear("g", D, D, np.random.default_rng(6))
    assert np.array_equal(project_graph(graph(f), identity_linear(D)).data, f)
    perm = [2, 0, 3, 1]
    assert np.array_equal(project_graph(graph(f[perm]), lin).data, project_graph(graph(f), lin).data[perm])


def test_project_graph_rejects_raw():
    with pytest.raises(ValueError):
        project_graph(graph(np.ones((2, D)), RAW), identity_linear(D))


# -- assemble_sequence ------------------------------------------------------

def test_layout_example():
    seq = assemble_sequence(rows(4), rows(2, 1), rows(3, 2), (1, 3), sentinels())
    assert len(seq) == 11 and seq.layout.sg_open == 4 and seq.layout.text_open == 7
    assert seq.roles[4] == "sg_open" and seq.roles[7] == "text_open"
    assert np.array_equal(seq.embeddings.data[4], sentinels().data[0])


def test_layout_empty_graph_sentinels_adjacent():
    seq = assemble_sequence(rows(4), rows(0), rows(3, 2), (2, 3), sentinels())
    assert (seq.layout.sg_open, seq.layout.text_open) == (4, 5)


def test_loss_mask_count():
    seq = assemble_sequence(rows(3), rows(1), rows(5, 2), (2, 5), sentinels())
    assert seq.loss_mask.sum() == 3
    assert np.array_equal(np.flatnonzero(seq.loss_mask), [3 + 1 + 1 + 1 + 2, 9, 10])


def test_bad_answer_spans():
    with pytest.raises(ValueError):
        assemble_sequence(rows(3), rows(1), rows(4, 2), (2, 5), sentinels())
    with pytest.raises(ValueError):
        assemble_sequence(rows(3), rows(1), rows(4, 2), [(0, 2), (1, 3)], sentinels())


def test_no_graph_layout():
    seq = assemble_sequence(rows(4), None, rows(3, 2), (2, 3))
    assert len(seq) == 7 and seq.layout.sg_open is None and "sg_open" not in seq.roles


def test_layout_closed_form_exhaustive():
    for n_v, n, n_t in itertools.product(range(1, 10), range(0, 6), range(1, 10)):
        seq = assemble_sequence(rows(n_v), rows(n, 1), rows(n_t, 2), (n_t - 1, n_t), sentinels())
        lay = seq.layout
        assert len(seq) == n_v + 1 + n + 1 + n_t == seq.embeddings.shape[0]
        assert (lay.sg_open, lay.graph, lay.text_open, lay.text) == (n_v, (n_v + 1, n_v + 1 + n), n_v + 1 + n,
                                                                      (n_v + n + 2, n_v + n + 2 + n_t))
        assert seq.roles == ["visual"] * n_v + ["sg_open"] + ["graph"] * n + ["text_open"] + ["text"] * n_t


# -- llm_forward ------------------------------------------------------------

def _seq(n_graph=2, text_ids=(3, 4, 5, 6)):
    return assemble_sequence(rows(4), rows(n_graph, 1), rows(len(text_ids), 2), (2, len(text_ids)), sentinels(),
                             text_ids)


def test_causality_exact(llm):
    seq = _seq()
    base = llm_forward(seq, llm).data
    for j in range(len(seq)):
        bumped = seq.embeddings.data.copy()
        bumped[j] += np.random.default_rng(j).normal(size=D)
        seq2 = assemble_sequence(Tensor(bumped), None, rows(0), [])
        out = llm_forward(seq2, llm).data
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j], base[j])


def test_forward_deterministic(llm):
    assert np.array_equal(llm_forward(_seq(), llm).data, llm_forward(_seq(), llm).data)


def test_sequence_too_long(llm):
    with pytest.raises(SequenceTooLongError):
        llm_forward(assemble_sequence(rows(30), rows(2, 1), rows(3, 2), (2, 3), sentinels()), llm)


def test_empty_graph_vs_zeroed_node(llm):
    zero = Tensor(np.zeros((2, D)))
    empty = assemble_sequence(rows(4), rows(0), rows(3, 2), (2, 3), zero)
    one = assemble_sequence(rows(4), Tensor(np.zeros((1, D))), rows(3, 2), (2, 3), zero)
    a, b = llm_forward(empty, llm).data, llm_forward(one, llm).data
    assert len(one) == len(empty) + 1
    # the prefix up to the first sentinel is shared exactly; the rest moves by one position
    assert np.array_equal(a[:5], b[:5])
    assert a[5:].shape == b[6:].shape and np.all(np.isfinite(b))


# -- autoregressive_loss ----------------------------------------------------

def test_uniform_logits_give_log_vocab():
    v = 17
    loss = autoregressive_loss(Tensor(np.zeros((4, v))), [0, 0, 0, 5], [False, False, False, True])
    assert math.isclose(loss.item(), math.log(v), rel_tol=0, abs_tol=1e-14)


def test_spike_gives_zero_loss():
    logits = np.zeros((3, 5))
    logits[1, 2] = 1e4
    assert autoregressive_loss(Tensor(logits), [0, 0, 2], [False, False, True]).item() < 1e-12


def test_two_positions_average():
    logits = np.array([[0.0, 0.0], [math.log(3.0), 0.0], [0.0, 0.0]])
    # row 0 scores target 1 with p = 1/2; row 1 scores target 0 with p = 3/4
    loss = autoregressive_loss(Tensor(logits), [0, 1, 0], [False, True, True])
    assert math.isclose(loss.item(), (math.log(2) + math.log(4 / 3)) / 2, rel_tol=1e-15)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        autoregressive_loss(Tensor(np.zeros((3, 4))), [0, 0, 0], [False] * 3)


def test_no_gradient_after_last_target(llm):
    seq = assemble_sequence(rows(3), rows(2, 1), rows(6, 2), (2, 4), sentinels(), [3, 4, 5, 6, 7, 8])
    emb = Tensor(seq.embeddings.data.copy(), requires_grad=True)
    seq.embeddings = emb
    ad.backward(autoregressive_loss(llm_forward(seq, llm), seq.targets, seq.loss_mask))
    last = np.flatnonzero(seq.loss_mask)[-1]
    # the last target is read from row last-1, so rows >= last get nothing
    assert not np.any(emb.grad[last:]) and np.any(emb.grad[:last])


# -- batched path == single-sample path -------------------------------------

def single_path(model, sample):
    fmap = render_feature_map(sample.scene, model.config.encoder)
    table = model.llm.embedding_table()
    text = ad.take_rows(table, sample.token_ids)
    vis = project_visual(fmap, model.visual_proj)
    gtok = sent = None
    if model.use_graph:
        g = sge_forward(fmap, sample.scene.masks, ad.take_rows(table, sample.prompt_ids), model.sge)
        gtok = project_graph(g, model.graph_proj)
        sent = ad.take_rows(table, [model.vocab.sg_id, model.vocab.text_id])
    seq = assemble_sequence(vis, gtok, text, sample.answer_span, sent, sample.token_ids)
    return llm_forward(seq, model.llm), seq


@pytest.mark.parametrize("sg", [True, False])
def test_batched_matches_single(tiny, sg):
    config = dict(tiny, flags={**tiny["flags"], "sg": sg, "mp": sg, "prompt": sg, "sge_t": sg})
    model = SceneGraphVLM(cfg.model_config(config))
    params = model.param_dict()
    samples = relation_dataset(7, 0, "test", model.config.scene) + relation_dataset(7, 1, "test", model.config.scene)[:2]
    batch = collate(Preparer(model.config).prepare_all(samples), model.use_graph)
    batched = model.loss(batch)
    g_batched = ad.backward(batched, params)
    for p in params.values():
        p.grad = None
    losses = []
    for s in samples:
        logits, seq = single_path(model, s)
        losses.append(autoregressive_loss(logits, seq.targets, seq.loss_mask))
        one = collate([Preparer(model.config)(s)], model.use_graph)
        assert np.allclose(logits.data[np.flatnonzero(seq.loss_mask) - 1], model.logits_at(one, one.loss_rows).data,
                           rtol=0, atol=1e-12)
    single = ad.tsum(ad.concat([l.reshape(1) for l in losses])) * (1.0 / len(losses))
    g_single = ad.backward(single, params)
    assert math.isclose(batched.item(), single.item(), rel_tol=1e-13)
    for name in params:
        assert np.allclose(g_batched[name], g_single[name], rtol=1e-9, atol=1e-13), name


def test_no_graph_model_has_no_sentinel_positions(tiny):
    config = dict(tiny, flags={"sg": False, "mp": False, "prompt": False, "sge_d": True, "sge_t": False})
    model = SceneGraphVLM(cfg.model_config(config))
    s = relation_dataset(1, 0, "test", model.config.scene)[0]
    batch = collate([Preparer(model.config)(s)], False)
    p = model.feature_hw[0] * model.feature_hw[1]
    assert batch.lengths[0] == p + len(s.token_ids)
    assert not any(n.startswith(("sge.", "proj.graph")) for n in model.param_dict())
