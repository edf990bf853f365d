from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgexpress.perception import (EncoderConfig, Entity, SceneConfig, SceneConfigError, SyntheticScene,
                                  category_table, generate_scene, make_distractor_qa, make_relation_qa,
                                  oracle_relations, render_feature_map)
from sgexpress.sge import pool_mask_features
from sgexpress.vocab import PREDICATES, Vocabulary

VOCAB = Vocabulary(8)
seeds = st.integers(0, 2**40)


def brute_relations(scene):
    """Second, float-based reading of the geometric rules."""
    out = []
    enabled = PREDICATES[: scene.config.predicate_count]
    cents = []
    for e in scene.entities:
        ys, xs = np.nonzero(e.mask)
        cents.append((xs.mean() + 0.5, ys.mean() + 0.5))
    for s, es in enumerate(scene.entities):
        for o, eo in enumerate(scene.entities):
            if s == o:
                continue
            (sx0, sy0, sx1, sy1), (ox0, oy0, ox1, oy1) = es.box, eo.box
            if ox0 <= sx0 and oy0 <= sy0 and sx1 <= ox1 and sy1 <= oy1 and es.box != eo.box:
                pred = "inside"
            elif sx0 <= ox0 and sy0 <= oy0 and ox1 <= sx1 and oy1 <= sy1 and es.box != eo.box:
                pred = "larger-than"
            else:
                dx, dy = cents[o][0] - cents[s][0], cents[o][1] - cents[s][1]
                pred = None
                if abs(dx) > 1e-9 and abs(dx) >= 1.5 * abs(dy) - 1e-9:
                    pred = "left-of" if dx > 0 else "right-of"
                elif abs(dy) > 1e-9 and abs(dy) >= 1.5 * abs(dx) - 1e-9:
                    pred = "above" if dy > 0 else "below"
            if pred in enabled:
                out.append((s, PREDICATES.index(pred), o))
    return out


def rect(canvas, box):
    m = np.zeros(canvas, dtype=bool)
    x0, y0, x1, y1 = box
    m[y0:y1, x0:x1] = True
    return m


# -- generate_scene ---------------------------------------------------------

def test_generate_scene_deterministic():
    assert generate_scene(0) == generate_scene(0)
    assert generate_scene(0) != generate_scene(1)


def test_single_entity_has_no_relations():
    scene = generate_scene(3, SceneConfig(n_entities_range=(1, 1)))
    assert len(scene.entities) == 1 and scene.relations == []


def test_seed7_three_entities_match_oracle():
    scene = generate_scene(7, SceneConfig(n_entities_range=(3, 3)))
    assert len(scene.entities) == 3
    assert scene.relations == oracle_relations(scene) == brute_relations(scene)
    assert scene.relations


def test_infeasible_config_rejected():
    with pytest.raises(SceneConfigError, match="too many entities"):
        generate_scene(0, SceneConfig(canvas=(8, 8), n_entities_range=(8, 8), border=0, size_range=(3, 3)))
    with pytest.raises(SceneConfigError):
        generate_scene(0, SceneConfig(canvas=(4, 32)))


@given(seeds)
def test_scene_invariants(seed):
    scene = generate_scene(seed)
    lo, hi = scene.config.n_entities_range
    assert lo <= len(scene.entities) <= hi
    masks = scene.masks
    assert np.all(masks.sum(axis=(1, 2)) >= 1)
    assert np.all(masks.sum(axis=0) <= 1)
    for e in scene.entities:
        assert not np.any(e.mask & ~rect(scene.canvas, e.box))
    for s, _, o in scene.relations:
        assert s != o and 0 <= s < len(scene.entities) and 0 <= o < len(scene.entities)


@given(seeds)
def test_relations_equal_oracle(seed):
    scene = generate_scene(seed)
    assert scene.relations == oracle_relations(scene)
    assert sorted(scene.relations) == sorted(brute_relations(scene))


@given(seeds)
def test_converse_rules_agree(seed):
    rel = set(generate_scene(seed).relations)
    converse = {0: 1, 1: 0, 2: 3, 3: 2, 4: 5, 5: 4}
    for s, p, o in rel:
        assert (o, converse[p], s) in rel


# -- oracle_relations -------------------------------------------------------

def test_oracle_one_entity_empty():
    scene = SyntheticScene(0, SceneConfig(), [Entity(0, (4, 4, 8, 8), rect((32, 32), (4, 4, 8, 8)))])
    assert oracle_relations(scene) == []


def test_oracle_nested_boxes():
    outer_box, inner_box = (10, 10, 20, 20), (12, 12, 15, 15)
    outer = rect((32, 32), outer_box) & ~rect((32, 32), inner_box)
    scene = SyntheticScene(0, SceneConfig(), [Entity(0, outer_box, outer),
                                             Entity(1, inner_box, rect((32, 32), inner_box))])
    rel = oracle_relations(scene)
    assert (1, PREDICATES.index("inside"), 0) in rel
    assert (0, PREDICATES.index("larger-than"), 1) in rel


def test_oracle_direction_by_hand():
    # centroids (5, 5) and (15, 6): dx = 10 dominates dy = 1
    a, b = (4, 4, 6, 6), (14, 5, 16, 7)
    scene = SyntheticScene(0, SceneConfig(), [Entity(0, a, rect((32, 32), a)), Entity(1, b, rect((32, 32), b))])
    assert oracle_relations(scene) == [(0, 0, 1), (1, 1, 0)]


# -- render_feature_map -----------------------------------------------------

def test_full_canvas_entity_constant_content():
    scene = SyntheticScene(0, SceneConfig(), [Entity(2, (0, 0, 32, 32), np.ones((32, 32), dtype=bool))])
    enc = EncoderConfig(noise_sigma=0.0)
    fmap = render_feature_map(scene, enc).data
    content = fmap[:30]
    assert np.array_equal(content, np.broadcast_to(content[:, :1, :1], content.shape))
    assert np.array_equal(content[:, 0, 0], category_table(8, 30)[2])


def test_render_deterministic_with_noise():
    scene = generate_scene(11)
    enc = EncoderConfig(noise_sigma=0.3)
    assert np.array_equal(render_feature_map(scene, enc).data, render_feature_map(scene, enc).data)


def test_render_rejects_narrow_encoder():
    with pytest.raises(ValueError):
        render_feature_map(generate_scene(0), EncoderConfig(d_e=8, embed_dim=8))


@given(seeds)
def test_footprint_depends_on_category_and_position(seed):
    scene = generate_scene(seed, SceneConfig(canvas=(16, 16), n_entities_range=(2, 3), border=1, size_range=(3, 5), nest_prob=0.0))
    enc = EncoderConfig(d_e=10, h_v=16, w_v=16)
    fmap = render_feature_map(scene, enc).data
    table = category_table(8, 8)
    xs = (np.arange(16) + 0.5) / 16 * 2 - 1
    for e in scene.entities:
        ys, xs_ = np.nonzero(e.mask)
        assert np.array_equal(fmap[:8, ys, xs_].T, np.tile(table[e.category_id], (len(ys), 1)))
        assert np.array_equal(fmap[8, ys, xs_], xs[xs_])


def test_two_categories_pooled_features_separable():
    cfg = SceneConfig(category_count=2, n_entities_range=(2, 2), nest_prob=0.0)
    feats, labels = [], []
    for seed in range(40):
        scene = generate_scene(seed, cfg)
        fe = pool_mask_features(render_feature_map(scene, EncoderConfig()), scene.masks).data
        feats.extend(fe)
        labels.extend(scene.categories)
    # the two position channels carry no category information
    x, y = np.array(feats)[:, :30], np.array(labels)
    # one gradient step of a linear classifier from zero = difference of class means
    w = x[y == 1].mean(axis=0) - x[y == 0].mean(axis=0)
    score = x @ w
    threshold = (score[y == 1].min() + score[y == 0].max()) / 2
    assert score[y == 1].min() > score[y == 0].max()
    assert np.array_equal(score > threshold, y == 1)


# -- QA samples -------------------------------------------------------------

def test_one_triple_one_sample():
    a, b = (4, 4, 6, 6), (14, 5, 16, 7)
    scene = SyntheticScene(0, SceneConfig(), [Entity(0, a, rect((32, 32), a)), Entity(1, b, rect((32, 32), b))])
    scene.relations = [(0, 0, 1)]
    samples = make_relation_qa(scene, VOCAB)
    assert len(samples) == 1
    assert VOCAB.decode(samples[0].answer_ids) == ["left-of"]
    assert VOCAB.decode(samples[0].prompt_ids) == ["what", "is", "cat", "to", "dog", "?"]


def test_samples_match_oracle():
    scene = generate_scene(7, SceneConfig(n_entities_range=(3, 3)))
    truth = oracle_relations(scene)
    samples = make_relation_qa(scene, VOCAB)
    assert len(samples) == len(truth)
    assert [VOCAB.decode(s.answer_ids) for s in samples] == [[PREDICATES[p]] for _, p, _ in truth]


def test_no_relations_no_samples():
    scene = generate_scene(3, SceneConfig(n_entities_range=(1, 1)))
    assert make_relation_qa(scene, VOCAB) == [] and make_distractor_qa(scene, VOCAB) == []


@given(seeds)
def test_answer_is_contiguous_suffix(seed):
    scene = generate_scene(seed)
    for s in make_relation_qa(scene, VOCAB) + make_distractor_qa(scene, VOCAB):
        mask = s.loss_mask
        first = mask.index(True)
        assert all(mask[first:]) and not any(mask[:first])
        assert s.answer_span == (first, len(mask))


@given(seeds)
def test_distractors_name_an_absent_category(seed):
    scene = generate_scene(seed)
    present = {f"{VOCAB.tokens[VOCAB.category_id(c)]}" for c in scene.categories}
    distractors = make_distractor_qa(scene, VOCAB)
    assert len(distractors) == (len(scene.relations) if len(present) < 8 else 0)
    for s in distractors:
        words = VOCAB.decode(s.prompt_ids)
        names = [w for w in words if w in {VOCAB.tokens[VOCAB.category_id(k)] for k in range(8)}]
        assert any(n not in present for n in names)
        assert VOCAB.decode(s.answer_ids) == ["none"]


def test_scene_config_round_trip():
    cfg = replace(SceneConfig(), canvas=(24, 16))
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg
