import csv
from dataclasses import replace
from math import comb

import numpy as np
import pytest

from cmr import tensor as T
from cmr.config import ModelConfig, tiny_config
from cmr.encoders import EntitySet
from cmr.entity_relevance import AffinityMatrix, affinity
from cmr.model import forward, init_params, make_batch
from cmr.relational_relevance import (
    candidate_table,
    enumerate_relational_pairs,
    inter_modality_importance,
    intra_modality_scores,
    pair_indices,
    rank_and_select,
    ranking_scores,
    relation_representations,
    relational_relevance_feature,
    select_top_k,
    write_ranking_csv,
)
from cmr.tensor import Tensor, grad_check

from conftest import random_examples


def entity_set(S, mask=None, name="text"):
    S = np.asarray(S, dtype=np.float64)
    S = S[None] if S.ndim == 2 else S
    mask = np.ones((S.shape[0], S.shape[-1]), bool) if mask is None else np.asarray(mask)
    return EntitySet("text" if name == "text" else "visual", 0 if name == "text" else 1, Tensor(S), mask)


def aff_from(A, row_mask=None, col_mask=None):
    A = np.asarray(A, dtype=np.float64)
    A = A[None] if A.ndim == 2 else A
    rm = np.ones(A.shape[:2], bool) if row_mask is None else row_mask
    cm = np.ones((A.shape[0], A.shape[2]), bool) if col_mask is None else col_mask
    return AffinityMatrix(("text", "img1"), Tensor(A), rm, cm)


@pytest.fixture
def cfg():
    return tiny_config("vqa")


@pytest.fixture
def P(cfg):
    return init_params(cfg, seed=4).leaves(False)


def test_candidate_counts():
    assert len(pair_indices(20)[0]) == 190 == comb(20, 2)
    assert len(pair_indices(2)[0]) == 1
    I, J = pair_indices(5)
    assert np.all(I < J)
    assert list(zip(I, J)) == sorted(zip(I, J))


def test_relation_count_at_reference_text_length():
    cfg = ModelConfig(task="vqa", d=8, d_raw_t=8, d_raw_v=6, vocab_size=12, n_text_layers=1,
                      n_visual_layers=1, n_cross_layers=1)
    assert cfg.n_text == 20 and cfg.top_k == 10
    P = init_params(cfg).leaves(False)
    block = relation_representations(entity_set(np.random.default_rng(0).standard_normal((8, 20))), P, cfg)
    assert block.r.shape == (1, 8, 190) and int(block.n_valid[0]) == 190


def test_only_unmasked_pairs_are_valid(cfg, P, rng):
    mask = np.array([[True, True, False, True]])
    block = relation_representations(entity_set(rng.standard_normal((cfg.d, 4)), mask), P, cfg)
    pairs = [(int(i), int(j)) for i, j, ok in zip(block.I, block.J, block.valid[0]) if ok]
    assert pairs == [(0, 1), (0, 3), (1, 3)]


def test_fewer_than_two_entities_gives_no_candidates(cfg, P, rng):
    block = relation_representations(entity_set(rng.standard_normal((cfg.d, 4)), [[True, False, False, False]]), P, cfg)
    assert block.n_valid[0] == 0


def test_duplicate_entities_give_duplicate_relations(cfg, P, rng):
    S = rng.standard_normal((cfg.d, 4))
    S[:, 2] = S[:, 0]
    S[:, 3] = S[:, 1]
    r = relation_representations(entity_set(S), P, cfg).r.data[0]
    # candidates in order (0,1) (0,2) (0,3) (1,2) (1,3) (2,3)
    np.testing.assert_array_equal(r[:, 0], r[:, 2])
    np.testing.assert_array_equal(r[:, 0], r[:, 5])
    assert not np.array_equal(r[:, 0], r[:, 3])  # (1, 2) concatenates in the other order


def test_u_is_a_distribution(cfg, P, rng):
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((2, cfg.d, 4)), mask), P, cfg), P, "text")
    u = block.u.data
    np.testing.assert_allclose(u.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(u[block.valid] > 0) and np.all(u[block.valid] < 1)
    assert np.all(u[~block.valid] == 0)


def test_equal_scores_split_evenly(cfg, P):
    S = np.zeros((cfg.d, 4))
    S[0, :3] = 1.0  # entities 0,1,2 identical; entity 3 masked
    block = intra_modality_scores(relation_representations(entity_set(S, [[True, True, True, False]]), P, cfg), P, "text")
    np.testing.assert_allclose(block.u.data[0][block.valid[0]], 1 / 3, atol=1e-15)
    S2 = np.zeros((cfg.d, 4))
    block2 = intra_modality_scores(relation_representations(entity_set(S2, [[True, True, False, False]]), P, cfg), P, "text")
    np.testing.assert_allclose(block2.u.data[0][block2.valid[0]], [1.0])


def test_u_shift_invariance(cfg, rng):
    store = init_params(cfg, seed=4)
    S = entity_set(rng.standard_normal((cfg.d, 4)))
    before = intra_modality_scores(relation_representations(S, store.leaves(False), cfg), store.leaves(False), "text").u.data
    store.arrays["relation.text.mlp2.1.b"] += 3.7
    after = intra_modality_scores(relation_representations(S, store.leaves(False), cfg), store.leaves(False), "text").u.data
    np.testing.assert_allclose(before, after, atol=1e-12)


def test_importance_small_case():
    v, V = inter_modality_importance(aff_from([[0.2, 0.9], [0.5, 0.1]]), side=0)
    np.testing.assert_allclose(v.data[0], [0.9, 0.5])
    np.testing.assert_allclose(V.data[0], [[0.81, 0.45], [0.45, 0.25]])
    v2, _ = inter_modality_importance(aff_from([[0.2, 0.9], [0.5, 0.1]]), side=1)
    np.testing.assert_allclose(v2.data[0], [0.5, 0.9])


def test_importance_ignores_masked_counterparts():
    A = [[0.2, 0.9], [0.5, 0.1]]
    v, _ = inter_modality_importance(aff_from(A, col_mask=np.array([[True, False]])), side=0)
    np.testing.assert_allclose(v.data[0], [0.2, 0.5])


def test_V_is_exactly_symmetric(rng):
    _, V = inter_modality_importance(aff_from(rng.standard_normal((3, 5, 4))), side=0)
    assert np.array_equal(V.data, np.swapaxes(V.data, 1, 2))


def test_ranking_small_case():
    I, J = np.array([0, 0]), np.array([1, 2])
    V = np.zeros((1, 3, 3))
    V[0, 0, 1], V[0, 0, 2] = 0.2, 0.8
    w = ranking_scores(np.array([[0.5, 0.5]]), V, np.ones((1, 2), bool), I, J)
    np.testing.assert_allclose(w[0], [0.1, 0.4])
    order, selected = select_top_k(w, np.ones((1, 2), bool), 1)
    assert order[0, 0] == 1 and selected[0, 0]


def test_w_is_u_times_V_on_upper_triangle(cfg, P, rng):
    block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((cfg.d, 4))), P, cfg), P, "text")
    _, V = inter_modality_importance(aff_from(rng.standard_normal((4, 4))), side=0)
    top = rank_and_select(block, V, 3)
    for c, (i, j) in enumerate(zip(block.I, block.J)):
        assert i < j
        assert top.w[0, c] == block.u.data[0, c] * V.data[0, i, j]


def test_ties_break_lexicographically():
    w = np.array([[0.3, 0.5, 0.5, 0.1, 0.5]])
    order, _ = select_top_k(w, np.ones_like(w, bool), 3)
    np.testing.assert_array_equal(order[0], [1, 2, 4])
    again, _ = select_top_k(w.copy(), np.ones_like(w, bool), 3)
    np.testing.assert_array_equal(order, again)


def test_fewer_candidates_than_k_pads(cfg, P, rng):
    mask = np.array([[True, True, True, False]])
    block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((cfg.d, 4)), mask), P, cfg), P, "text")
    _, V = inter_modality_importance(aff_from(rng.standard_normal((4, 4)), row_mask=mask), side=0)
    top = rank_and_select(block, V, 5)
    assert top.effective_k()[0] == 3
    assert top.R.shape == (1, cfg.d, 5)
    np.testing.assert_array_equal(top.R.data[0, :, 3:], 0.0)


def test_R_columns_are_gated_selected_relations(cfg, P, rng):
    block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((cfg.d, 4))), P, cfg), P, "text")
    _, V = inter_modality_importance(aff_from(rng.standard_normal((4, 4))), side=0)
    top = rank_and_select(block, V, 3)
    n = block.n_valid[0]
    for k, c in enumerate(top.indices[0]):
        expected = block.r.data[0, :, c] * n * block.u.data[0, c]
        np.testing.assert_allclose(top.R.data[0, :, k], expected, atol=1e-14)
    ws = top.w[0, top.indices[0]]
    assert np.all(np.diff(ws) <= 0)


def test_rescaling_A_keeps_ranking(cfg, P, rng):
    block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((cfg.d, 4))), P, cfg), P, "text")
    A = np.abs(rng.standard_normal((4, 4))) + 0.1
    tops = []
    for c in (1.0, 0.01, 37.0):
        _, V = inter_modality_importance(aff_from(c * A), side=0)
        tops.append(rank_and_select(block, V, 3))
        if c != 1.0:
            np.testing.assert_allclose(V.data, c * c * tops[0].V, rtol=1e-12)
    for top in tops[1:]:
        np.testing.assert_array_equal(top.indices, tops[0].indices)


def test_permutation_gives_same_relations():
    cfg = replace(tiny_config("vqa"), symmetric_relations=True)
    P = init_params(cfg, seed=1).leaves(False)
    rng = np.random.default_rng(5)
    S = rng.standard_normal((cfg.d, 4))
    A = rng.standard_normal((4, 4))
    perm = np.array([3, 0, 2, 1])

    def run(S_, A_):
        block = intra_modality_scores(relation_representations(entity_set(S_), P, cfg), P, "text")
        _, V = inter_modality_importance(aff_from(A_), side=0)
        top = rank_and_select(block, V, 3)
        return top, block

    top, block = run(S, A)
    top_p, block_p = run(S[:, perm], A[perm])
    np.testing.assert_allclose(np.sort(top.w[0]), np.sort(top_p.w[0]), atol=1e-12)
    chosen = {frozenset(p) for p in top.pairs()}
    relabelled = {frozenset((int(perm[i]), int(perm[j]))) for i, j in top_p.pairs()}
    assert chosen == relabelled


def test_zero_padding_gives_zero_grid_rows(cfg, P, rng):
    mask = np.array([[True, True, True, False]])
    sets = []
    for name in ("text", "img1"):
        block = intra_modality_scores(relation_representations(entity_set(rng.standard_normal((cfg.d, 4)), mask if name == "text" else None, name), P, cfg), P, "text")
        _, V = inter_modality_importance(aff_from(rng.standard_normal((4, 4)), row_mask=mask), side=0)
        sets.append(rank_and_select(block, V, 5))
    grid = T.matmul(T.transpose(sets[0].R), sets[1].R).data[0]
    np.testing.assert_array_equal(grid[3:], 0.0)
    feat = relational_relevance_feature(sets[0], sets[1], init_params(replace(cfg, top_k=5)).leaves(False))
    assert feat.phi.shape == (1, cfg.d) and feat.kind == "relational"


def test_gradient_reaches_unselected_candidates(cfg, rng):
    """With K=1, an entity outside the chosen pair only influences the output through the softmax."""
    store = init_params(cfg, seed=6)
    # the score head's output bias has an exactly zero gradient (softmax shift invariance)
    names = [n for n in store.names() if n.startswith("relation.text") and n != "relation.text.mlp2.1.b"]
    A = rng.standard_normal((4, 4))
    S0 = rng.standard_normal((cfg.d, 4))
    base = dict(store.leaves(False))
    leaves = [Tensor(store[n] + 0.05 * rng.standard_normal(store[n].shape), requires_grad=True) for n in names]
    _, V = inter_modality_importance(aff_from(A), side=0)
    w = rng.standard_normal((1, cfg.d, 1))

    def top1(S, params):
        P = dict(base)
        P.update(zip(names, params))
        es = EntitySet("text", 0, S, np.ones((1, 4), bool))
        return rank_and_select(intra_modality_scores(relation_representations(es, P, cfg), P, "text"), V, 1)

    chosen = top1(Tensor(S0[None]), leaves).pairs()[0]
    outsider = next(k for k in range(4) if k not in chosen)

    def f(S, *params):
        return T.sum(top1(S, params).R * w)

    S = Tensor(S0[None].copy(), requires_grad=True)
    report = grad_check(f, [S] + leaves, tol=1e-4)
    assert report.passed, report
    assert np.abs(S.grad[0, :, outsider]).max() > 1e-8


def test_relational_pairs():
    assert enumerate_relational_pairs("vqa") == [("text", "img1")]
    assert len(enumerate_relational_pairs("nlvr")) == 3


def test_relational_cnn_gradient(rng):
    cfg = tiny_config("vqa")
    store = init_params(cfg, seed=2)
    prefix = "relational_cnn.text-img1"
    names = [n for n in store.names() if n.startswith(prefix)]
    leaves = [Tensor(store[n] + 0.05 * rng.standard_normal(store[n].shape), requires_grad=True) for n in names]
    grid = Tensor(rng.standard_normal((2, cfg.top_k, cfg.top_k)), requires_grad=True)
    w = rng.standard_normal((2, cfg.d))
    from cmr.layers import cnn

    report = grad_check(lambda g, *p: T.sum(cnn(g, dict(zip(names, p)), prefix) * w), [grid] + leaves)
    assert report.passed, report


def test_candidate_table_and_csv(tmp_path, cfg):
    P = init_params(cfg, seed=0).leaves(False)
    res = forward(make_batch(random_examples(cfg, 1, n_tokens=3), cfg), P, cfg)
    top_text, _ = res.top_k[("text", "img1")]
    rows = candidate_table(res.relations["text"], top_text)
    assert len(rows) == 3  # 3 real tokens -> 3 pairs
    assert sum(r.rank is not None for r in rows) == min(cfg.top_k, 3)
    for r in rows:
        assert r.w == pytest.approx(r.u * r.v_importance, rel=1e-12)
    path = tmp_path / "rank.csv"
    write_ranking_csv(rows, path)
    table = list(csv.DictReader(open(path)))
    assert list(table[0]) == ["i", "j", "u", "V", "w", "selected"]
    assert len(table) == 3
