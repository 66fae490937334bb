"""Pairwise relation candidates, top-K ranking and relational relevance features.

Per source, every unordered pair of real entities ``i < j`` gets a representation
``r = MLP1([s_i, s_j])`` and an intra-modality score ``u`` (softmax of ``MLP2(r)``
over the source's candidates). Per relevance pair, each side's entities get an
importance ``v_i = max_j A_ij`` from the pair's affinity matrix; candidates are
ranked by ``w = u * v_i * v_j`` and the top K are compared across the pair.

The hard top-K choice carries no gradient. So that the score network still
learns, each selected column of ``R`` is gated by ``n_valid * u`` (1 for a
uniform score), which couples it to every candidate through the softmax.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import TEXT, VISUAL, EntitySet
from .entity_relevance import AffinityMatrix, RelevanceFeature, enumerate_entity_pairs, pair_label
from .layers import CNNGeometry, Params, cnn, cnn_geometry, init_cnn, init_mlp, mlp_columns
from .params import Initializer
from .tensor import Tensor


@dataclass
class RelationCandidate:
    pair_index: tuple[int, int]
    r: np.ndarray
    u: float
    v_importance: float = float("nan")
    w: float = float("nan")
    rank: int | None = None


@dataclass
class RelationBlock:
    """All candidates of one source, batched."""

    source: str
    r: Tensor  # (B, d, P)
    u: Tensor | None  # (B, P)
    valid: np.ndarray  # (B, P)
    I: np.ndarray
    J: np.ndarray

    @property
    def n_valid(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


@dataclass
class TopKRelationSet:
    source: str
    K: int
    indices: np.ndarray  # (B, K) candidate indices, descending w
    selected: np.ndarray  # (B, K) False where padded
    w: np.ndarray  # (B, P)
    V: np.ndarray  # (B, N, N)
    R: Tensor  # (B, d, K)
    I: np.ndarray = field(repr=False, default=None)
    J: np.ndarray = field(repr=False, default=None)

    def effective_k(self) -> np.ndarray:
        return self.selected.sum(axis=-1)

    def pairs(self, example: int = 0) -> list[tuple[int, int]]:
        return [
            (int(self.I[c]), int(self.J[c]))
            for c, ok in zip(self.indices[example], self.selected[example])
            if ok
        ]


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical unordered pairs ``i < j`` in lexicographic order."""
    I, J = np.triu_indices(n, k=1)
    return I.astype(np.intp), J.astype(np.intp)


def modality_of(source: str) -> str:
    return TEXT if source == "text" else VISUAL


def enumerate_relational_pairs(task: str) -> list[tuple[str, str]]:
    return enumerate_entity_pairs(task)


def relational_geometry(cfg: ModelConfig) -> CNNGeometry:
    return cnn_geometry(cfg.top_k, cfg.top_k, cfg.cnn_kernel, cfg.cnn_channels)


def init_relational_params(init: Initializer, cfg: ModelConfig) -> None:
    if cfg.variant == "no_rel":
        return
    for modality in (TEXT, VISUAL):
        init_mlp(init, f"relation.{modality}.mlp1", [2 * cfg.d, cfg.rel_hidden, cfg.d])
        init_mlp(init, f"relation.{modality}.mlp2", [cfg.d, cfg.rel_hidden, 1])
    geom = relational_geometry(cfg)
    for pair in enumerate_relational_pairs(cfg.task):
        init_cnn(init, f"relational_cnn.{pair_label(pair)}", geom, cfg.cnn_hidden, cfg.d)


def relation_representations(es: EntitySet, P: Params, cfg: ModelConfig) -> RelationBlock:
    """``r_(i,j) = MLP1([s_i, s_j])`` for every pair of real entities."""
    S = es.representations
    I, J = pair_indices(es.n)
    prefix = f"relation.{es.modality}.mlp1"
    Si = T.getitem(S, (Ellipsis, I))
    Sj = T.getitem(S, (Ellipsis, J))
    r = mlp_columns(T.concat([Si, Sj], axis=-2), P, prefix, 2)
    if cfg.symmetric_relations:
        r = T.add(r, mlp_columns(T.concat([Sj, Si], axis=-2), P, prefix, 2))
    valid = es.mask[:, I] & es.mask[:, J]
    return RelationBlock(es.name, r, None, valid, I, J)


def intra_modality_scores(block: RelationBlock, P: Params, modality: str) -> RelationBlock:
    """Softmax of ``MLP2(r)`` over the source's valid candidates; invalid ones get 0."""
    logits = mlp_columns(block.r, P, f"relation.{modality}.mlp2", 2)  # B, 1, P
    logits = T.reshape(logits, logits.shape[:1] + logits.shape[2:])
    u = T.softmax(logits, axis=-1, mask=block.valid)
    u = T.mul(u, block.valid.astype(u.dtype))
    return RelationBlock(block.source, block.r, u, block.valid, block.I, block.J)


def inter_modality_importance(aff: AffinityMatrix, side: int = 0) -> tuple[Tensor, Tensor]:
    """Importance of each entity of ``aff.pair[side]``: its best match in the other source.

    Returns ``v`` (B, N) and ``V = v ⊗ v`` (B, N, N).
    """
    if side == 0:
        A, other_mask = aff.A, aff.col_mask
    else:
        A, other_mask = T.transpose(aff.A), aff.row_mask
    v = T.row_max(A, mask=other_mask[:, None, :])
    return v, T.outer_product(v, v)


def ranking_scores(u: np.ndarray, V: np.ndarray, valid: np.ndarray, I: np.ndarray, J: np.ndarray) -> np.ndarray:
    """``w = u * V_ij`` over the strict upper triangle; invalid candidates get -inf."""
    w = u * V[:, I, J]
    return np.where(valid, w, -np.inf)


def select_top_k(w: np.ndarray, valid: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Descending ``w``, ties broken by candidate index (lexicographic (i, j))."""
    order = np.argsort(-w, axis=-1, kind="stable")[:, :K]
    if order.shape[1] < K:
        pad = np.zeros((order.shape[0], K - order.shape[1]), dtype=order.dtype)
        order = np.concatenate([order, pad], axis=1)
    selected = np.take_along_axis(valid, order, axis=-1)
    selected[:, min(K, valid.shape[1]) :] = False
    return order, selected


def rank_and_select(block: RelationBlock, V: Tensor, K: int) -> TopKRelationSet:
    """Rank candidates by ``w = u * V_ij`` and gather the top K (zero-padded) into ``R``."""
    u = block.u.data
    w = ranking_scores(u, V.data, block.valid, block.I, block.J)
    order, selected = select_top_k(w, block.valid, K)
    n_valid = block.n_valid.astype(u.dtype)
    idx = order[:, None, :]
    r_sel = T.take_along_axis(block.r, np.broadcast_to(idx, (block.r.shape[0], block.r.shape[1], K)), axis=-1)
    u_sel = T.take_along_axis(block.u, order, axis=-1)
    gate = T.mul(u_sel, (n_valid[:, None] * selected).astype(u.dtype))
    R = T.mul(r_sel, T.reshape(gate, (gate.shape[0], 1, K)))
    return TopKRelationSet(block.source, K, order, selected, w, V.data, R, block.I, block.J)


def relational_relevance_feature(a: TopKRelationSet, b: TopKRelationSet, P: Params) -> RelevanceFeature:
    """``CNN((R_a)^T R_b)`` over the K x K relational affinity."""
    grid = T.matmul(T.transpose(a.R), b.R)
    pair = (a.source, b.source)
    return RelevanceFeature(pair, cnn(grid, P, f"relational_cnn.{pair_label(pair)}"), "relational")


def candidate_table(block: RelationBlock, top: TopKRelationSet, example: int = 0) -> list[RelationCandidate]:
    """Per-candidate view of one example: (i, j), r, u, V_ij, w and rank (None if unselected)."""
    ranks = {int(c): k for k, (c, ok) in enumerate(zip(top.indices[example], top.selected[example])) if ok}
    rows = []
    for c in np.flatnonzero(block.valid[example]):
        i, j = int(block.I[c]), int(block.J[c])
        rows.append(
            RelationCandidate(
                (i, j),
                block.r.data[example, :, c].copy(),
                float(block.u.data[example, c]),
                float(top.V[example, i, j]),
                float(top.w[example, c]),
                ranks.get(int(c)),
            )
        )
    return rows


def write_ranking_csv(rows: list[RelationCandidate], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "u", "V", "w", "selected"])
        for c in rows:
            writer.writerow([c.pair_index[0], c.pair_index[1], f"{c.u:.9g}", f"{c.v_importance:.9g}",
                             f"{c.w:.9g}", int(c.rank is not None)])
