"""End-to-end forward pass: encoders, alignment, relevance blocks, task head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .cross_modality import align, init_cross_params
from .encoders import EntitySet, encode_text, encode_visual, init_encoder_params, pad_tokens
from .entity_relevance import (
    AffinityMatrix,
    RelevanceFeature,
    affinity,
    enumerate_entity_pairs,
    entity_relevance_feature,
    init_entity_params,
    pair_label,
)
from .layers import Params, init_mlp, mlp_rows
from .params import Initializer, ParameterStore
from .relational_relevance import (
    RelationBlock,
    TopKRelationSet,
    enumerate_relational_pairs,
    init_relational_params,
    inter_modality_importance,
    intra_modality_scores,
    modality_of,
    rank_and_select,
    relation_representations,
    relational_relevance_feature,
)
from .tensor import Tensor

HEAD_PREFIX = "head."


@dataclass
class Batch:
    tokens: np.ndarray  # (B, N^t)
    text_mask: np.ndarray  # (B, N^t)
    images: list[np.ndarray]  # n_images x (B, N^v, d_raw_v)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ForwardResult:
    logits: Tensor
    phi: Tensor
    blocks: list[RelevanceFeature]
    entities: dict[str, EntitySet] = field(default_factory=dict)
    affinities: dict[tuple[str, str], AffinityMatrix] = field(default_factory=dict)
    relations: dict[str, RelationBlock] = field(default_factory=dict)
    top_k: dict[tuple[str, str], tuple[TopKRelationSet, TopKRelationSet]] = field(default_factory=dict)

    @property
    def block_labels(self) -> list[str]:
        return [f"{b.kind}:{pair_label(b.source_pair)}" for b in self.blocks]


def block_layout(cfg: ModelConfig) -> list[tuple[str, tuple[str, str]]]:
    """Relevance blocks of the final feature, in order: entity pairs, then relational pairs."""
    layout = []
    if cfg.variant != "no_entity":
        layout += [("entity", p) for p in enumerate_entity_pairs(cfg.task)]
    if cfg.variant != "no_rel":
        layout += [("relational", p) for p in enumerate_relational_pairs(cfg.task)]
    return layout


def init_head(init: Initializer, cfg: ModelConfig) -> None:
    width = len(block_layout(cfg)) * cfg.d
    h = cfg.head_hidden
    init_mlp(init, HEAD_PREFIX + "mlp", [width, h, h, h, cfg.n_outputs])


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParameterStore:
    """All parameters for ``cfg``; frozen stub tables depend only on ``cfg.frozen_seed``."""
    cfg.validate()
    store = ParameterStore()
    init = Initializer(store, seed, dtype)
    init_encoder_params(init, cfg)
    init_cross_params(init, cfg)
    init_entity_params(init, cfg)
    init_relational_params(init, cfg)
    head_init = Initializer(store, seed + 7919, dtype)
    init_head(head_init, cfg)
    return store


def make_batch(examples, cfg: ModelConfig) -> Batch:
    """Collate examples (objects with ``tokens``, ``visual``, ``label``) into arrays."""
    tokens, mask = pad_tokens([ex.tokens for ex in examples], cfg)
    images = []
    for k in range(cfg.n_images):
        images.append(np.stack([np.asarray(ex.visual[k]) for ex in examples]) if examples else
                      np.zeros((0, cfg.n_visual, cfg.d_raw_v)))
    labels = np.array([ex.label for ex in examples], dtype=np.intp) if examples else np.zeros(0, np.intp)
    return Batch(tokens, mask, images, labels)


def encode(batch: Batch, P: Params, cfg: ModelConfig) -> list[EntitySet]:
    if len(batch.images) != cfg.n_images:
        raise ValueError(f"task {cfg.task!r} expects {cfg.n_images} images, batch has {len(batch.images)}")
    sets = [encode_text(batch.tokens, batch.text_mask, P, cfg)]
    for k, feats in enumerate(batch.images, start=1):
        sets.append(encode_visual(feats, k, P, cfg))
    return sets


def forward(batch: Batch, P: Params, cfg: ModelConfig) -> ForwardResult:
    aligned = align(encode(batch, P, cfg), P, cfg)
    entities = {es.name: es for es in aligned}
    layout = block_layout(cfg)
    pairs = enumerate_entity_pairs(cfg.task)
    affinities = {p: affinity(entities[p[0]], entities[p[1]]) for p in pairs}

    blocks: list[RelevanceFeature] = []
    relations: dict[str, RelationBlock] = {}
    tops: dict[tuple[str, str], tuple[TopKRelationSet, TopKRelationSet]] = {}
    for kind, pair in layout:
        if kind == "entity":
            blocks.append(entity_relevance_feature(affinities[pair], P))
            continue
        for name in pair:
            if name not in relations:
                block = relation_representations(entities[name], P, cfg)
                relations[name] = intra_modality_scores(block, P, modality_of(name))
        aff = affinities[pair]
        _, V_a = inter_modality_importance(aff, side=0)
        _, V_b = inter_modality_importance(aff, side=1)
        top_a = rank_and_select(relations[pair[0]], V_a, cfg.top_k)
        top_b = rank_and_select(relations[pair[1]], V_b, cfg.top_k)
        tops[pair] = (top_a, top_b)
        blocks.append(relational_relevance_feature(top_a, top_b, P))

    phi = T.concat([b.phi for b in blocks], axis=-1)
    logits = mlp_rows(phi, P, HEAD_PREFIX + "mlp", 4)
    if cfg.n_outputs == 1:
        logits = T.reshape(logits, (logits.shape[0],))
    return ForwardResult(logits, phi, blocks, entities, affinities, relations, tops)


def loss(logits: Tensor, labels, cfg: ModelConfig) -> Tensor:
    """Binary cross-entropy on one logit (nlvr) or softmax cross-entropy over classes (vqa)."""
    labels = np.asarray(labels)
    if cfg.task == "nlvr":
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("nlvr labels must be 0 or 1")
        return T.sigmoid_bce(logits, labels)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.n_classes):
        raise ValueError(f"vqa labels must lie in [0, {cfg.n_classes})")
    return T.cross_entropy(logits, labels)


def predict_scores(logits: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Class probabilities, (B, 2) for nlvr and (B, C) for vqa."""
    if cfg.task == "nlvr":
        p = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
        return np.stack([1.0 - p, p], axis=-1)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_labels(logits: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.task == "nlvr":
        return (logits > 0).astype(np.intp)
    return logits.argmax(axis=-1).astype(np.intp)
