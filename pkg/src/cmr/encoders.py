"""Single-modality representations.

Frozen random tables stand in for the pretrained text and region feature
extractors; trainable projections and transformer stacks sit on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import Params, init_transformer_layer, transformer_stack
from .params import Initializer
from .tensor import ShapeError, Tensor

TEXT, VISUAL = "text", "visual"
N_SEGMENTS = 3  # text, image 1, image 2


class InputError(ValueError):
    """Malformed model input (unknown token id, wrong feature width...)."""


@dataclass
class EntitySet:
    """Entity representations of one modality source.

    ``representations`` is (B, d, N): one column per entity. ``mask`` is (B, N),
    True for real entities and False for padding.
    """

    modality: str
    source_id: int
    representations: Tensor
    mask: np.ndarray

    @property
    def name(self) -> str:
        return "text" if self.modality == TEXT else f"img{self.source_id}"

    @property
    def n(self) -> int:
        return self.representations.shape[-1]


def init_encoder_params(init: Initializer, cfg: ModelConfig) -> None:
    frozen_rng = np.random.default_rng([cfg.frozen_seed, 1009])
    init.embedding("frozen.text_token", (cfg.vocab_size, cfg.d_raw_t), 1.0, frozen=True, rng=frozen_rng)
    init.embedding("frozen.text_position", (cfg.n_text, cfg.d_raw_t), 0.5, frozen=True, rng=frozen_rng)
    init.embedding("frozen.segment", (N_SEGMENTS, cfg.d), 0.5, frozen=True, rng=frozen_rng)
    init.linear("text.proj", cfg.d, cfg.d_raw_t)
    init.linear("visual.proj", cfg.d, cfg.d_raw_v)
    init.embedding("visual.position", (cfg.n_visual, cfg.d), 0.02)
    for layer in range(text_layers(cfg)):
        init_transformer_layer(init, f"text.layers.{layer}", cfg.d, cfg.ffn_mult)
    for layer in range(visual_layers(cfg)):
        init_transformer_layer(init, f"visual.layers.{layer}", cfg.d, cfg.ffn_mult)


def text_layers(cfg: ModelConfig) -> int:
    return 0 if cfg.variant == "no_smod" else cfg.n_text_layers


def visual_layers(cfg: ModelConfig) -> int:
    return 0 if cfg.variant == "no_smod" else cfg.n_visual_layers


def pad_tokens(sequences, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Truncate/pad token lists to ``n_text``; returns ids (B, N^t) and mask (B, N^t)."""
    ids = np.zeros((len(sequences), cfg.n_text), dtype=np.intp)
    mask = np.zeros((len(sequences), cfg.n_text), dtype=bool)
    for b, seq in enumerate(sequences):
        seq = list(seq)[: cfg.n_text]
        for t in seq:
            if not 0 <= int(t) < cfg.vocab_size:
                raise InputError(f"token id {t} outside vocabulary [0, {cfg.vocab_size})")
        ids[b, : len(seq)] = seq
        mask[b, : len(seq)] = True
    return ids, mask


def encode_text(token_ids: np.ndarray, mask: np.ndarray, P: Params, cfg: ModelConfig) -> EntitySet:
    """Frozen token + position embeddings -> projection + segment -> text transformer stack."""
    token_ids = np.asarray(token_ids, dtype=np.intp)
    if token_ids.ndim != 2 or token_ids.shape[1] != cfg.n_text:
        raise ShapeError(f"token ids must be (B, {cfg.n_text}), got {token_ids.shape}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside vocabulary [0, {cfg.vocab_size})")
    raw = P["frozen.text_token"].data[token_ids] + P["frozen.text_position"].data[None]
    raw = Tensor(np.swapaxes(raw, 1, 2))  # B, d_raw_t, N
    x = T.linear_columns(raw, P["text.proj.W"], P["text.proj.b"])
    x = T.add(x, T.reshape(P["frozen.segment"][0], (cfg.d, 1)))
    x = transformer_stack(x, mask, P, "text.layers", text_layers(cfg), cfg.n_heads, cfg.layer_norm_eps)
    return EntitySet(TEXT, 0, x, np.asarray(mask, dtype=bool))


def encode_visual(roi_features, source_id: int, P: Params, cfg: ModelConfig) -> EntitySet:
    """Project ROI features, add segment (by ``source_id``) and position embeddings, encode."""
    feats = roi_features.data if isinstance(roi_features, Tensor) else np.asarray(roi_features)
    if feats.ndim == 2:
        feats = feats[None]
    if feats.ndim != 3 or feats.shape[1:] != (cfg.n_visual, cfg.d_raw_v):
        raise ShapeError(f"ROI features must be (B, {cfg.n_visual}, {cfg.d_raw_v}), got {feats.shape}")
    if not 1 <= source_id < N_SEGMENTS:
        raise InputError(f"source_id must be 1 or 2, got {source_id}")
    raw = Tensor(np.swapaxes(feats, 1, 2).astype(P["visual.proj.W"].dtype))  # B, d_raw_v, N
    x = T.linear_columns(raw, P["visual.proj.W"], P["visual.proj.b"])
    x = T.add(x, T.reshape(P["frozen.segment"][source_id], (cfg.d, 1)))
    x = T.add(x, T.transpose(P["visual.position"]))
    mask = np.ones((feats.shape[0], cfg.n_visual), dtype=bool)
    x = transformer_stack(x, mask, P, "visual.layers", visual_layers(cfg), cfg.n_heads, cfg.layer_norm_eps)
    return EntitySet(VISUAL, source_id, x, mask)
