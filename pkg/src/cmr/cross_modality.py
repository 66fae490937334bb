"""Joint alignment of all entity sets with stacked cross-modality transformer layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import EntitySet
from .layers import Params, init_transformer_layer, transformer_layer
from .params import Initializer
from .tensor import ShapeError, Tensor


@dataclass
class JointEntityMatrix:
    """All entities side by side: text columns first, then images by source id."""

    S: Tensor
    mask: np.ndarray
    sources: list[EntitySet]

    @property
    def spans(self) -> list[tuple[int, int]]:
        bounds = np.cumsum([0] + [s.n for s in self.sources])
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def cross_layers(cfg: ModelConfig) -> int:
    return 0 if cfg.variant == "no_xmod" else cfg.n_cross_layers


def init_cross_params(init: Initializer, cfg: ModelConfig) -> None:
    for layer in range(cross_layers(cfg)):
        init_transformer_layer(init, f"cross.layers.{layer}", cfg.d, cfg.ffn_mult)


def join(entity_sets: list[EntitySet]) -> JointEntityMatrix:
    if len(entity_sets) < 2:
        raise ValueError("alignment needs at least two entity sets")
    d = entity_sets[0].representations.shape[-2]
    for es in entity_sets:
        if es.representations.shape[-2] != d:
            raise ShapeError(f"entity sets disagree on d: {d} vs {es.representations.shape[-2]}")
    ordered = sorted(entity_sets, key=lambda es: (es.modality != "text", es.source_id))
    S = T.concat([es.representations for es in ordered], axis=-1)
    mask = np.concatenate([es.mask for es in ordered], axis=-1)
    return JointEntityMatrix(S, mask, ordered)


def split(joint: JointEntityMatrix) -> list[EntitySet]:
    out = []
    for es, (a, b) in zip(joint.sources, joint.spans):
        out.append(EntitySet(es.modality, es.source_id, T.slice_axis(joint.S, a, b, axis=-1), es.mask))
    return out


def cross_attention_layer(joint: JointEntityMatrix, P: Params, prefix: str, cfg: ModelConfig) -> JointEntityMatrix:
    S = transformer_layer(joint.S, joint.mask, P, prefix, cfg.n_heads, cfg.layer_norm_eps)
    return JointEntityMatrix(S, joint.mask, joint.sources)


def align(entity_sets: list[EntitySet], P: Params, cfg: ModelConfig) -> list[EntitySet]:
    """Concatenate, run the cross-modality stack over every entity, split back per source."""
    joint = join(entity_sets)
    n_layers = cross_layers(cfg)
    if n_layers == 0:
        return list(joint.sources)
    for layer in range(n_layers):
        joint = cross_attention_layer(joint, P, f"cross.layers.{layer}", cfg)
    return split(joint)
