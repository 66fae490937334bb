"""Entity affinity matrices and their CNN relevance features."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, n_images_for
from .encoders import EntitySet
from .layers import CNNGeometry, Params, cnn, cnn_geometry, init_cnn
from .params import Initializer
from .tensor import ShapeError, Tensor


@dataclass
class AffinityMatrix:
    """Dot products between the entities of two sources, (B, N_mu, N_nu)."""

    pair: tuple[str, str]
    A: Tensor
    row_mask: np.ndarray
    col_mask: np.ndarray

    def masked(self) -> Tensor:
        """``A`` with padded rows and columns zeroed."""
        keep = (self.row_mask[:, :, None] & self.col_mask[:, None, :]).astype(self.A.dtype)
        return T.mul(self.A, keep)


@dataclass
class RelevanceFeature:
    source_pair: tuple[str, str]
    phi: Tensor  # (B, d)
    kind: str  # "entity" | "relational"


def source_names(task: str) -> list[str]:
    return ["text"] + [f"img{i}" for i in range(1, n_images_for(task) + 1)]


def enumerate_entity_pairs(task: str) -> list[tuple[str, str]]:
    """Every text-image pair, then every image-image pair."""
    images = source_names(task)[1:]
    pairs = [("text", img) for img in images]
    pairs += [(a, b) for i, a in enumerate(images) for b in images[i + 1 :]]
    return pairs


def pair_label(pair: tuple[str, str]) -> str:
    return f"{pair[0]}-{pair[1]}"


def source_length(name: str, cfg: ModelConfig) -> int:
    return cfg.n_text if name == "text" else cfg.n_visual


def entity_cnn_geometry(pair: tuple[str, str], cfg: ModelConfig) -> CNNGeometry:
    return cnn_geometry(source_length(pair[0], cfg), source_length(pair[1], cfg), cfg.cnn_kernel, cfg.cnn_channels)


def init_entity_params(init: Initializer, cfg: ModelConfig) -> None:
    if cfg.variant == "no_entity":
        return
    for pair in enumerate_entity_pairs(cfg.task):
        init_cnn(init, f"entity_cnn.{pair_label(pair)}", entity_cnn_geometry(pair, cfg), cfg.cnn_hidden, cfg.d)


def affinity(a: EntitySet, b: EntitySet) -> AffinityMatrix:
    """``A = (S'_a)^T S'_b``; entry (i, j) is entity i of ``a`` dotted with entity j of ``b``."""
    Sa, Sb = a.representations, b.representations
    if Sa.shape[-2] != Sb.shape[-2]:
        raise ShapeError(f"affinity: representation widths differ, {Sa.shape} vs {Sb.shape}")
    A = T.matmul(T.transpose(Sa), Sb)
    return AffinityMatrix((a.name, b.name), A, a.mask, b.mask)


def entity_relevance_feature(aff: AffinityMatrix, P: Params) -> RelevanceFeature:
    phi = cnn(aff.masked(), P, f"entity_cnn.{pair_label(aff.pair)}")
    return RelevanceFeature(aff.pair, phi, "entity")


def write_affinity_csv(aff: AffinityMatrix, path, example: int = 0) -> None:
    """Headerless grid: row i is entity i of the first source, column j entity j of the second.

    Only real entities are written, so the grid is N_mu x N_nu for that example.
    """
    grid = aff.A.data[example][aff.row_mask[example]][:, aff.col_mask[example]]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([f"{v:.9g}" for v in row])
