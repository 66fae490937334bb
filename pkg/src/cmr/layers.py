"""Transformer layers, column MLPs and the relevance CNN shared by several modules."""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import tensor as T
from .params import Initializer
from .tensor import Tensor

Params = dict[str, Tensor]


# ---- transformer -----------------------------------------------------------
def init_transformer_layer(init: Initializer, prefix: str, d: int, ffn_mult: int) -> None:
    for proj in ("Wq", "Wk", "Wv", "Wo"):
        init.weight(f"{prefix}.attn.{proj}", (d, d))
    init.norm(f"{prefix}.ln1", d)
    init.linear(f"{prefix}.ffn.1", ffn_mult * d, d)
    init.linear(f"{prefix}.ffn.2", d, ffn_mult * d)
    init.norm(f"{prefix}.ln2", d)


def attention(S: Tensor, mask: np.ndarray, P: Params, prefix: str, n_heads: int = 1):
    """Masked scaled dot-product self-attention over the columns of ``S`` (B, d, N).

    Logits are ``K^T Q`` (keys down the rows, queries across the columns) and are
    normalised along the columns, so column ``j`` holds query ``j``'s distribution
    over keys. Masked keys get zero weight. Returns the output and the weights
    (B, heads, N, N).
    """
    B, d, N = S.shape
    dh = d // n_heads
    Q = T.matmul(P[prefix + ".Wq"], S)
    K = T.matmul(P[prefix + ".Wk"], S)
    V = T.matmul(P[prefix + ".Wv"], S)
    Q = T.reshape(Q, (B, n_heads, dh, N))
    K = T.reshape(K, (B, n_heads, dh, N))
    V = T.reshape(V, (B, n_heads, dh, N))
    logits = T.mul(T.matmul(T.transpose(K), Q), 1.0 / sqrt(dh))
    key_mask = np.asarray(mask, dtype=bool)[:, None, :, None]
    weights = T.softmax_columns(logits, mask=key_mask)
    out = T.reshape(T.matmul(V, weights), (B, d, N))
    return T.matmul(P[prefix + ".Wo"], out), weights


def transformer_layer(S: Tensor, mask: np.ndarray, P: Params, prefix: str, n_heads: int = 1, eps: float = 1e-5) -> Tensor:
    """Post-norm layer: attention, residual + norm, feed-forward, residual + norm."""
    attn, _ = attention(S, mask, P, prefix + ".attn", n_heads)
    h = T.layer_norm(T.add(S, attn), P[prefix + ".ln1.gain"], P[prefix + ".ln1.bias"], eps=eps)
    ff = T.relu(T.linear_columns(h, P[prefix + ".ffn.1.W"], P[prefix + ".ffn.1.b"]))
    ff = T.linear_columns(ff, P[prefix + ".ffn.2.W"], P[prefix + ".ffn.2.b"])
    return T.layer_norm(T.add(h, ff), P[prefix + ".ln2.gain"], P[prefix + ".ln2.bias"], eps=eps)


def transformer_stack(S: Tensor, mask: np.ndarray, P: Params, prefix: str, n_layers: int, n_heads: int, eps: float) -> Tensor:
    for layer in range(n_layers):
        S = transformer_layer(S, mask, P, f"{prefix}.{layer}", n_heads, eps)
    return S


# ---- column MLP -----------------------------------------------------------
def init_mlp(init: Initializer, prefix: str, sizes: list[int]) -> None:
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        init.linear(f"{prefix}.{i}", n_out, n_in)


def mlp_columns(x: Tensor, P: Params, prefix: str, n_layers: int) -> Tensor:
    """ReLU MLP applied to every column of (..., in, N); the last layer is linear."""
    for i in range(n_layers):
        x = T.linear_columns(x, P[f"{prefix}.{i}.W"], P[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def mlp_rows(x: Tensor, P: Params, prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = T.linear(x, P[f"{prefix}.{i}.W"], P[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


# ---- relevance CNN ----------------------------------------------------------
@dataclass(frozen=True)
class CNNGeometry:
    """Kernel sizes and flattened width for one input grid size.

    Kernels are clamped to the grid they slide over, so small grids (e.g. a
    3x3 top-K relevance grid) still pass through both conv/pool stages.
    """

    in_shape: tuple[int, int]
    kernels: tuple[tuple[int, int], tuple[int, int]]
    out_shape: tuple[int, int]
    channels: tuple[int, int]

    @property
    def flat(self) -> int:
        return self.channels[1] * self.out_shape[0] * self.out_shape[1]


def cnn_geometry(h: int, w: int, kernel: int, channels: tuple[int, int]) -> CNNGeometry:
    kernels = []
    hh, ww = h, w
    for _ in range(2):
        kh, kw = min(kernel, hh), min(kernel, ww)
        kernels.append((kh, kw))
        hh, ww = hh - kh + 1, ww - kw + 1
        hh, ww = -(-hh // 2), -(-ww // 2)
    return CNNGeometry((h, w), tuple(kernels), (hh, ww), tuple(channels))


def init_cnn(init: Initializer, prefix: str, geom: CNNGeometry, hidden: int, d: int) -> None:
    c1, c2 = geom.channels
    (k1h, k1w), (k2h, k2w) = geom.kernels
    init.weight(prefix + ".conv1.K", (c1, 1, k1h, k1w), fan_in=k1h * k1w, fan_out=c1 * k1h * k1w)
    init.bias(prefix + ".conv1.b", c1)
    init.weight(prefix + ".conv2.K", (c2, c1, k2h, k2w), fan_in=c1 * k2h * k2w, fan_out=c2 * k2h * k2w)
    init.bias(prefix + ".conv2.b", c2)
    init.linear(prefix + ".fc.0", hidden, geom.flat)
    init.linear(prefix + ".fc.1", d, hidden)


def cnn(grid: Tensor, P: Params, prefix: str) -> Tensor:
    """conv -> relu -> maxpool -> conv -> relu -> maxpool -> flatten -> FC -> relu -> FC.

    ``grid`` is (B, h, w); the result is (B, d).
    """
    B = grid.shape[0]
    x = T.reshape(grid, (B, 1) + grid.shape[1:])
    x = T.maxpool2d(T.relu(T.conv2d(x, P[prefix + ".conv1.K"], P[prefix + ".conv1.b"])))
    x = T.maxpool2d(T.relu(T.conv2d(x, P[prefix + ".conv2.K"], P[prefix + ".conv2.b"])))
    x = T.reshape(x, (B, -1))
    x = T.relu(T.linear(x, P[prefix + ".fc.0.W"], P[prefix + ".fc.0.b"]))
    return T.linear(x, P[prefix + ".fc.1.W"], P[prefix + ".fc.1.b"])
