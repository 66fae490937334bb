"""Finite-difference checks for every tensor op and for the assembled model.

Each op case builds float64 inputs from a seed and reduces the op's output to a
scalar with a fixed random weighting, so every output element contributes a
distinct coefficient. Inputs to kinked ops (ReLU, max pooling, row max) are
kept well away from their kinks and ties, where central differences are not
meaningful.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, tiny_config
from .model import Batch, forward, init_params, loss
from .tensor import GradCheckReport, Tensor

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = rng.standard_normal(out.shape)
    return T.sum(T.mul(out, w))


def _spread(rng, shape, gap: float = 0.05) -> np.ndarray:
    """Distinct values at least ``gap`` apart, none within ``gap / 2`` of zero."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


def _unary(op, positive: bool = False) -> Case:
    def build(rng):
        x = rng.uniform(0.5, 2.0, (3, 4)) if positive else rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        return (lambda a: T.sum(T.mul(op(a), w))), [_leaf(x)]
    return build


def _binary(op, b_shape=(3, 4)) -> Case:
    def build(rng):
        w = rng.standard_normal((3, 4))
        return (lambda a, b: T.sum(T.mul(op(a, b), w))), [_leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal(b_shape))]
    return build


def _case_relu(rng):
    w = rng.standard_normal((4, 5))
    return (lambda a: T.sum(T.mul(T.relu(a), w))), [_leaf(_spread(rng, (4, 5)))]


def _case_reduce(op, axis):
    def build(rng):
        w = rng.standard_normal(np.sum(np.zeros((2, 3, 4)), axis=axis).shape)
        return (lambda a: T.sum(T.mul(op(a, axis=axis), w))), [_leaf(rng.standard_normal((2, 3, 4)))]
    return build


def _case_reshape(rng):
    w = rng.standard_normal((6, 4))
    return (lambda a: T.sum(T.mul(T.reshape(a, (6, 4)), w))), [_leaf(rng.standard_normal((2, 3, 4)))]


def _case_transpose(rng):
    w = rng.standard_normal((2, 4, 3))
    return (lambda a: T.sum(T.mul(T.transpose(a), w))), [_leaf(rng.standard_normal((2, 3, 4)))]


def _case_concat(rng):
    w = rng.standard_normal((2, 7))
    return (lambda a, b: T.sum(T.mul(T.concat([a, b], axis=-1), w))), [
        _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 4)))]


def _case_getitem(rng):
    idx = (slice(None), np.array([0, 2, 2, 3]))
    w = rng.standard_normal((3, 4))
    return (lambda a: T.sum(T.mul(T.getitem(a, idx), w))), [_leaf(rng.standard_normal((3, 5)))]


def _case_slice(rng):
    w = rng.standard_normal((2, 3, 2))
    return (lambda a: T.sum(T.mul(T.slice_axis(a, 1, 3), w))), [_leaf(rng.standard_normal((2, 3, 5)))]


def _case_take(rng):
    idx = rng.integers(0, 5, (2, 3))
    w = rng.standard_normal((2, 3))
    return (lambda a: T.sum(T.mul(T.take_along_axis(a, idx, axis=-1), w))), [_leaf(rng.standard_normal((2, 5)))]


def _case_matmul(rng):
    w = rng.standard_normal((2, 3, 5))
    return (lambda a, b: T.sum(T.mul(T.matmul(a, b), w))), [
        _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((2, 4, 5)))]


def _case_outer(rng):
    w = rng.standard_normal((2, 3, 4))
    return (lambda a, b: T.sum(T.mul(T.outer_product(a, b), w))), [
        _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 4)))]


def _case_linear(rng):
    w = rng.standard_normal((2, 5))
    return (lambda x, W, b: T.sum(T.mul(T.linear(x, W, b), w))), [
        _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((5, 3))), _leaf(rng.standard_normal(5))]


def _case_linear_columns(rng):
    w = rng.standard_normal((2, 5, 4))
    return (lambda x, W, b: T.sum(T.mul(T.linear_columns(x, W, b), w))), [
        _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.standard_normal((5, 3))), _leaf(rng.standard_normal(5))]


def _case_softmax(rng):
    mask = np.ones((3, 5), dtype=bool)
    mask[1, 3:] = False
    w = rng.standard_normal((3, 5))
    return (lambda a: T.sum(T.mul(T.softmax(a, axis=-1, mask=mask), w))), [_leaf(rng.standard_normal((3, 5)))]


def _case_softmax_columns(rng):
    mask = np.ones((4, 1), dtype=bool)
    mask[-1] = False
    w = rng.standard_normal((2, 4, 3))
    return (lambda a: T.sum(T.mul(T.softmax_columns(a, mask=mask), w))), [_leaf(rng.standard_normal((2, 4, 3)))]


def _case_layer_norm(rng):
    w = rng.standard_normal((2, 4, 3))
    return (lambda x, g, b: T.sum(T.mul(T.layer_norm(x, g, b), w))), [
        _leaf(rng.standard_normal((2, 4, 3))), _leaf(1 + 0.1 * rng.standard_normal(4)), _leaf(0.1 * rng.standard_normal(4))]


def _case_conv2d(rng):
    w = rng.standard_normal((2, 3, 4, 3))
    return (lambda x, k, b: T.sum(T.mul(T.conv2d(x, k, b), w))), [
        _leaf(rng.standard_normal((2, 2, 6, 5))), _leaf(rng.standard_normal((3, 2, 3, 3))), _leaf(rng.standard_normal(3))]


def _case_maxpool(rng):
    w = rng.standard_normal((2, 2, 3, 2))
    return (lambda a: T.sum(T.mul(T.maxpool2d(a), w))), [_leaf(_spread(rng, (2, 2, 5, 4)))]


def _case_row_max(rng):
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 4] = False
    w = rng.standard_normal(3)
    return (lambda a: T.sum(T.mul(T.row_max(a, mask), w))), [_leaf(_spread(rng, (3, 5)))]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    return (lambda z: T.cross_entropy(z, labels)), [_leaf(rng.standard_normal((5, 4)))]


def _case_bce(rng):
    labels = rng.integers(0, 2, 6)
    return (lambda z: T.sigmoid_bce(z, labels)), [_leaf(2 * rng.standard_normal(6))]


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add, (4,)),
    "sub": _binary(T.sub, (3, 1)),
    "mul": _binary(T.mul),
    "reciprocal": _unary(T.reciprocal, positive=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "relu": _case_relu,
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "sum": _case_reduce(T.sum, 1),
    "mean": _case_reduce(T.mean, (0, 2)),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "getitem": _case_getitem,
    "slice_axis": _case_slice,
    "take_along_axis": _case_take,
    "matmul": _case_matmul,
    "outer_product": _case_outer,
    "linear": _case_linear,
    "linear_columns": _case_linear_columns,
    "softmax": _case_softmax,
    "softmax_columns": _case_softmax_columns,
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool,
    "row_max": _case_row_max,
    "cross_entropy": _case_cross_entropy,
    "sigmoid_bce": _case_bce,
}


def check_op(name: str, seed: int, h: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    f, inputs = OP_CASES[name](np.random.default_rng([seed, sum(map(ord, name))]))
    return T.grad_check(f, inputs, h=h, tol=tol, name=f"{name}[seed={seed}]")


def run_op_suite(seeds: Iterable[int] = range(10), h: float = 1e-6, tol: float = 1e-4) -> list[GradCheckReport]:
    return [check_op(name, seed, h, tol) for name in OP_CASES for seed in seeds]


@dataclass
class ModelCheck:
    report: GradCheckReport
    n_params: int
    seconds: float
    worst_parameter: str


MODEL_REFINE_STEPS = (1e-5, 1e-6, 1e-7)


def model_grad_check(task: str = "nlvr", seed: int = 0, jitter: float = 0.05, h: float = 1e-4,
                     tol: float = 1e-3, cfg: ModelConfig | None = None) -> ModelCheck:
    """Check d(loss)/d(theta) for every trainable parameter of the tiny model.

    Parameters are perturbed by ``jitter`` Gaussian noise first: zero-initialised
    biases otherwise park ReLUs exactly on their kink. The step is larger than the
    op-level one because some gradients are exactly zero (a bias that shifts every
    softmax logit equally); at h=1e-6 one ulp of the loss already reads as 1e-10.
    Elements whose step straddles a relu, pooling or top-k switch are re-measured
    at ``MODEL_REFINE_STEPS``.
    """
    cfg = cfg or tiny_config(task)
    rng = np.random.default_rng([seed, 31337])
    store = init_params(cfg, seed, np.float64)
    B = 2
    tokens = rng.integers(0, cfg.vocab_size, (B, cfg.n_text))
    mask = np.ones((B, cfg.n_text), dtype=bool)
    mask[1, cfg.n_text - 1 :] = False
    images = [rng.standard_normal((B, cfg.n_visual, cfg.d_raw_v)) for _ in range(cfg.n_images)]
    labels = rng.integers(0, 2 if cfg.task == "nlvr" else cfg.n_classes, B)
    batch = Batch(tokens, mask, images, labels)
    P = store.leaves(requires_grad=True)
    names = store.names(trainable_only=True)
    leaves = [P[n] for n in names]
    for leaf in leaves:
        leaf.data = leaf.data + jitter * rng.standard_normal(leaf.shape)

    def f(*values):
        local = dict(P)
        local.update(zip(names, values))
        return loss(forward(batch, local, cfg).logits, batch.labels, cfg)

    t0 = time.perf_counter()
    report = T.grad_check(f, leaves, h=h, tol=tol, name=f"model[{cfg.task}]", refine_steps=MODEL_REFINE_STEPS)
    seconds = time.perf_counter() - t0
    sizes = np.cumsum([leaf.size for leaf in leaves])
    worst = names[int(np.searchsorted(sizes, int(np.argmax(report.per_element_errors)), side="right"))]
    return ModelCheck(report, int(sizes[-1]), seconds, worst)
