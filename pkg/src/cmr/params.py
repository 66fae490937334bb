"""Named parameter arrays with freezing metadata and seeded initialisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

KINDS = ("weight", "bias", "norm", "embedding")


@dataclass(frozen=True)
class ParamInfo:
    kind: str
    frozen: bool = False


class ParameterStore:
    """Ordered mapping of parameter name -> numpy array.

    Frozen arrays are never handed to the optimiser; they still become (constant)
    leaves of the forward graph.
    """

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.info: dict[str, ParamInfo] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __len__(self) -> int:
        return len(self.arrays)

    def add(self, name: str, array: np.ndarray, kind: str, frozen: bool = False) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        if kind not in KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        self.arrays[name] = np.asarray(array)
        self.info[name] = ParamInfo(kind, frozen)

    def names(self, trainable_only: bool = False) -> list[str]:
        names = sorted(self.arrays)
        if trainable_only:
            names = [n for n in names if not self.info[n].frozen]
        return names

    def frozen_names(self) -> list[str]:
        return [n for n in sorted(self.arrays) if self.info[n].frozen]

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Wrap each array as a graph leaf; frozen arrays never require grad."""
        out = {}
        for name, arr in self.arrays.items():
            leaf = Tensor.__new__(Tensor)
            leaf.data = arr
            leaf.grad = None
            leaf.name = name
            leaf.op = "leaf"
            leaf._parents = ()
            leaf._backward = None
            leaf.requires_grad = requires_grad and not self.info[name].frozen
            out[name] = leaf
        return out

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore()
        for name in self.arrays:
            other.add(name, self.arrays[name].astype(dtype), self.info[name].kind, self.info[name].frozen)
        return other

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name in self.arrays:
            other.add(name, self.arrays[name].copy(), self.info[name].kind, self.info[name].frozen)
        return other

    def n_trainable(self) -> int:
        return int(np.sum([self.arrays[n].size for n in self.names(trainable_only=True)]))


class Initializer:
    """Seeded Xavier-uniform initialisation into a :class:`ParameterStore`."""

    def __init__(self, store: ParameterStore, seed: int, dtype=np.float64):
        self.store = store
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int | None = None, fan_out: int | None = None):
        fan_in = fan_in if fan_in is not None else shape[-1]
        fan_out = fan_out if fan_out is not None else shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.store.add(name, self.rng.uniform(-limit, limit, size=shape).astype(self.dtype), "weight")

    def bias(self, name: str, size: int):
        self.store.add(name, np.zeros(size, dtype=self.dtype), "bias")

    def norm(self, prefix: str, size: int):
        self.store.add(prefix + ".gain", np.ones(size, dtype=self.dtype), "norm")
        self.store.add(prefix + ".bias", np.zeros(size, dtype=self.dtype), "norm")

    def embedding(self, name: str, shape: tuple[int, ...], std: float, frozen: bool = False, rng=None):
        rng = rng if rng is not None else self.rng
        self.store.add(name, (std * rng.standard_normal(shape)).astype(self.dtype), "embedding", frozen=frozen)

    def linear(self, prefix: str, n_out: int, n_in: int):
        self.weight(prefix + ".W", (n_out, n_in))
        self.bias(prefix + ".b", n_out)
