"""Adam with clipping and decoupled decay, the training loop, transfer and ablations."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, structural_diff
from .config import ModelConfig, OptimConfig, RunConfig, VARIANTS, ConfigError
from .data import MODEL_TASK, Dataset, SyntheticExample
from .model import HEAD_PREFIX, forward, init_params, loss, make_batch, predict_labels
from .params import ParameterStore

log = logging.getLogger(__name__)


# ---- optimiser ------------------------------------------------------------------
@dataclass
class OptimizerState:
    config: OptimConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], state: OptimizerState) -> float:
    """Clip, then one bias-corrected Adam update with decoupled weight decay.

    Frozen parameters are skipped and never get moment buffers. Returns the
    pre-clip gradient norm.
    """
    cfg = state.config
    trainable = {n: g for n, g in grads.items() if not store.info[n].frozen}
    for name, g in trainable.items():
        if g.shape != store[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {store[name].shape}")
    trainable, norm = clip_gradients(trainable, cfg.max_grad_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in trainable.items():
        p = store.arrays[name]
        decays = cfg.weight_decay > 0 and (cfg.decay_norm_params or store.info[name].kind != "norm")
        if decays and not cfg.decoupled:
            g = g + cfg.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if decays and cfg.decoupled:
            p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return norm


# ---- evaluation -------------------------------------------------------------------
def iterate_batches(examples, batch_size: int, order=None):
    idx = np.arange(len(examples)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield [examples[i] for i in idx[start : start + batch_size]]


def predict_logits(store: ParameterStore, cfg: ModelConfig, examples, batch_size: int = 128) -> np.ndarray:
    P = store.leaves(requires_grad=False)
    chunks = []
    for chunk in iterate_batches(examples, batch_size):
        chunks.append(forward(make_batch(chunk, cfg), P, cfg).logits.data)
    if not chunks:
        return np.zeros((0,) if cfg.n_outputs == 1 else (0, cfg.n_outputs))
    return np.concatenate(chunks, axis=0)


def accuracy(store: ParameterStore, cfg: ModelConfig, examples, batch_size: int = 128) -> float:
    if not examples:
        return float("nan")
    pred = predict_labels(predict_logits(store, cfg, examples, batch_size), cfg)
    return float(np.mean(pred == np.array([ex.label for ex in examples])))


def compute_gradients(store: ParameterStore, cfg: ModelConfig, batch) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    P = store.leaves(requires_grad=True)
    out = forward(batch, P, cfg)
    value = loss(out.logits, batch.labels, cfg)
    value.backward()
    grads = {}
    for name in store.names(trainable_only=True):
        g = P[name].grad
        grads[name] = np.zeros_like(store[name]) if g is None else g
    return float(value.data), grads, out.logits.data


# ---- transfer ---------------------------------------------------------------------
@dataclass
class TransferReport:
    reinitialized: list[str]
    copied: list[str]
    dropped: list[str]


def init_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig, seed: int, dtype=np.float64) -> tuple[ParameterStore, TransferReport]:
    """Fresh parameters for ``cfg`` with everything except the task head taken from ``ckpt``."""
    mine, theirs = cfg.architecture_key(), ckpt.config.architecture_key()
    if mine != theirs:
        diff = sorted(k for k in mine if mine[k] != theirs.get(k))
        raise CheckpointError("architecture mismatch: " + ", ".join(f"{k}: ckpt={theirs.get(k)!r} model={mine[k]!r}" for k in diff))
    store = init_params(cfg, seed, dtype)
    problems = structural_diff(store, ckpt.params, HEAD_PREFIX)
    if problems:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    copied, reinit = [], []
    for name in store.names():
        if name.startswith(HEAD_PREFIX):
            reinit.append(name)
        else:
            store.arrays[name] = ckpt.params[name].astype(dtype)
            copied.append(name)
    dropped = [n for n in ckpt.params.names() if n not in store]
    return store, TransferReport(reinit, copied, dropped)


# ---- training loop ------------------------------------------------------------------
@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict]
    epochs_to_threshold: int | None
    transfer: TransferReport | None = None
    seconds: float = 0.0

    def summary(self) -> dict:
        last = self.trace[-1] if self.trace else {}
        return {
            "epochs": len(self.trace),
            "final_train_acc": last.get("train_acc"),
            "final_heldout_acc": last.get("heldout_acc"),
            "best_heldout_acc": max((r["heldout_acc"] for r in self.trace), default=None),
            "epochs_to_threshold": self.epochs_to_threshold,
            "seconds": round(self.seconds, 3),
        }


def epochs_to_threshold(heldout: list[float], threshold: float, sustain: int = 2) -> int | None:
    """First 1-based epoch from which held-out accuracy stays >= threshold for ``sustain`` epochs."""
    for e in range(len(heldout) - sustain + 1):
        if all(a >= threshold for a in heldout[e : e + sustain]):
            return e + 1
    return None


def dataset_task(dataset: Dataset) -> str:
    tasks = {ex.task for ex in dataset.train + dataset.heldout}
    if len(tasks) != 1:
        raise ConfigError(f"dataset mixes tasks {sorted(tasks)}")
    return MODEL_TASK[tasks.pop()]


def train(dataset: Dataset, config: RunConfig, init: str | Checkpoint = "random", callback=None) -> TrainResult:
    """Train on ``dataset.train``; track held-out accuracy each epoch.

    ``init`` is ``"random"`` or a :class:`Checkpoint` whose non-head parameters
    seed the model (the pretrain-then-finetune path).
    """
    config.validate()
    task = dataset_task(dataset)
    cfg = config.model
    if cfg.task != task:
        cfg = cfg.for_task(task)
    tc = config.train
    dtype = np.float32 if tc.dtype == "float32" else np.float64
    report = None
    if isinstance(init, Checkpoint):
        store, report = init_from_checkpoint(init, cfg, tc.seed, dtype)
    elif init == "random":
        store = init_params(cfg, tc.seed, dtype)
    else:
        raise ConfigError(f"init must be 'random' or a Checkpoint, got {init!r}")
    _check_examples(dataset.train + dataset.heldout, cfg)
    state = OptimizerState(config.optim)
    rng = np.random.default_rng([tc.seed, 4242])
    trace: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(dataset.train))
        total, correct, seen = 0.0, 0, 0
        for chunk in iterate_batches(dataset.train, tc.batch_size, order):
            batch = make_batch(chunk, cfg)
            value, grads, logits = compute_gradients(store, cfg, batch)
            adam_step(store, grads, state)
            total += value * len(chunk)
            correct += int(np.sum(predict_labels(logits, cfg) == batch.labels))
            seen += len(chunk)
        record = {
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "heldout_acc": accuracy(store, cfg, dataset.heldout),
        }
        trace.append(record)
        log.info("epoch %d loss %.4f train %.3f heldout %.3f", epoch, record["train_loss"], record["train_acc"], record["heldout_acc"])
        if callback is not None:
            callback(record)
    seconds = time.perf_counter() - t0
    ett = epochs_to_threshold([r["heldout_acc"] for r in trace], tc.threshold, tc.sustain)
    provenance = {
        "task": task,
        "init": "random" if report is None else "checkpoint",
        "seed": tc.seed,
        "epochs": tc.epochs,
        "n_train": len(dataset.train),
        "optim": config.to_dict()["optim"],
    }
    ckpt = Checkpoint(cfg, store, provenance)
    return TrainResult(ckpt, trace, ett, report, seconds)


def _check_examples(examples: list[SyntheticExample], cfg: ModelConfig) -> None:
    for ex in examples:
        if len(ex.visual) != cfg.n_images:
            raise ConfigError(f"{ex.id}: {len(ex.visual)} images but task {cfg.task!r} expects {cfg.n_images}")
        for v in ex.visual:
            if v.shape != (cfg.n_visual, cfg.d_raw_v):
                raise ConfigError(f"{ex.id}: ROI features {v.shape} != ({cfg.n_visual}, {cfg.d_raw_v})")
        if any(t < 0 or t >= cfg.vocab_size for t in ex.tokens):
            raise ConfigError(f"{ex.id}: token outside vocabulary of size {cfg.vocab_size}")


def ablate(variant: str, dataset: Dataset, config: RunConfig, callback=None) -> TrainResult:
    """Train the named ablation variant with otherwise identical settings."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = replace(config, model=replace(config.model, variant=variant))
    return train(dataset, cfg, "random", callback)
