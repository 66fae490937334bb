"""scikit-learn style wrapper around the training loop.

``X`` is a sequence of examples: :class:`~cmr.data.SyntheticExample` objects or
mappings with ``tokens`` (list of ids) and ``visual`` (one (N^v, d_raw_v) array
per image). Two images per example means the binary nlvr task, one image the
multi-class vqa task.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .checkpoint import Checkpoint
from .config import ModelConfig, OptimConfig, RunConfig, TrainConfig, desk_config
from .data import Dataset, SyntheticExample
from .model import forward, make_batch, predict_scores
from .training import predict_logits, train

TASK_BY_IMAGES = {2: "nlvr", 1: "vqa"}
KIND_BY_TASK = {"nlvr": "nlvr_like", "vqa": "vqa_like"}


def check_examples(X, cfg: ModelConfig | None = None, y=None) -> list[SyntheticExample]:
    """Coerce ``X`` to examples and check shapes against ``cfg`` when given.

    Every example must have the same number of images. Labels come from ``y``
    when given (otherwise 0 placeholders).
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"X must be a sequence of examples, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("X is empty")
    if y is not None and len(y) != len(X):
        raise ValueError(f"X has {len(X)} examples but y has {len(y)} labels")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, SyntheticExample):
            tokens, visual = item.tokens, item.visual
        elif isinstance(item, Mapping):
            if "tokens" not in item or "visual" not in item:
                raise ValueError(f"example {i}: needs 'tokens' and 'visual'")
            tokens, visual = item["tokens"], item["visual"]
        else:
            raise TypeError(f"example {i}: expected SyntheticExample or mapping, got {type(item).__name__}")
        visual = [np.asarray(v, dtype=np.float64) for v in visual]
        if len(visual) not in TASK_BY_IMAGES:
            raise ValueError(f"example {i}: {len(visual)} images; expected 1 (vqa) or 2 (nlvr)")
        for v in visual:
            if v.ndim != 2 or not np.all(np.isfinite(v)):
                raise ValueError(f"example {i}: ROI features must be a finite 2-d array")
            if cfg is not None and v.shape != (cfg.n_visual, cfg.d_raw_v):
                raise ValueError(f"example {i}: ROI features {v.shape} != ({cfg.n_visual}, {cfg.d_raw_v})")
        tokens = [int(t) for t in tokens]
        if cfg is not None and any(t < 0 or t >= cfg.vocab_size for t in tokens):
            raise ValueError(f"example {i}: token outside vocabulary of size {cfg.vocab_size}")
        label = 0 if y is None else int(y[i])
        out.append(SyntheticExample(f"x{i}", "", tokens, visual, label))
    n_images = {len(ex.visual) for ex in out}
    if len(n_images) != 1:
        raise ValueError(f"examples mix image counts {sorted(n_images)}")
    kind = KIND_BY_TASK[TASK_BY_IMAGES[n_images.pop()]]
    for ex in out:
        ex.task = kind
    return out


class CMRClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Cross-modality relevance classifier.

    Parameters
    ----------
    config : ModelConfig or None
        Model sizes; ``None`` uses :func:`~cmr.config.desk_config`. The task
        and class count are set from the data.
    variant : str
        ``"full"`` or one of the ablations (``no_smod``, ``no_xmod``,
        ``no_entity``, ``no_rel``).
    init : Checkpoint, path or None
        Start from a checkpoint's non-head parameters instead of random init.
    """

    def __init__(self, config=None, variant="full", epochs=30, lr=1e-3, weight_decay=0.01,
                 batch_size=32, random_state=0, init=None):
        self.config = config
        self.variant = variant
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state
        self.init = init

    def _run_config(self, task: str, n_classes: int) -> RunConfig:
        base = self.config if self.config is not None else desk_config()
        model = replace(base, task=task, variant=self.variant,
                        n_classes=max(n_classes, 2) if task == "vqa" else base.n_classes)
        return RunConfig(
            model=model,
            optim=OptimConfig(lr=self.lr, weight_decay=self.weight_decay),
            train=TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state),
        ).validate()

    def fit(self, X, y, eval_set=None):
        """Train on ``(X, y)``; ``eval_set=(X_val, y_val)`` is scored after every epoch."""
        y = column_or_1d(np.asarray(y), warn=True)
        check_classification_targets(y)
        examples = check_examples(X, None, None)
        task = TASK_BY_IMAGES[len(examples[0].visual)]
        self.classes_ = np.unique(y)
        if task == "nlvr" and len(self.classes_) > 2:
            raise ValueError(f"two-image (nlvr) data needs binary labels, got {len(self.classes_)} classes")
        if task == "vqa":
            if not np.issubdtype(self.classes_.dtype, np.integer) or self.classes_.min() < 0:
                raise ValueError("one-image (vqa) labels must be non-negative integer class ids")
            self.classes_ = np.arange(int(self.classes_.max()) + 1)
        rc = self._run_config(task, len(self.classes_))
        cfg = rc.model
        encoded = np.searchsorted(self.classes_, y)
        train_set = check_examples(X, cfg, encoded)
        held = []
        if eval_set is not None:
            X_val, y_val = eval_set
            y_val = column_or_1d(np.asarray(y_val))
            if not np.all(np.isin(y_val, self.classes_)):
                raise ValueError("eval_set contains labels not seen in y")
            held = check_examples(X_val, cfg, np.searchsorted(self.classes_, y_val))
        init = self.init
        if init is not None and not isinstance(init, Checkpoint):
            init = Checkpoint.load(init)
        result = train(Dataset(train_set, held), rc, "random" if init is None else init)
        self.config_ = cfg
        self.checkpoint_ = result.checkpoint
        self.history_ = result.trace
        self.transfer_ = result.transfer
        self.epochs_to_threshold_ = result.epochs_to_threshold
        return self

    def _examples(self, X) -> list[SyntheticExample]:
        check_is_fitted(self, "checkpoint_")
        examples = check_examples(X, self.config_)
        if len(examples[0].visual) != self.config_.n_images:
            raise ValueError(f"model expects {self.config_.n_images} images per example")
        return examples

    def decision_function(self, X) -> np.ndarray:
        """Raw logits: (n,) for nlvr, (n, C) for vqa."""
        return predict_logits(self.checkpoint_.params, self.config_, self._examples(X))

    def predict_proba(self, X) -> np.ndarray:
        return predict_scores(self.decision_function(X), self.config_)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """The concatenated relevance feature, (n, n_blocks * d)."""
        examples = self._examples(X)
        P = self.checkpoint_.params.leaves(requires_grad=False)
        chunks = [forward(make_batch(examples[i : i + 128], self.config_), P, self.config_).phi.data
                  for i in range(0, len(examples), 128)]
        return np.concatenate(chunks, axis=0)
