"""Entity-bag baseline: logistic regression on averaged entity features.

Each example becomes the mean one-hot token vector concatenated with the mean
ROI feature of every image. Word order, ROI order and any pairing between
entities are discarded, so the baseline sees which entities occur but not how
they relate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import Dataset, SyntheticExample


def bag_features(examples: list[SyntheticExample], vocab_size: int) -> np.ndarray:
    """(n, vocab_size + n_images * d_raw_v) bag-of-entities matrix."""
    rows = []
    for ex in examples:
        onehot = np.zeros(vocab_size)
        if ex.tokens:
            np.add.at(onehot, np.asarray(ex.tokens, dtype=np.intp), 1.0)
            onehot /= len(ex.tokens)
        rows.append(np.concatenate([onehot] + [np.asarray(v, dtype=np.float64).mean(axis=0) for v in ex.visual]))
    return np.stack(rows) if rows else np.zeros((0, vocab_size))


@dataclass
class BaselineResult:
    train_acc: float
    heldout_acc: float
    model: Pipeline


def entity_bag_baseline(dataset: Dataset, vocab_size: int | None = None, C: float = 1.0, seed: int = 0) -> BaselineResult:
    if vocab_size is None:
        vocab_size = dataset.spec.vocab_size if dataset.spec is not None else 1 + max(
            t for ex in dataset.train + dataset.heldout for t in ex.tokens)
    X_tr = bag_features(dataset.train, vocab_size)
    y_tr = np.array([ex.label for ex in dataset.train])
    model = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000, random_state=seed))
    model.fit(X_tr, y_tr)
    X_ho = bag_features(dataset.heldout, vocab_size)
    y_ho = np.array([ex.label for ex in dataset.heldout])
    return BaselineResult(float(model.score(X_tr, y_tr)), float(model.score(X_ho, y_ho)), model)
