"""Evaluation protocols: linear probing on a frozen encoder and full
fine-tuning, plus embedding extraction and 2-D projection export."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import KNeighborsClassifier
from torch import nn

from .data import Dataset
from .errors import ConfigurationError, InputError
from .trainer import Checkpoint, params_digest

BUILTIN_CLASSIFIERS = ("softmax", "knn", "logistic_regression")


def extract_embeddings(model: nn.Module, ds: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic no-augmentation forward pass; rows follow dataset order."""
    ds.validate()
    model.eval()
    images = ds.images().astype(np.float32)[:, None, :, :]
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = model(torch.from_numpy(images[start:start + batch_size]))
            chunks.append(out.numpy().astype(np.float64))
    features = np.concatenate(chunks, axis=0)
    if not np.isfinite(features).all():
        raise InputError("encoder produced non-finite embeddings")
    return features, ds.labels()


# ---------------------------------------------------------------------------
# classifiers

class SoftmaxProbe:
    """Single linear layer trained with Adam on fixed features."""

    identifier = "softmax"

    def __init__(self, lr: float = 0.03, epochs: int = 200, batch_size: int = 256, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self._layer = None

    def fit(self, features: np.ndarray, labels: np.ndarray):
        torch.manual_seed(self.seed)
        x = torch.from_numpy(np.asarray(features, dtype=np.float32))
        y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
        self._layer = nn.Linear(x.shape[1], int(y.max()) + 1)
        opt = torch.optim.Adam(self._layer.parameters(), lr=self.lr)
        for epoch in range(self.epochs):
            order = np.random.default_rng(self.seed + epoch).permutation(len(x))
            for start in range(0, len(x), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = nn.functional.cross_entropy(self._layer(x[idx]), y[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        return self

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(features, dtype=np.float32))
        with torch.no_grad():
            return self._layer(x).argmax(dim=1).numpy()


class KnnProbe:
    """k nearest neighbors on per-feature standardized embeddings."""

    identifier = "knn"

    def __init__(self, k: int = 5, **_unused):
        self.k = k
        self._scaler = None
        self._knn = None

    def _standardize(self, features):
        return (features - self._scaler[0]) / self._scaler[1]

    def fit(self, features, labels):
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0] = 1.0
        self._scaler = (mean, std)
        self._knn = KNeighborsClassifier(n_neighbors=min(self.k, len(features)), metric="euclidean")
        self._knn.fit(self._standardize(features), labels)
        return self

    def predict(self, features):
        return self._knn.predict(self._standardize(features))


class LogisticProbe:
    """Multinomial L2 logistic regression (lambda=1e-3) to tolerance 1e-6."""

    identifier = "logistic_regression"

    def __init__(self, l2: float = 1e-3, tol: float = 1e-6, **_unused):
        self.l2 = l2
        self.tol = tol
        self._clf = None

    def fit(self, features, labels):
        self._clf = LogisticRegression(C=1.0 / self.l2, tol=self.tol, max_iter=10000)
        self._clf.fit(features, labels)
        return self

    def predict(self, features):
        return self._clf.predict(features)


_CLASSIFIER_FACTORIES: dict[str, Callable[..., object]] = {
    "softmax": SoftmaxProbe,
    "knn": KnnProbe,
    "logistic_regression": LogisticProbe,
}


def register_classifier(name: str, factory: Callable[..., object]) -> None:
    """Adapter slot for extra classifiers (e.g. SVM or random forest wrappers).

    The factory must build objects with fit(features, labels) and
    predict(features); built-in names cannot be overridden.
    """
    if name in BUILTIN_CLASSIFIERS:
        raise ConfigurationError(f"cannot override built-in classifier {name!r}")
    _CLASSIFIER_FACTORIES[name] = factory


def make_classifier(name: str, **kwargs):
    if name not in _CLASSIFIER_FACTORIES:
        raise ConfigurationError(
            f"unknown classifier {name!r}; built-ins: {list(BUILTIN_CLASSIFIERS)}, "
            f"registered: {sorted(set(_CLASSIFIER_FACTORIES) - set(BUILTIN_CLASSIFIERS))}")
    return _CLASSIFIER_FACTORIES[name](**kwargs)


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    protocol: str
    classifier: str
    overall_accuracy: float
    per_class_accuracy: list[float]
    confusion_matrix: list[list[int]]
    class_names: list[str]
    config_digest: str
    checkpoint_digest: str
    warnings: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def save_confusion_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(self.class_names))
            for name, row in zip(self.class_names, self.confusion_matrix):
                writer.writerow([name] + list(row))

    def summary_row(self) -> dict:
        return {"protocol": self.protocol, "classifier": self.classifier,
                "overall_accuracy": self.overall_accuracy,
                "checkpoint_digest": self.checkpoint_digest,
                "config_digest": self.config_digest}


def config_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def confusion_and_accuracy(true_labels, predicted, num_classes: int):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        confusion[int(t), int(p)] += 1
    total = confusion.sum()
    overall = float(np.trace(confusion)) / float(total)
    row_sums = confusion.sum(axis=1)
    per_class = [float(confusion[c, c]) / row_sums[c] if row_sums[c] else 0.0
                 for c in range(num_classes)]
    return confusion, overall, per_class


def _missing_class_warnings(train: Dataset, test: Dataset) -> list[str]:
    train_classes = set(int(l) for l in train.labels())
    notes = []
    for c in sorted(set(int(l) for l in test.labels()) - train_classes):
        notes.append(f"class {test.class_names[c]!r} present in test but absent in train")
    return notes


def linear_evaluate(ckpt: Checkpoint, train: Dataset, test: Dataset,
                    classifier: str = "logistic_regression", *, lr: float = 0.03,
                    epochs: int = 200, batch_size: int = 256, seed: int = 0,
                    prefer_ema: bool = True, classifier_kwargs: dict | None = None) -> EvalReport:
    """Fit a classifier on frozen-encoder embeddings and score the test set.

    The backbone is never updated; the softmax probe consumes the lr, epochs
    and batch_size settings, the other classifiers ignore them.
    """
    model = ckpt.to_model(prefer_ema=prefer_ema)
    before = params_digest(dict(model.state_dict()))
    train_x, train_y = extract_embeddings(model, train)
    test_x, test_y = extract_embeddings(model, test)

    kwargs = dict(classifier_kwargs or {})
    if classifier == "softmax":
        kwargs.setdefault("lr", lr)
        kwargs.setdefault("epochs", epochs)
        kwargs.setdefault("batch_size", batch_size)
        kwargs.setdefault("seed", seed)
    clf = make_classifier(classifier, **kwargs)
    clf.fit(train_x, train_y)
    predicted = clf.predict(test_x)

    after = params_digest(dict(model.state_dict()))
    if before != after:
        raise InputError("backbone parameters changed during linear evaluation")

    confusion, overall, per_class = confusion_and_accuracy(test_y, predicted, train.num_classes)
    return EvalReport(
        protocol="linear",
        classifier=classifier,
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        confusion_matrix=confusion.tolist(),
        class_names=list(test.class_names),
        config_digest=config_digest({"classifier": classifier, "lr": lr, "epochs": epochs,
                                     "batch_size": batch_size, "seed": seed,
                                     "prefer_ema": prefer_ema, **{k: str(v) for k, v in kwargs.items()}}),
        checkpoint_digest=ckpt.digest(prefer_ema=prefer_ema),
        warnings=_missing_class_warnings(train, test),
        extras={"backbone_digest": before, "num_train": len(train), "num_test": len(test)},
    )


def fine_tune(ckpt: Checkpoint, train: Dataset, test: Dataset, *, lr: float = 0.03,
              epochs: int = 200, batch_size: int = 256, seed: int = 0,
              prefer_ema: bool = True, select: str = "best",
              augment_cfg=None) -> EvalReport:
    """Supervised training of every layer from the pretrained weights.

    Tracks test accuracy per epoch and reports the best epoch by default;
    ``select`` may also be "final" or "stable" (the low-median of the last
    10 epochs, for noisy-label runs where the peak is not trustworthy).
    Training augmentation is off unless an AugmentConfig is passed.
    """
    if lr <= 0:
        raise ConfigurationError(f"lr must be > 0, got {lr}")
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    if select not in ("best", "final", "stable"):
        raise ConfigurationError(f"select must be best/final/stable, got {select!r}")
    train.validate()
    test.validate()

    torch.manual_seed(seed)
    model = ckpt.to_model(prefer_ema=prefer_ema)
    model.train()
    head = nn.Linear(model.embedding_dim, train.num_classes)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=lr)

    x_train = torch.from_numpy(train.images().astype(np.float32)[:, None])
    y_train = torch.from_numpy(train.labels())
    test_x_np = test.images().astype(np.float32)[:, None]
    test_y = test.labels()

    history = []  # (accuracy, confusion, per_class) per epoch
    for epoch in range(epochs):
        model.train()
        rng = np.random.default_rng(seed + 7919 * (epoch + 1))
        order = rng.permutation(len(x_train))
        if augment_cfg is not None:
            from .augment import apply_pipeline
            stack = np.stack([apply_pipeline(s.image, augment_cfg, rng) for s in train.items])
            x_train = torch.from_numpy(stack.astype(np.float32)[:, None])
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = head(model(x_train[idx]))
            loss = nn.functional.cross_entropy(logits, y_train[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        model.eval()
        preds = []
        with torch.no_grad():
            for start in range(0, len(test_x_np), 256):
                logits = head(model(torch.from_numpy(test_x_np[start:start + 256])))
                preds.append(logits.argmax(dim=1).numpy())
        confusion, overall, per_class = confusion_and_accuracy(
            test_y, np.concatenate(preds), train.num_classes)
        history.append((overall, confusion, per_class))

    accuracies = [h[0] for h in history]
    best_epoch = int(np.argmax(accuracies))
    tail = list(range(max(0, epochs - 10), epochs))
    stable_epoch = tail[int(np.argsort([accuracies[i] for i in tail], kind="stable")[(len(tail) - 1) // 2])]
    selected = {"best": best_epoch, "final": epochs - 1, "stable": stable_epoch}[select]
    overall, confusion, per_class = history[selected]

    return EvalReport(
        protocol="fine_tuned",
        classifier="softmax",
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        confusion_matrix=confusion.tolist(),
        class_names=list(test.class_names),
        config_digest=config_digest({"lr": lr, "epochs": epochs, "batch_size": batch_size,
                                     "seed": seed, "prefer_ema": prefer_ema, "select": select}),
        checkpoint_digest=ckpt.digest(prefer_ema=prefer_ema),
        warnings=_missing_class_warnings(train, test),
        extras={"best_accuracy": float(accuracies[best_epoch]),
                "final_accuracy": float(accuracies[-1]),
                "stable_accuracy": float(accuracies[stable_epoch]),
                "selected_epoch": selected},
    )


# ---------------------------------------------------------------------------
# 2-D projection

def project_2d(features: np.ndarray) -> np.ndarray:
    """Project onto the top-2 principal components.

    Mean-centered PCA with a deterministic sign convention: the largest-
    magnitude loading of each component is positive. Degenerate components
    (zero variance) yield zero coordinates and a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"expected an (n >= 2, d) matrix, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((x.shape[0], 2))
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    n_degenerate = 0
    for j in range(2):
        if j >= s.size or s[j] <= tol:
            n_degenerate += 1
            continue
        comp = vt[j]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        coords[:, j] = centered @ comp
    if n_degenerate:
        warnings.warn(f"{n_degenerate} of 2 principal components are degenerate; "
                      "their coordinates are zero", RuntimeWarning, stacklevel=2)
    return coords


def write_projection_csv(path, ds: Dataset, coords: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "x", "y", "class"])
        for sample, (px, py) in zip(ds.items, coords):
            writer.writerow([sample.sample_id, repr(float(px)), repr(float(py)),
                             ds.class_names[sample.label]])
