"""Target-domain evaluation with a frozen extractor.

The extractor is never updated here: features of the target's train split
fit a shallow classifier (KNN or a linear hinge probe) that is scored on the
test split. Also: direct accuracy of the shared head (homogeneous setting),
VD-score, K-shot and reduced-data protocols, and a 2-D PCA projection.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .autodiff import ParamSet, Tape
from .data import Domain
from .errors import (
    DegenerateCovariance,
    EmptyTrainSet,
    InsufficientSamples,
    LengthMismatch,
    MissingBaseline,
    ShapeMismatch,
    SingleClass,
)
from .models import FeatureExtractor, classify

logger = logging.getLogger(__name__)

VD_POINTS = 1000.0


@dataclass
class FrozenFeatures:
    features: np.ndarray
    labels: np.ndarray
    fingerprint: str

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "FrozenFeatures":
        return FrozenFeatures(
            self.features[index], self.labels[index], self.fingerprint
        )


def extract_frozen(
    extractor: FeatureExtractor,
    theta: ParamSet,
    domain: Domain,
    batch_size: int = 256,
) -> FrozenFeatures:
    """Features of every image in ``domain``; theta is read, never written."""
    if len(domain) == 0:
        empty = np.zeros((0, extractor.feature_dim))
        return FrozenFeatures(empty, domain.labels.copy(), theta.fingerprint())
    chunks = []
    for start in range(0, len(domain), batch_size):
        with Tape():
            chunk = extractor(theta, domain.images[start : start + batch_size])
        chunks.append(chunk.value)
    features = np.concatenate(chunks, axis=0)
    if features.shape != (len(domain), extractor.feature_dim):
        raise ShapeMismatch(f"extracted features have shape {features.shape}")
    return FrozenFeatures(features, domain.labels.copy(), theta.fingerprint())


def direct_accuracy(
    extractor: FeatureExtractor,
    theta: ParamSet,
    head: ParamSet,
    domain: Domain,
    batch_size: int = 256,
) -> float:
    """Accuracy of the trained head applied directly to ``domain``."""
    predictions = []
    for start in range(0, len(domain), batch_size):
        with Tape():
            features = extractor(theta, domain.images[start : start + batch_size])
            logits = classify(head, features)
        predictions.append(np.argmax(logits.value, axis=1))
    pred = np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)
    return accuracy(pred, domain.labels)


# ---------------------------------------------------------------------------
# Shallow classifiers
# ---------------------------------------------------------------------------


def knn_predict(train: FrozenFeatures, k: int, queries: np.ndarray) -> np.ndarray:
    """Majority vote of the k nearest (Euclidean) training rows.

    Vote ties go to the label whose voters have the smallest mean distance,
    then to the lowest label id. A k above the number of training rows is
    clamped to that number.
    """
    if len(train) == 0:
        raise EmptyTrainSet("KNN needs at least one training example")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = min(k, len(train))
    distances = cdist(queries, train.features)
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :k]

    predictions = np.empty(queries.shape[0], dtype=np.int64)
    for i, neighbours in enumerate(nearest):
        labels = train.labels[neighbours]
        dist = distances[i, neighbours]
        candidates = np.unique(labels)
        votes = np.array([np.sum(labels == c) for c in candidates])
        tied = candidates[votes == votes.max()]
        if len(tied) == 1:
            predictions[i] = tied[0]
            continue
        mean_dist = np.array([dist[labels == c].mean() for c in tied])
        # tied is sorted, so argmin picks the lowest label among equal means
        predictions[i] = tied[int(np.argmin(mean_dist))]
    return predictions


@dataclass
class LinearProbe:
    """One-vs-rest linear hinge classifier on standardised features."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    classes: np.ndarray


def linear_probe(
    train: FrozenFeatures,
    epochs: int = 100,
    lr: float = 0.1,
    reg: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
) -> LinearProbe:
    """Mini-batch subgradient descent on the L2-regularised OvR hinge loss."""
    if len(train) == 0:
        raise EmptyTrainSet("linear probe needs training examples")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise SingleClass(f"linear probe needs two classes, got {classes.tolist()}")

    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std[std == 0] = 1.0
    x = (train.features - mean) / std
    targets = np.where(train.labels[:, None] == classes[None, :], 1.0, -1.0)

    rng = np.random.default_rng(seed)
    n, dim = x.shape
    weights = np.zeros((dim, len(classes)))
    bias = np.zeros(len(classes))
    for epoch in range(epochs):
        step = lr / np.sqrt(1.0 + epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            index = order[start : start + batch_size]
            xb, tb = x[index], targets[index]
            active = (tb * (xb @ weights + bias) < 1.0) * tb
            grad_w = -xb.T @ active / len(index) + reg * weights
            grad_b = -active.mean(axis=0)
            weights -= step * grad_w
            bias -= step * grad_b
    return LinearProbe(weights, bias, mean, std, classes)


def probe_predict(probe: LinearProbe, rows: np.ndarray) -> np.ndarray:
    x = (np.atleast_2d(rows) - probe.mean) / probe.std
    return probe.classes[np.argmax(x @ probe.weights + probe.bias, axis=1)]


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} labels")
    if pred.size == 0:
        return 0.0
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# Scores and protocols
# ---------------------------------------------------------------------------


def vd_score(errors: Mapping[str, float], baseline: Mapping[str, float]) -> int:
    """Sum over domains of 1000 * (max(0, E_max - E) / E_max)^2 with
    E_max = min(1, 2 * baseline error)."""
    total = 0.0
    for domain, error in errors.items():
        if domain not in baseline:
            raise MissingBaseline(f"no baseline error for domain {domain!r}")
        cap = min(1.0, 2.0 * float(baseline[domain]))
        if cap == 0.0:
            total += VD_POINTS if error == 0.0 else 0.0
            continue
        total += VD_POINTS / cap**2 * max(0.0, cap - float(error)) ** 2
    return int(round(total))


@dataclass
class KShotResult:
    k_shot: Optional[int]
    mean: float
    std: float
    accuracies: List[float]


def _per_class_sample(
    labels: np.ndarray, per_class: int, rng: np.random.Generator
) -> np.ndarray:
    chosen = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if len(members) < per_class:
            raise InsufficientSamples(
                f"class {label} has {len(members)} examples, {per_class} requested"
            )
        chosen.append(rng.choice(members, per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def kshot_eval(
    train: FrozenFeatures,
    test: FrozenFeatures,
    k_shot: Optional[int],
    k_nn: int,
    n_trials: int,
    rng: np.random.Generator,
) -> KShotResult:
    """KNN accuracy using K labelled target examples per class (all when
    ``k_shot`` is None), over ``n_trials`` random draws."""
    accuracies = []
    for _ in range(n_trials):
        if k_shot is None:
            support = train
        else:
            support = train.subset(_per_class_sample(train.labels, k_shot, rng))
        pred = knn_predict(support, k_nn, test.features)
        accuracies.append(accuracy(pred, test.labels))
    return KShotResult(
        k_shot, float(np.mean(accuracies)), float(np.std(accuracies)), accuracies
    )


def kshot_table(
    train: FrozenFeatures,
    test: FrozenFeatures,
    shots: Sequence[int],
    k_nn: int,
    n_trials: int,
    rng: np.random.Generator,
) -> pd.DataFrame:
    rows = []
    for k_shot in shots:
        result = kshot_eval(train, test, k_shot, min(k_nn, k_shot), n_trials, rng)
        rows.append({"k_shot": k_shot, "mean": result.mean, "std": result.std})
    return pd.DataFrame(rows, columns=["k_shot", "mean", "std"])


def fraction_eval(
    train: FrozenFeatures,
    test: FrozenFeatures,
    fractions: Sequence[float],
    k_nn: int,
    rng: np.random.Generator,
    probe_kwargs: Optional[Dict] = None,
) -> pd.DataFrame:
    """KNN and linear-probe accuracy trained on a stratified fraction of the
    target train split."""
    rows = []
    for fraction in fractions:
        chosen = []
        for label in np.unique(train.labels):
            members = rng.permutation(np.flatnonzero(train.labels == label))
            chosen.append(members[: max(1, int(round(len(members) * fraction)))])
        subset = train.subset(np.sort(np.concatenate(chosen)))
        knn = accuracy(knn_predict(subset, k_nn, test.features), test.labels)
        try:
            probe = linear_probe(subset, **(probe_kwargs or {}))
            probe_acc = accuracy(probe_predict(probe, test.features), test.labels)
        except SingleClass:
            probe_acc = float("nan")
        rows.append({"fraction": fraction, "knn": knn, "probe": probe_acc})
    return pd.DataFrame(rows, columns=["fraction", "knn", "probe"])


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class Projection:
    coordinates: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    explained_ratio: float


def _power_iteration(
    matrix: np.ndarray, start: np.ndarray, orthogonal_to: Optional[np.ndarray] = None
):
    vector = start / np.linalg.norm(start)
    for _ in range(10000):
        updated = matrix @ vector
        if orthogonal_to is not None:
            updated -= orthogonal_to * (orthogonal_to @ updated)
        norm = np.linalg.norm(updated)
        if norm == 0.0:
            return vector, 0.0
        updated /= norm
        if np.max(np.abs(updated - vector)) < 1e-13:
            vector = updated
            break
        vector = updated
    return vector, float(vector @ matrix @ vector)


def pca_project(features: np.ndarray) -> Projection:
    """Top-2 principal components by power iteration with deflation."""
    features = np.asarray(features, dtype=np.float64)
    n, dim = features.shape
    if n < 3:
        raise ValueError(f"PCA needs at least three rows, got {n}")
    centred = features - features.mean(axis=0)
    covariance = centred.T @ centred / n
    trace = float(np.trace(covariance))

    start = 1.0 + np.arange(dim) / dim
    first, var1 = _power_iteration(covariance, start)
    deflated = covariance - var1 * np.outer(first, first)
    second_start = start[::-1] - first * (first @ start[::-1])
    if np.linalg.norm(second_start) < 1e-12:
        second_start = np.roll(start, 1) - first * (first @ np.roll(start, 1))
    second, var2 = _power_iteration(deflated, second_start, orthogonal_to=first)
    second -= first * (first @ second)
    second /= np.linalg.norm(second)

    components = np.stack([first, second], axis=1)
    variances = np.array([var1, var2])
    if var2 <= 1e-12 * max(var1, 1.0):
        warnings.warn(
            "feature covariance has rank below two; second component is zero",
            DegenerateCovariance,
        )
        components[:, 1] = 0.0
        variances[1] = 0.0
    for j in range(2):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] *= -1.0
    ratio = float(variances.sum() / trace) if trace > 0 else 0.0
    return Projection(centred @ components, components, variances, ratio)


def pca2(features: np.ndarray) -> np.ndarray:
    return pca_project(features).coordinates


def scatter_frame(features: FrozenFeatures) -> pd.DataFrame:
    coordinates = pca2(features.features)
    return pd.DataFrame(
        {"x": coordinates[:, 0], "y": coordinates[:, 1], "label": features.labels}
    )
