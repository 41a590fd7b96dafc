"""
Linear probes: how linearly separable a set of features is, measured with
cross-validated logistic regression.
"""

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler


def _probe() -> Pipeline:
    return make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))


def linear_probe_accuracy(
    features: np.ndarray, labels: np.ndarray, folds: int = 5, seed: int = 0
) -> float:
    """
    Mean stratified k-fold accuracy of a standardised logistic regression.

    Args:
        features (np.ndarray): N x D feature matrix.
        labels (np.ndarray): N class labels.
        folds (int, optional): Requested folds; capped by the smallest class
            count. Defaults to 5.
        seed (int, optional): Shuffle seed for the folds. Defaults to 0.

    Returns:
        float: Accuracy in [0, 1].

    Raises:
        ValueError: If fewer than two classes are present or a class has a
            single sample.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("A linear probe needs at least two classes")
    n_splits = min(folds, int(counts.min()))
    if n_splits < 2:
        raise ValueError("Every class needs at least two samples for a probe")
    probe = _probe()
    splitter = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    scores = cross_val_score(probe, np.asarray(features), labels, cv=splitter)
    return float(scores.mean())


def transfer_probe_accuracy(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
) -> float:
    """Accuracy on a held-out set of a probe fitted on another set, e.g. other subjects."""
    probe = _probe().fit(np.asarray(train_features), np.asarray(train_labels))
    return float(probe.score(np.asarray(test_features), np.asarray(test_labels)))


def spectral_features(samples: np.ndarray) -> np.ndarray:
    """
    Log magnitude spectrum averaged over channels, one row per N x C x T
    window. A fixed, learning-free view of the raw signals.
    """
    magnitude = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64), axis=-1))
    return np.log(magnitude.mean(axis=1) + 1e-8)
