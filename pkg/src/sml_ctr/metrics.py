import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolation, UndefinedMetricError
from .numerics import DTYPE, Matrix

LOGLOSS_EPS = 1e-7


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ContractViolation("labels must be 0 or 1")
    return labels.astype(DTYPE)


def auc(scores: Matrix, labels: np.ndarray) -> float:
    """
    Вероятность того, что случайный положительный пример получит скор выше
    случайного отрицательного; ничьи считаются как 1/2 (средние ранги).
    """
    scores = np.asarray(scores, dtype=DTYPE).ravel()
    labels = _check_labels(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractViolation(f"scores {scores.shape} and labels {labels.shape} differ")
    if not np.isfinite(scores).all():
        raise ContractViolation("scores must be finite")

    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")

    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(p: Matrix, y: np.ndarray, eps: float = LOGLOSS_EPS) -> float:
    """Средняя логистическая потеря; вероятности обрезаются до [eps, 1 - eps]."""
    p = np.asarray(p, dtype=DTYPE).ravel()
    y = _check_labels(y).ravel()
    if p.shape != y.shape:
        raise ContractViolation(f"probabilities {p.shape} and labels {y.shape} differ")
    if p.size == 0:
        raise ContractViolation("logloss of an empty batch")
    if np.any((p < 0) | (p > 1)):
        raise ContractViolation("probabilities must lie in [0, 1]")
    p = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
