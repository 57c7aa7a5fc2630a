"""Classification metrics over 1-based labels."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def confusion_matrix(predictions, truths, num_labels: int) -> np.ndarray:
    """``M[t-1, p-1]`` counts samples with truth ``t`` predicted as ``p``."""
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ContractError(f"{p.size} predictions but {t.size} truths")
    if p.size and (min(p.min(), t.min()) < 1 or max(p.max(), t.max()) > num_labels):
        raise ContractError(f"labels must lie in 1..{num_labels}")
    m = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(m, (t - 1, p - 1), 1)
    return m


def per_label_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per label; NaN for labels that are neither predicted nor present."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    denom = predicted + actual
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1), np.nan)


def macro_f1(predictions, truths, num_labels: int) -> float:
    """Unweighted mean of per-label F1, skipping labels absent from both sides."""
    f1 = per_label_f1(confusion_matrix(predictions, truths, num_labels))
    seen = ~np.isnan(f1)
    if not seen.any():
        raise ContractError("no labels to score")
    return float(f1[seen].mean())
