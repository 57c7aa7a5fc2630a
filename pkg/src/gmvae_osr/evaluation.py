"""Open-set evaluation protocol over a growing number Q of unknown classes.

For each Q, validation and test keep every known sample plus the unknown
samples whose unknown id is at most Q (ids follow the dataset's fixed order).
The threshold is tuned on validation and scored on test; afterwards every
algorithm is rescored at the mean of its per-Q optimal thresholds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DatasetSplit
from .errors import ContractError
from .metrics import confusion_matrix, macro_f1
from .model import GmvaeParams, embed
from .openset import (RULES, build_centroids, calibrate_threshold, fit_evt, mean_threshold,
                      nearest, predict_evt, predict_ncd, predict_ncu)
from .serialize import dumps_json

REPORT_SCHEMA = "gmvae-osr-eval/1"
CSV_COLUMNS = ("algorithm", "Q", "threshold_mode", "tau", "macro_f1")


@dataclass
class EvalReport:
    num_classes: int
    K: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "num_classes": self.num_classes, "K": list(self.K),
                "rows": self.rows}

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["algorithm"], r["Q"], r["threshold_mode"], repr(r["tau"]),
                        repr(r["macro_f1"])])
        return buf.getvalue()

    def lookup(self, algorithm: str, Q: int, mode: str = "optimal") -> dict:
        for r in self.rows:
            if (r["algorithm"], r["Q"], r["threshold_mode"]) == (algorithm, Q, mode):
                return r
        raise KeyError((algorithm, Q, mode))


class _Scorer:
    """Nearest class and score for one rule, fitted on training embeddings."""

    def __init__(self, rule: str, train_emb, train_y, C: int, K: Sequence[int], seed: int,
                 tail_fraction: float):
        self.rule = rule
        if rule == "evt":
            self.evt = fit_evt(train_emb, train_y, C, tail_fraction)
        else:
            self.centroids = build_centroids(train_emb, train_y, K, seed=seed)

    def scores(self, emb) -> tuple[np.ndarray, np.ndarray]:
        if self.rule == "evt":
            _, s = predict_evt(emb, self.evt, 0.0)
            d = ((emb[:, None, :] - self.evt.means[None, :, :]) ** 2).sum(axis=-1)
            return np.argmin(d, axis=1) + 1, s
        _, cls, _ = nearest(emb, self.centroids)
        predict = predict_ncd if self.rule == "ncd" else predict_ncu
        return cls, predict(emb, self.centroids, 0.0)[1]

    def predict(self, emb, tau: float) -> np.ndarray:
        if self.rule == "evt":
            return predict_evt(emb, self.evt, tau)[0]
        predict = predict_ncd if self.rule == "ncd" else predict_ncu
        return predict(emb, self.centroids, tau)[0]


def _subset(emb, y, unknown, Q: int):
    keep = unknown <= Q
    return emb[keep], y[keep]


def evaluate_embeddings(train_emb, train_y, val_emb, val_y, val_unknown, test_emb, test_y,
                        test_unknown, num_classes: int, K: Sequence[int],
                        algorithms: Sequence[str] = ("ncd", "ncu"), Q_list: Sequence[int] = (0,),
                        seed: int = 0, tail_fraction: float = 1.0) -> EvalReport:
    """The protocol on precomputed embeddings; unknown ids are 0 for known samples."""
    C = num_classes
    val_unknown, test_unknown = np.asarray(val_unknown), np.asarray(test_unknown)
    available = int(max(val_unknown.max(initial=0), test_unknown.max(initial=0)))
    Q_list = [int(q) for q in Q_list]
    if not Q_list or any(b <= a for a, b in zip(Q_list, Q_list[1:])):
        raise ContractError("Q_list must be non-empty and strictly increasing")
    if Q_list[0] < 0 or Q_list[-1] > available:
        raise ContractError(f"Q must lie in 0..{available}, got {Q_list}")
    bad = set(algorithms) - set(RULES)
    if bad or not algorithms:
        raise ContractError(f"algorithms must be drawn from {RULES}, got {list(algorithms)}")
    train_emb = np.asarray(train_emb, dtype=np.float64)
    val_emb, test_emb = np.asarray(val_emb, float), np.asarray(test_emb, float)
    val_y, test_y = np.asarray(val_y), np.asarray(test_y)

    report = EvalReport(C, tuple(int(k) for k in K))
    for algo in algorithms:
        scorer = _Scorer(algo, train_emb, train_y, C, K, seed, tail_fraction)
        taus = []
        for Q in Q_list:
            ve, vy = _subset(val_emb, val_y, val_unknown, Q)
            te, ty = _subset(test_emb, test_y, test_unknown, Q)
            cls, s = scorer.scores(ve)
            tau, val_f1 = calibrate_threshold(s, cls, vy, C, algo)
            taus.append(tau)
            pred = scorer.predict(te, tau)
            report.rows.append(_row(algo, Q, "optimal", tau, pred, ty, C, val_f1))
        tau_bar = mean_threshold(taus)
        for Q in Q_list:
            ve, vy = _subset(val_emb, val_y, val_unknown, Q)
            te, ty = _subset(test_emb, test_y, test_unknown, Q)
            val_f1 = macro_f1(scorer.predict(ve, tau_bar), vy, C + 1)
            pred = scorer.predict(te, tau_bar)
            report.rows.append(_row(algo, Q, "mean", tau_bar, pred, ty, C, val_f1))
    return report


def _row(algo, Q, mode, tau, pred, truth, C, val_f1) -> dict:
    cm = confusion_matrix(pred, truth, C + 1)
    return {"algorithm": algo, "Q": int(Q), "threshold_mode": mode, "tau": float(tau),
            "macro_f1": macro_f1(pred, truth, C + 1), "val_macro_f1": float(val_f1),
            "confusion": cm.tolist()}


def run_openset_eval(params: GmvaeParams, split: DatasetSplit,
                     algorithms: Sequence[str] = ("ncd", "ncu"), Q_list: Sequence[int] | None = None,
                     K: Sequence[int] | None = None, seed: int = 0,
                     tail_fraction: float = 1.0) -> EvalReport:
    """Embed with the mean of q(z|x) and run the protocol.

    ``K`` defaults to the model's subcluster counts; ``Q_list`` defaults to
    ``0..`` the number of unknown classes in the split.
    """
    if split.num_classes != params.config.num_classes:
        raise ContractError("dataset and model disagree on the number of classes")
    K = params.config.K if K is None else tuple(K)
    Q_list = range(split.num_unknown + 1) if Q_list is None else Q_list
    return evaluate_embeddings(embed(params, split.train_x), split.train_y,
                               embed(params, split.val_x), split.val_y, split.val_unknown,
                               embed(params, split.test_x), split.test_y, split.test_unknown,
                               split.num_classes, K, algorithms, Q_list, seed, tail_fraction)
