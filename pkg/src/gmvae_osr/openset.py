"""Open-set classification on a latent embedding.

Three rejection rules share one calling convention: each produces, per query,
the nearest known class and a score, and a threshold ``tau`` decides between
that class and the unknown label ``C + 1``.

* NC-D: score is the distance to the nearest centroid; known iff ``d < tau``.
* NC-U: score is that distance divided by the mean distance to the other
  centroids; known iff ``U < tau``.
* EVT: score is the Weibull survival probability of the distance to the
  nearest class mean; rejected iff ``score < tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError, FitError
from .metrics import macro_f1
from .serialize import load_bundle, save_bundle

RULES = ("ncd", "ncu", "evt")
REJECT_ABOVE = {"ncd": True, "ncu": True, "evt": False}


# -- k-means ------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: list[float]
    iterations: int


def _sq_dists(points: np.ndarray, centres: np.ndarray) -> np.ndarray:
    d = points[:, None, :] - centres[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [points[rng.integers(len(points))]]
    closest = _sq_dists(points, np.array(centres))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(len(points), p=closest / total)
        else:
            idx = int(np.argmax(closest))
        centres.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centres)


def lloyd(points, k: int, seed: int = 0, max_iters: int = 100, tol: float = 0.0) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    An empty cluster is re-seeded at the point farthest from its current
    centroid.  ``inertia`` records the objective after every assignment step.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k < 1 or len(points) < k:
        raise ContractError(f"k-means needs 1 <= k <= n points, got k={k}, n={len(points)}")
    rng = np.random.default_rng(seed)
    centres = _kmeanspp(points, k, rng)
    inertia: list[float] = []
    labels = np.zeros(len(points), dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centres)
        labels = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centres.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(_sq_dists(points, new)[np.arange(len(points)), labels]))
                new[j] = points[far]
                labels[far] = j
        shift = float(np.max(np.abs(new - centres)))
        centres = new
        if shift <= tol:
            break
    return KMeansResult(centres, labels, inertia, it)


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    return lloyd(points, k, seed, max_iters).centroids


# -- centroids ----------------------------------------------------------------

@dataclass
class CentroidSet:
    """Centroids ordered by (class, subcluster); classes and subclusters are 1-based."""

    classes: np.ndarray
    subclusters: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.subclusters = np.asarray(self.subclusters, dtype=np.int64)
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not (len(self.classes) == len(self.subclusters) == len(self.vectors)):
            raise ContractError("centroid fields must have equal length")
        if len(self.vectors) and not np.all(np.isfinite(self.vectors)):
            raise ContractError("centroids must be finite")
        order = np.lexsort((self.subclusters, self.classes))
        if np.any(order != np.arange(len(order))):
            raise ContractError("centroids must be sorted by (class, subcluster)")

    @property
    def N(self) -> int:
        return len(self.vectors)

    @property
    def num_classes(self) -> int:
        return int(self.classes.max()) if self.N else 0

    def counts(self) -> tuple[int, ...]:
        return tuple(int(np.sum(self.classes == c)) for c in range(1, self.num_classes + 1))

    @classmethod
    def from_groups(cls, groups: Sequence[np.ndarray]) -> "CentroidSet":
        classes, subs, vecs = [], [], []
        for c, g in enumerate(groups, start=1):
            g = np.atleast_2d(g)
            classes += [c] * len(g)
            subs += list(range(1, len(g) + 1))
            vecs.append(g)
        return cls(np.array(classes), np.array(subs), np.concatenate(vecs))


def build_centroids(embeddings, labels, K: Sequence[int], seed: int = 0,
                    max_iters: int = 100) -> CentroidSet:
    """Run k-means with ``K[c-1]`` clusters on each class's embeddings."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    groups = []
    for c, k in enumerate(K, start=1):
        pts = embeddings[labels == c]
        groups.append(kmeans(pts, int(k), seed=seed + c, max_iters=max_iters))
    return CentroidSet.from_groups(groups)


def save_centroids(cs: CentroidSet, path, thresholds: dict | None = None) -> None:
    arrays = {"classes": cs.classes, "subclusters": cs.subclusters, "vectors": cs.vectors}
    save_bundle(path, arrays, {"thresholds": thresholds or {}}, kind="centroids")


def load_centroids(path) -> tuple[CentroidSet, dict]:
    arrays, meta, _ = load_bundle(path, kind="centroids")
    return CentroidSet(**arrays), meta.get("thresholds", {})


# -- rules --------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    label: int
    score: float
    centroid: int = -1


def _distances(embeddings, cs: CentroidSet) -> np.ndarray:
    if cs.N < 1:
        raise ContractError("empty centroid set")
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    return np.sqrt(_sq_dists(e, cs.vectors))


def nearest(embeddings, cs: CentroidSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(centroid index, class, distance)``; ties go to the lowest (c, k)."""
    d = _distances(embeddings, cs)
    idx = np.argmin(d, axis=1)
    return idx, cs.classes[idx], d[np.arange(len(d)), idx]


def uncertainty_scores(embeddings, cs: CentroidSet) -> np.ndarray:
    """Nearest-centroid distance over the mean distance to the other N - 1 centroids."""
    if cs.N < 2:
        raise ContractError("the uncertainty ratio needs at least two centroids")
    d = _distances(embeddings, cs)
    idx = np.argmin(d, axis=1)
    dmin = d[np.arange(len(d)), idx]
    rest = (d.sum(axis=1) - dmin) / (cs.N - 1)
    # rest == 0 only when every centroid sits on the query, where the ratio is taken as 0
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(rest > 0, dmin / np.where(rest > 0, rest, 1.0), 0.0)
    return np.minimum(u, 1.0)


def uncertainty(embedding, cs: CentroidSet) -> float:
    return float(uncertainty_scores(embedding, cs)[0])


def _decide(nearest_class: np.ndarray, scores: np.ndarray, tau: float, rule: str,
            num_classes: int) -> np.ndarray:
    if REJECT_ABOVE[rule]:
        known = scores < tau
    else:
        known = scores >= tau
    return np.where(known, nearest_class, num_classes + 1)


def predict_ncd(embeddings, cs: CentroidSet, tau: float) -> tuple[np.ndarray, np.ndarray]:
    if tau < 0:
        raise ContractError("tau must be non-negative")
    _, cls, dist = nearest(embeddings, cs)
    return _decide(cls, dist, tau, "ncd", cs.num_classes), dist


def predict_ncu(embeddings, cs: CentroidSet, tau: float) -> tuple[np.ndarray, np.ndarray]:
    if tau < 0:
        raise ContractError("tau must be non-negative")
    _, cls, _ = nearest(embeddings, cs)
    u = uncertainty_scores(embeddings, cs)
    return _decide(cls, u, tau, "ncu", cs.num_classes), u


def classify_ncd(embedding, cs: CentroidSet, tau: float) -> Prediction:
    idx, _, dist = nearest(embedding, cs)
    labels, _ = predict_ncd(embedding, cs, tau)
    return Prediction(int(labels[0]), float(dist[0]), int(idx[0]))


def classify_ncu(embedding, cs: CentroidSet, tau: float) -> Prediction:
    idx, _, _ = nearest(embedding, cs)
    labels, u = predict_ncu(embedding, cs, tau)
    return Prediction(int(labels[0]), float(u[0]), int(idx[0]))


# -- EVT baseline -------------------------------------------------------------

@dataclass(frozen=True)
class WeibullFit:
    shape: float
    scale: float
    tail_size: int

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ContractError("Weibull shape and scale must be positive")


def evt_score(d, shape: float, scale: float):
    """Weibull survival ``exp(-(d / scale)^shape)``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise DomainError("distances must be non-negative")
    out = np.exp(-np.power(d / scale, shape))
    return float(out) if out.ndim == 0 else out


def fit_weibull(distances, tail_fraction: float = 1.0, max_iter: int = 100,
                tol: float = 1e-10) -> WeibullFit:
    """Two-parameter maximum-likelihood Weibull fit to the largest distances.

    Newton iteration on the shape profile equation
    ``sum(x^m ln x) / sum(x^m) - 1/m - mean(ln x) = 0``; the scale then
    follows in closed form.  Data are rescaled by their maximum first.
    """
    x = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if len(x) < 10:
        raise ContractError(f"need at least 10 distances, got {len(x)}")
    if not 0.0 < tail_fraction <= 1.0:
        raise ContractError("tail_fraction must lie in (0, 1]")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("distances must be finite and non-negative")
    n_tail = int(math.ceil(tail_fraction * len(x)))
    x = x[len(x) - n_tail:]
    top = x[-1]
    if top <= 0 or np.all(x == x[0]):
        raise FitError("degenerate data: all distances are equal")
    y = np.maximum(x / top, np.finfo(float).tiny)
    ln_y = np.log(y)
    mean_ln = ln_y.mean()
    m = 1.2 / max(np.std(ln_y), 1e-12)  # log-moment starting point
    for _ in range(max_iter):
        ym = y ** m
        s0, s1, s2 = ym.sum(), (ym * ln_y).sum(), (ym * ln_y * ln_y).sum()
        g = s1 / s0 - 1.0 / m - mean_ln
        dg = s2 / s0 - (s1 / s0) ** 2 + 1.0 / (m * m)
        step = g / dg
        m_new = m - step
        while m_new <= 0:
            step *= 0.5
            m_new = m - step
        if abs(m_new - m) <= tol * m:
            m = m_new
            break
        m = m_new
    else:
        raise FitError(f"Weibull shape iteration did not converge in {max_iter} steps")
    scale = top * float(np.mean(y ** m)) ** (1.0 / m)
    return WeibullFit(float(m), scale, n_tail)


@dataclass
class EvtModel:
    """Per-class means plus one Weibull fit per class."""

    means: np.ndarray
    fits: list[WeibullFit] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.means)


def fit_evt(embeddings, labels, num_classes: int, tail_fraction: float = 1.0) -> EvtModel:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    means, fits = [], []
    for c in range(1, num_classes + 1):
        pts = embeddings[labels == c]
        if len(pts) == 0:
            raise ContractError(f"class {c} has no training embeddings")
        mu = pts.mean(axis=0)
        means.append(mu)
        fits.append(fit_weibull(np.linalg.norm(pts - mu, axis=1), tail_fraction))
    return EvtModel(np.array(means), fits)


def predict_evt(embeddings, model: EvtModel, tau: float) -> tuple[np.ndarray, np.ndarray]:
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    d = np.sqrt(_sq_dists(e, model.means))
    idx = np.argmin(d, axis=1)
    dist = d[np.arange(len(d)), idx]
    shapes = np.array([f.shape for f in model.fits])[idx]
    scales = np.array([f.scale for f in model.fits])[idx]
    score = np.exp(-np.power(dist / scales, shapes))
    return _decide(idx + 1, score, tau, "evt", model.num_classes), score


# -- thresholds ---------------------------------------------------------------

def candidate_thresholds(scores) -> np.ndarray:
    """Every distinct decision: the lowest score, midpoints, and just above the highest."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if len(u) == 0:
        raise ContractError("no scores to threshold")
    mids = 0.5 * (u[:-1] + u[1:])
    return np.concatenate([[u[0]], mids, [np.nextafter(u[-1], np.inf)]])


def calibrate_threshold(scores, nearest_class, truths, num_classes: int,
                        rule: str = "ncu") -> tuple[float, float]:
    """Threshold maximising macro-F1 over the ``C + 1`` labels; ties go to the smallest.

    Returns ``(tau, best_f1)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    nearest_class = np.asarray(nearest_class)
    truths = np.asarray(truths)
    if len(scores) == 0:
        raise ContractError("empty validation set")
    if rule not in RULES:
        raise ContractError(f"unknown rule {rule!r}")
    best_tau, best_f1 = None, -1.0
    for tau in candidate_thresholds(scores):
        pred = _decide(nearest_class, scores, tau, rule, num_classes)
        f1 = macro_f1(pred, truths, num_classes + 1)
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau, best_f1


def mean_threshold(taus: Sequence[float]) -> float:
    taus = list(taus)
    if not taus:
        raise ContractError("no thresholds to average")
    return float(math.fsum(taus) / len(taus))
