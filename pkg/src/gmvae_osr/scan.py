"""Choosing a class's subcluster count from latent-covering trajectories.

One single-class model is trained per K.  For each consecutive pair (K, K+1)
the covering loss of K is compared with that of K+1 at matched reconstruction
levels; a large drop means the extra subcluster earned its keep.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .model import ModelConfig, init_params
from .serialize import atomic_write_text
from .trainer import TrainConfig, fit

ABS_FLOOR = 0.3
REL_RATIO = 0.75
CURVE_COLUMNS = ("K", "epoch", "reconstruction", "latent_covering")


@dataclass
class CoveringCurve:
    """Per-K trajectories of ``(epoch, reconstruction loss, covering loss)``.

    Reconstruction loss is the negated reconstruction term.  ``diffs[i]`` is
    the mean covering difference from ``K = i + 1`` to ``K = i + 2``.
    """

    curves: dict[int, np.ndarray] = field(default_factory=dict)
    diffs: list[float] = field(default_factory=list)
    recommended: int = 1

    def __post_init__(self):
        ks = sorted(self.curves)
        if ks and ks != list(range(1, len(ks) + 1)):
            raise ContractError("K values must run consecutively from 1")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for K in sorted(self.curves):
            for epoch, rec, cov in self.curves[K]:
                w.writerow([K, int(epoch), repr(float(rec)), repr(float(cov))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"K": sorted(self.curves), "diffs": list(self.diffs),
                "recommended": self.recommended}


def truncate_early(curve: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """Drop the first ``floor(fraction * n)`` epochs, always keeping at least one."""
    if not 0.0 <= fraction < 1.0:
        raise ContractError("truncation fraction must lie in [0, 1)")
    drop = min(int(math.floor(fraction * len(curve))), len(curve) - 1)
    return curve[drop:]


def matched_difference(curve_a: np.ndarray, curve_b: np.ndarray) -> float:
    """Mean of ``cov_a - cov_b`` after pairing each point of ``a`` with the
    point of ``b`` nearest in reconstruction loss (columns: epoch, rec, cov)."""
    if len(curve_a) == 0 or len(curve_b) == 0:
        raise ContractError("cannot compare empty trajectories")
    gaps = np.abs(curve_a[:, 1][:, None] - curve_b[:, 1][None, :])
    nearest = np.argmin(gaps, axis=1)
    return float(np.mean(curve_a[:, 2] - curve_b[nearest, 2]))


def recommend_k(diffs: Sequence[float], abs_floor: float = ABS_FLOOR,
                rel_ratio: float = REL_RATIO) -> int:
    """Largest K whose incoming covering drop is still substantial.

    Moving to ``K = 2`` needs a drop of at least ``abs_floor``; every later
    step needs at least ``max(abs_floor, rel_ratio * previous drop)``.
    Returns 1 when no step qualifies.
    """
    best = 1
    prev = None
    for i, d in enumerate(diffs):
        need = abs_floor if prev is None else max(abs_floor, rel_ratio * prev)
        if d >= need:
            best = i + 2
        prev = d
    return best


def subcluster_scan(x: np.ndarray, k_max: int, train: TrainConfig, val_x: np.ndarray | None = None,
                    dim_z: int = 2, dim_w: int = 2, hidden: Sequence[int] = (64, 64),
                    truncate: float = 0.2, abs_floor: float = ABS_FLOOR,
                    rel_ratio: float = REL_RATIO, model_seed: int | None = None) -> CoveringCurve:
    """Train one single-class model per ``K = 1..k_max`` and compare coverings.

    Every K uses the same initialisation seed and training configuration.
    Trajectories are the per-epoch training averages.
    """
    if k_max < 1:
        raise ContractError(f"k_max must be >= 1, got {k_max}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    val_x = x if val_x is None else np.atleast_2d(np.asarray(val_x, dtype=np.float64))
    seed = train.seed if model_seed is None else model_seed
    curves = {}
    for K in range(1, k_max + 1):
        cfg = ModelConfig(1, (K,), x.shape[1], dim_z=dim_z, dim_w=dim_w, hidden=tuple(hidden))
        params = init_params(cfg, seed)
        result = fit(params, (x, np.ones(len(x), int)), (val_x, np.ones(len(val_x), int)),
                     train)
        curves[K] = np.array([[h["epoch"], -h["reconstruction"], h["latent_covering"]]
                              for h in result.history])
    kept = {K: truncate_early(c, truncate) for K, c in curves.items()}
    diffs = [matched_difference(kept[K], kept[K + 1]) for K in range(1, k_max)]
    return CoveringCurve(kept, diffs, recommend_k(diffs, abs_floor, rel_ratio))


def write_curve(curve: CoveringCurve, path) -> None:
    atomic_write_text(path, curve.to_csv())
