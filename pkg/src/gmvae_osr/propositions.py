"""Numerical checks of two structural facts about the mixture objective.

* Constancy: the constant-network trivial solution has loss ``-E log p_data``
  whatever the subcluster count.
* Gap bound: appending one nearly flat subcluster to a model with K
  subclusters raises the full loss by at most about ``ln((K+1)/K)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SyntheticSpec, gen_synthetic
from .dists import flat_sigma_for_delta
from .errors import ContractError
from .model import GmvaeParams, ModelConfig, add_subcluster_head, init_params, trivial_solution
from .objective import epsilon_k_gap, evaluate, per_sample_loss
from .trainer import TrainConfig, fit

REPORT_SCHEMA = "gmvae-osr-propositions/1"
CONSTANCY_TOL = 1e-9


@dataclass
class PropositionReport:
    prop1: list[dict] = field(default_factory=list)
    prop2: list[dict] = field(default_factory=list)
    prop2_trend: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        rows = self.prop1 + self.prop2
        trend_ok = all(t["shrinking"] for t in self.prop2_trend.values())
        return all(r["pass"] for r in rows) and trend_ok

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "passed": self.passed, "prop1": self.prop1,
                "prop2": self.prop2, "prop2_trend": self.prop2_trend}


def bernoulli_data(mu_x, n_samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mu_x = np.asarray(mu_x, dtype=np.float64)
    return (rng.random((n_samples, len(mu_x))) < mu_x).astype(np.float64)


def data_neg_log_lik(x: np.ndarray, mu_x) -> float:
    mu_x = np.asarray(mu_x, dtype=np.float64)
    ll = x @ np.log(mu_x) + (1.0 - x) @ np.log1p(-mu_x)
    return float(-np.mean(ll))


def check_proposition1(dim_x: int, mu_x, K_list: Sequence[int], n_samples: int = 200,
                       seed: int = 0, dim_z: int = 2, dim_w: int = 2,
                       mc_samples: int = 4) -> list[dict]:
    """Loss of the trivial solution for each K against ``-mean log p_data(x)``.

    Every row passes when its loss matches the data term within 1e-9 and all
    losses agree with each other within 1e-9.
    """
    mu_x = np.asarray(mu_x, dtype=np.float64)
    if mu_x.shape != (dim_x,):
        raise ContractError(f"mu_x must have dimension {dim_x}")
    if not K_list:
        raise ContractError("K_list is empty")
    rows = []
    for K in K_list:
        cfg = ModelConfig(1, (K,), dim_x, dim_z=dim_z, dim_w=dim_w)
        params = trivial_solution(cfg, mu_x)
        x = bernoulli_data(mu_x, n_samples, seed)
        terms = evaluate(params, x, np.ones(n_samples, int), mc_samples,
                         np.random.default_rng([seed, K]))
        loss = float(np.mean(per_sample_loss(terms, "full")))
        target = data_neg_log_lik(x, mu_x)
        rows.append({"K": int(K), "dim_x": int(dim_x), "loss": loss, "target": target,
                     "abs_error": abs(loss - target),
                     "terms": {n: float(np.mean(v)) for n, v in terms.items()}})
    spread = max(r["loss"] for r in rows) - min(r["loss"] for r in rows)
    for r in rows:
        r["spread"] = spread
        r["pass"] = bool(r["abs_error"] <= CONSTANCY_TOL and spread <= CONSTANCY_TOL)
    return rows


def gap_tolerance(delta: float) -> float:
    return max(0.05, 10.0 * delta * abs(math.log(delta)))


def flat_extension(params: GmvaeParams, delta: float, mean=None) -> GmvaeParams:
    """Model with one more subcluster whose density stays below ``delta``."""
    cfg = params.config
    u = flat_sigma_for_delta(delta, cfg.dim_z)
    mean = np.zeros(cfg.dim_z) if mean is None else np.asarray(mean, dtype=np.float64)
    return add_subcluster_head(params, 1, (mean, np.full(cfg.dim_z, 2.0 * math.log(u))))


def check_proposition2(params: GmvaeParams, x, delta_list: Sequence[float],
                       mc_samples: int = 256, seed: int = 0) -> tuple[list[dict], dict]:
    """Empirical gap ``loss(K) - loss(K+1)`` against ``ln(K/(K+1))`` for each delta.

    Returns the per-delta rows and a trend summary recording whether the
    distance to the bound shrinks as delta decreases.
    """
    cfg = params.config
    if cfg.num_classes != 1:
        raise ContractError("the gap check is stated for a single class")
    if cfg.v_prior is not None:
        raise ContractError("the gap check assumes a uniform subcluster prior")
    if not delta_list:
        raise ContractError("delta_list is empty")
    K = cfg.K[0]
    bound = math.log(K / (K + 1))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.ones(len(x), int)
    rows = []
    for delta in delta_list:
        eps, se = epsilon_k_gap(params, flat_extension(params, delta), x, labels,
                                mc_samples, seed=seed, return_se=True)
        tol = gap_tolerance(delta)
        rows.append({"K": K, "delta": float(delta), "epsilon": eps, "se": se, "bound": bound,
                     "tol": tol, "excess": eps - bound, "pass": bool(eps >= bound - tol)})
    ordered = sorted(rows, key=lambda r: -r["delta"])
    gaps = [abs(r["excess"]) for r in ordered]
    trend = {"deltas": [r["delta"] for r in ordered], "abs_excess": gaps,
             "shrinking": bool(all(b < a for a, b in zip(gaps, gaps[1:])))}
    return rows, trend


def desk_model(K: int, epochs: int, seed: int = 0, dim_x: int = 32,
               samples: int = 1000) -> tuple[GmvaeParams, np.ndarray]:
    """A single-class model with ``K`` subclusters, briefly trained on two-mode data.

    Returns the parameters and the training inputs.  ``epochs = 0`` keeps the
    random initialisation.
    """
    spec = SyntheticSpec(classes=1, subclusters=2, unknown=0, dim=dim_x, separation=30.0,
                         samples=samples, val_samples=100, test_samples=1, seed=seed)
    split = gen_synthetic(spec)
    params = init_params(ModelConfig(1, (K,), dim_x, dim_z=2, dim_w=2), seed)
    if epochs > 0:
        fit(params, (split.train_x, split.train_y), (split.val_x, split.val_y),
            TrainConfig(max_epochs=epochs, patience=epochs, lr=3e-3, seed=seed))
    return params, split.train_x
