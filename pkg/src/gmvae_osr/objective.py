"""Evidence lower bound of the class-conditioned mixture model and derived losses.

The bound splits into four named terms (all per-sample averages, in nats)::

    ELBO = reconstruction - latent_covering - w_prior - v_prior

Monte-Carlo draws enter only through injected standard-normal noise, so every
estimate here is a deterministic, differentiable function of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dists import (DiagGaussian, bernoulli_log_lik, gaussian_log_pdf, kl_to_std_normal,
                    sample_reparameterized)
from .errors import ContractError, DimensionError
from .model import (GmvaeParams, decode, encode_w, encode_z, one_hot, subcluster_components,
                    v_log_posterior)
from .tensor import Tensor

OBJECTIVES = ("full", "no_vprior", "neg_vprior")
TERM_NAMES = ("reconstruction", "latent_covering", "w_prior", "v_prior")


@dataclass
class ElboTerms:
    reconstruction: Tensor | float
    latent_covering: Tensor | float
    w_prior: Tensor | float
    v_prior: Tensor | float

    def values(self) -> dict[str, float]:
        return {n: float(_val(getattr(self, n))) for n in TERM_NAMES}


def _val(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def loss_full(terms: ElboTerms):
    return -(terms.reconstruction - terms.latent_covering - terms.w_prior - terms.v_prior)


def loss_no_vprior(terms: ElboTerms):
    return -(terms.reconstruction - terms.latent_covering - terms.w_prior)


def loss_neg_vprior(terms: ElboTerms):
    """Variant that rewards, rather than penalises, a peaked subcluster posterior."""
    return -(terms.reconstruction - terms.latent_covering - terms.w_prior + terms.v_prior)


_LOSSES = {"full": loss_full, "no_vprior": loss_no_vprior, "neg_vprior": loss_neg_vprior}


def loss_for(terms: ElboTerms, objective: str):
    try:
        return _LOSSES[objective](terms)
    except KeyError:
        raise ContractError(f"objective must be one of {OBJECTIVES}, got {objective!r}") from None


def draw_noise(rng: np.random.Generator, mc_samples: int, batch: int, dim_z: int, dim_w: int):
    """Standard-normal noise arrays of shape (mc_samples, batch, dim)."""
    return (rng.standard_normal((mc_samples, batch, dim_z)),
            rng.standard_normal((mc_samples, batch, dim_w)))


def _flatten_noise(noise, S: int, B: int, d: int) -> np.ndarray:
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.ndim == 2 and B == 1:
        noise = noise[:, None, :]
    if noise.shape != (S, B, d):
        raise DimensionError(f"noise must have shape {(S, B, d)}, got {noise.shape}")
    return noise.reshape(S * B, d)


def per_draw_terms(params: GmvaeParams, x, labels, z_noise, w_noise,
                   mc_samples: int | None = None) -> dict[str, Tensor]:
    """Row-level terms for every (draw, sample) pair, rows ordered draw-major.

    Returns tensors ``reconstruction``, ``latent_covering`` and ``v_prior`` of
    length ``S * B`` and ``w_prior`` of length ``B``.
    """
    cfg = params.config
    x = T.as_tensor(np.atleast_2d(x.data if isinstance(x, Tensor) else np.asarray(x, float)))
    B = x.shape[0]
    labels = np.atleast_1d(np.asarray(labels)).astype(int)
    if labels.shape != (B,):
        raise DimensionError(f"{B} samples but {labels.size} labels")
    zn = np.asarray(z_noise.data if isinstance(z_noise, Tensor) else z_noise)
    S = zn.shape[0]
    if mc_samples is not None and mc_samples != S:
        raise ContractError(f"mc_samples={mc_samples} but noise carries {S} draws")
    if S < 1:
        raise ContractError("need at least one Monte-Carlo draw")
    zn = _flatten_noise(zn, S, B, cfg.dim_z)
    wn = _flatten_noise(w_noise, S, B, cfg.dim_w)

    q_z = encode_z(params, x)
    q_w = encode_w(params, x, one_hot(labels, cfg.num_classes))
    q_z_rep = DiagGaussian(T.tile_rows(q_z.mean, S), T.tile_rows(q_z.logvar, S))
    q_w_rep = DiagGaussian(T.tile_rows(q_w.mean, S), T.tile_rows(q_w.logvar, S))
    z = sample_reparameterized(q_z_rep, zn)
    w = sample_reparameterized(q_w_rep, wn)

    x_rep = T.tile_rows(x, S) if S > 1 else x
    recon = bernoulli_log_lik(x_rep, decode(params, z))
    log_qz = gaussian_log_pdf(z, q_z_rep)

    rows_labels = np.tile(labels, S)
    cross_parts, kl_parts, order = [], [], []
    for c in np.unique(rows_labels):
        rows = np.nonzero(rows_labels == c)[0]
        zc, wc = z[rows], w[rows]
        comps = subcluster_components(params, wc, int(c))
        log_post, log_pdfs = v_log_posterior(params, zc, wc, int(c), components=comps)
        post = T.exp(log_post)
        log_prior = np.broadcast_to(cfg.log_prior(int(c)), log_post.shape)
        cross_parts.append(T.tsum(post * log_pdfs, axis=1))
        kl_parts.append(T.tsum(post * (log_post - log_prior), axis=1))
        order.append(rows)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    cross = T.concat(cross_parts, axis=0)[inverse]
    v_kl = T.concat(kl_parts, axis=0)[inverse]
    return {
        "reconstruction": recon,
        "latent_covering": log_qz - cross,
        "w_prior": kl_to_std_normal(q_w),
        "v_prior": v_kl,
    }


def elbo_terms(params: GmvaeParams, x, y, z_noise, w_noise,
               mc_samples: int | None = None) -> ElboTerms:
    """Monte-Carlo estimate of the four terms, averaged over draws and samples.

    ``y`` holds 1-based class labels.  The w-prior term uses its closed form.
    """
    rows = per_draw_terms(params, x, y, z_noise, w_noise, mc_samples)
    return ElboTerms(*(T.tmean(rows[n]) for n in TERM_NAMES))


def elbo_samples(params: GmvaeParams, x, labels, z_noise, w_noise) -> np.ndarray:
    """Array (S, B) of single-draw ELBO values; their mean over draws estimates the ELBO."""
    rows = per_draw_terms(params, x, labels, z_noise, w_noise)
    B = len(rows["w_prior"].data)
    S = len(rows["reconstruction"].data) // B
    total = (rows["reconstruction"].data - rows["latent_covering"].data - rows["v_prior"].data)
    return total.reshape(S, B) - rows["w_prior"].data[None, :]


def evaluate(params: GmvaeParams, x, labels, mc_samples: int, rng: np.random.Generator,
             chunk: int = 256) -> dict[str, np.ndarray]:
    """Per-sample Monte-Carlo means of each term over a whole dataset, without a tape.

    Returns arrays of length ``len(x)`` keyed by term name.  Noise is drawn in
    chunk order from ``rng``, so results depend only on the seed and ``chunk``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels)).astype(int)
    cfg = params.config
    out = {n: [] for n in TERM_NAMES}
    for i in range(0, len(x), chunk):
        xb, yb = x[i:i + chunk], labels[i:i + chunk]
        zn, wn = draw_noise(rng, mc_samples, len(xb), cfg.dim_z, cfg.dim_w)
        rows = per_draw_terms(params, xb, yb, zn, wn)
        for n in TERM_NAMES:
            v = rows[n].data
            out[n].append(v if n == "w_prior" else v.reshape(mc_samples, len(xb)).mean(axis=0))
    return {n: np.concatenate(v) if v else np.zeros(0) for n, v in out.items()}


def per_sample_loss(terms: dict[str, np.ndarray], objective: str) -> np.ndarray:
    return loss_for(ElboTerms(*(terms[n] for n in TERM_NAMES)), objective)


def _check_pair(params_K: GmvaeParams, params_K1: GmvaeParams) -> int:
    a, b = params_K.config, params_K1.config
    diff = [c for c in range(1, a.num_classes + 1) if a.K[c - 1] != b.K[c - 1]]
    same_rest = (a.num_classes == b.num_classes and a.dim_x == b.dim_x and a.dim_z == b.dim_z
                 and a.dim_w == b.dim_w and len(diff) == 1
                 and b.K[diff[0] - 1] == a.K[diff[0] - 1] + 1)
    if not same_rest:
        raise ContractError("the second model must add exactly one subcluster to one class")
    for name in ("phi_z", "phi_w", "theta"):
        pa = getattr(params_K, name).named_parameters()
        pb = dict(getattr(params_K1, name).named_parameters())
        for pname, p in pa:
            if pname not in pb or not np.array_equal(p.data, pb[pname].data):
                raise ContractError(f"networks differ outside beta ({name}.{pname})")
    if len(params_K.beta.trunk) != len(params_K1.beta.trunk):
        raise ContractError("beta trunks differ")
    for la, lb in zip(params_K.beta.trunk, params_K1.beta.trunk):
        if not (np.array_equal(la.weight.data, lb.weight.data)
                and np.array_equal(la.bias.data, lb.bias.data)):
            raise ContractError("beta trunks differ")
    return diff[0]


def epsilon_k_gap(params_K: GmvaeParams, params_K1: GmvaeParams, x, labels,
                  mc_samples: int, seed: int = 0, chunk: int = 64,
                  return_se: bool = False):
    """Empirical loss gap ``mean loss(K) - mean loss(K+1)`` under the full objective.

    Both models see the same Monte-Carlo noise; since they share every network
    except ``beta``, the draws of z and w coincide and the gap estimate only
    carries the variance of the difference.
    """
    _check_pair(params_K, params_K1)
    ta = evaluate(params_K, x, labels, mc_samples, np.random.default_rng(seed), chunk)
    tb = evaluate(params_K1, x, labels, mc_samples, np.random.default_rng(seed), chunk)
    diff = per_sample_loss(ta, "full") - per_sample_loss(tb, "full")
    gap = float(np.mean(diff))
    if return_se:
        return gap, float(np.std(diff, ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
    return gap
