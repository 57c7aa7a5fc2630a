"""Supervised Gaussian-mixture VAE: configuration, parameters and forward maps.

Class labels are 1-based throughout (``1..C``); ``C + 1`` is reserved for the
unknown class at classification time.

The subcluster network ``beta`` has ``2 * sum(K)`` heads laid out class-major,
then by subcluster, mean before log-variance.  Component ``(c, k)`` (both
1-based) therefore reads heads ``2 * (offset_c + k - 1)`` and the one after
it, 0-based, where ``offset_c = K_1 + ... + K_{c-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .dists import BernoulliParam, DiagGaussian, gaussian_log_pdf
from .errors import ContractError, DimensionError, DomainError
from .networks import HeadedNetwork, build_network, constant_head, set_constant_output
from .serialize import load_bundle, save_bundle
from .tensor import Tensor

NETWORK_NAMES = ("phi_z", "phi_w", "beta", "theta")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    K: tuple[int, ...]
    dim_x: int
    dim_z: int
    dim_w: int
    hidden: tuple[int, ...] = (64, 64)
    beta_hidden: tuple[int, ...] = (32, 32)
    w_reduce: int = 16
    v_prior: tuple[tuple[float, ...], ...] | None = None
    likelihood: str = "bernoulli"

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "beta_hidden", tuple(self.beta_hidden))
        if self.num_classes < 1 or len(self.K) != self.num_classes:
            raise ContractError(f"need one subcluster count per class, got K={self.K} "
                                f"for C={self.num_classes}")
        if any(k < 1 for k in self.K):
            raise ContractError(f"subcluster counts must be >= 1, got {self.K}")
        if min(self.dim_x, self.dim_z, self.dim_w) < 1:
            raise ContractError("dimensions must be positive")
        if self.likelihood != "bernoulli":
            raise ContractError(f"unsupported likelihood {self.likelihood!r}")
        if self.v_prior is not None:
            pri = tuple(tuple(float(p) for p in row) for row in self.v_prior)
            object.__setattr__(self, "v_prior", pri)
            for c, (row, k) in enumerate(zip(pri, self.K), start=1):
                if len(row) != k or min(row) < 0 or abs(sum(row) - 1.0) > 1e-9:
                    raise ContractError(f"v_prior for class {c} must be {k} nonnegative "
                                        "weights summing to 1")
            if len(pri) != self.num_classes:
                raise ContractError("v_prior needs one row per class")

    @property
    def total_components(self) -> int:
        return sum(self.K)

    def offset(self, c: int) -> int:
        self.check_class(c)
        return sum(self.K[: c - 1])

    def check_class(self, c: int) -> None:
        if not 1 <= c <= self.num_classes:
            raise ContractError(f"class index {c} outside 1..{self.num_classes}")

    def log_prior(self, c: int) -> np.ndarray:
        self.check_class(c)
        k = self.K[c - 1]
        if self.v_prior is None:
            return np.full(k, -math.log(k))
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.v_prior[c - 1]))

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes, "K": list(self.K), "dim_x": self.dim_x,
            "dim_z": self.dim_z, "dim_w": self.dim_w, "hidden": list(self.hidden),
            "beta_hidden": list(self.beta_hidden), "w_reduce": self.w_reduce,
            "v_prior": None if self.v_prior is None else [list(r) for r in self.v_prior],
            "likelihood": self.likelihood,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["K"] = tuple(d["K"])
        if d.get("v_prior") is not None:
            d["v_prior"] = tuple(tuple(r) for r in d["v_prior"])
        return cls(**d)


@dataclass
class GmvaeParams:
    config: ModelConfig
    phi_z: HeadedNetwork
    phi_w: HeadedNetwork
    beta: HeadedNetwork
    theta: HeadedNetwork
    frozen: frozenset = field(default_factory=frozenset)

    def networks(self) -> Iterator[tuple[str, HeadedNetwork]]:
        for name in NETWORK_NAMES:
            yield name, getattr(self, name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, net in self.networks():
            yield from net.named_parameters(prefix=f"{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if name.split(".")[0] not in self.frozen]

    def copy(self) -> "GmvaeParams":
        return GmvaeParams(self.config, self.phi_z.copy(), self.phi_w.copy(),
                           self.beta.copy(), self.theta.copy(), self.frozen)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            raise ContractError("parameter names do not match this architecture")
        for name, p in own.items():
            if p.data.shape != arrays[name].shape:
                raise DimensionError(f"{name}: shape {arrays[name].shape}, expected {p.data.shape}")
            p.data[...] = arrays[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_params(config: ModelConfig, seed: int = 0) -> GmvaeParams:
    rng = np.random.default_rng(seed)
    C, dz, dw = config.num_classes, config.dim_z, config.dim_w
    phi_z = build_network(config.dim_x, config.hidden, [dz, dz], rng)
    phi_w = build_network(config.dim_x + C, [config.w_reduce], [dw, dw], rng, passthrough=C)
    beta = build_network(dw, config.beta_hidden, [dz] * (2 * config.total_components), rng)
    theta = build_network(dz, tuple(reversed(config.hidden)), [config.dim_x], rng)
    return GmvaeParams(config, phi_z, phi_w, beta, theta)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params: GmvaeParams, path, extra: dict | None = None) -> Path:
    meta = {"config": params.config.to_dict(), "frozen": sorted(params.frozen)}
    if extra:
        meta["extra"] = extra
    return save_bundle(path, params.arrays(), meta, kind="checkpoint")


def load_checkpoint(path) -> GmvaeParams:
    arrays, meta, _ = load_bundle(path, kind="checkpoint")
    params = init_params(ModelConfig.from_dict(meta["config"]), seed=0)
    params.load_arrays(arrays)
    params.frozen = frozenset(meta.get("frozen", ()))
    return params


# -- inputs -------------------------------------------------------------------

def _batch(x, dim: int, what: str) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 1:
        x = T.reshape(x, (1, -1))
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what} must have {dim} columns, got shape {x.shape}")
    return x


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if np.any(labels < 1) or np.any(labels > num_classes):
        raise ContractError(f"labels must lie in 1..{num_classes}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(int) - 1] = 1.0
    return out


def _check_one_hot(y: np.ndarray, C: int) -> None:
    ok = (y.ndim == 2 and y.shape[1] == C and np.all((y == 0) | (y == 1))
          and np.all(y.sum(axis=1) == 1))
    if not ok:
        raise ContractError("y must be one-hot rows over the known classes")


# -- forward maps -------------------------------------------------------------

def encode_z(params: GmvaeParams, x) -> DiagGaussian:
    mean, logvar = params.phi_z(_batch(x, params.config.dim_x, "x"))
    return DiagGaussian(mean, logvar)


def encode_w(params: GmvaeParams, x, y) -> DiagGaussian:
    """q(w | x, y); ``y`` holds one-hot rows."""
    x = _batch(x, params.config.dim_x, "x")
    y = np.atleast_2d(np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64))
    _check_one_hot(y, params.config.num_classes)
    if y.shape[0] != x.shape[0]:
        raise DimensionError("x and y batch sizes differ")
    mean, logvar = params.phi_w(T.concat([x, Tensor(y)], axis=1))
    return DiagGaussian(mean, logvar)


def subcluster_heads(config: ModelConfig, c: int) -> list[int]:
    """0-based ``beta`` head indices read by class ``c``, in (k, mean/logvar) order."""
    off = config.offset(c)
    return [2 * (off + k) + j for k in range(config.K[c - 1]) for j in (0, 1)]


def subcluster_components(params: GmvaeParams, w, c: int) -> list[DiagGaussian]:
    """p(z | w, y=c, v=k) for k = 1..K_c."""
    params.config.check_class(c)
    w = _batch(w, params.config.dim_w, "w")
    outs = params.beta(w, which=subcluster_heads(params.config, c))
    return [DiagGaussian(outs[2 * k], outs[2 * k + 1]) for k in range(len(outs) // 2)]


def component_log_pdfs(z, components: Sequence[DiagGaussian]) -> Tensor:
    """(B, K) matrix of log p(z | w, y, v=k)."""
    return T.stack([gaussian_log_pdf(z, g) for g in components], axis=1)


def v_log_posterior(params: GmvaeParams, z, w, c: int,
                    components: Sequence[DiagGaussian] | None = None):
    """Return ``(log_post, log_pdfs)`` for the Bayes-rule subcluster posterior, both (B, K_c)."""
    z = _batch(z, params.config.dim_z, "z")
    if components is None:
        components = subcluster_components(params, w, c)
    log_pdfs = component_log_pdfs(z, components)
    log_prior = np.broadcast_to(params.config.log_prior(c), log_pdfs.shape)
    return T.log_softmax(log_pdfs + log_prior, axis=1), log_pdfs


def v_posterior(params: GmvaeParams, z, w, c: int) -> Tensor:
    log_post, _ = v_log_posterior(params, z, w, c)
    return T.exp(log_post)


def decode(params: GmvaeParams, z) -> BernoulliParam:
    (logits,) = params.theta(_batch(z, params.config.dim_z, "z"))
    return BernoulliParam(T.sigmoid(logits))


def embed(params: GmvaeParams, x, chunk: int = 4096) -> np.ndarray:
    """Mean of q(z | x) as a plain array; used as the classification embedding."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = [encode_z(params, x[i:i + chunk]).mean.data for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, params.config.dim_z))


# -- constructions ------------------------------------------------------------

def add_subcluster_head(params: GmvaeParams, c: int, init,
                        prior: Sequence[float] | None = None) -> GmvaeParams:
    """Copy of ``params`` with one more subcluster for class ``c``.

    The two new ``beta`` heads output the constant ``init = (mean, logvar)``
    for every ``w``; every pre-existing head is left untouched.  With a uniform
    prior the new class prior stays uniform; an explicit prior needs ``prior``.
    """
    cfg = params.config
    cfg.check_class(c)
    mean_t, logvar_t = (np.asarray(a, dtype=np.float64) for a in init)
    if mean_t.shape != (cfg.dim_z,) or logvar_t.shape != (cfg.dim_z,):
        raise ContractError(f"init vectors must have dimension {cfg.dim_z}")
    new = params.copy()
    template = new.beta.heads[0]
    at = 2 * (cfg.offset(c) + cfg.K[c - 1])
    new.beta.heads[at:at] = [constant_head(template, mean_t), constant_head(template, logvar_t)]
    K = list(cfg.K)
    K[c - 1] += 1
    v_prior = cfg.v_prior
    if v_prior is not None or prior is not None:
        if prior is None:
            raise ContractError("an explicit v_prior needs the extended prior for class c")
        rows = [list(r) for r in (v_prior or [np.full(k, 1.0 / k) for k in cfg.K])]
        rows[c - 1] = list(prior)
        v_prior = tuple(tuple(r) for r in rows)
    new.config = replace(cfg, K=tuple(K), v_prior=v_prior)
    return new


def trivial_solution(config: ModelConfig, mu_x, mu_z=None, logvar_z=None) -> GmvaeParams:
    """Constant-network parameters where every subcluster equals q(z|x) and p(x|z) = B(mu_x)."""
    mu_x = np.asarray(mu_x, dtype=np.float64)
    if mu_x.shape != (config.dim_x,):
        raise ContractError(f"mu_x must have dimension {config.dim_x}")
    if np.any(mu_x <= 0.0) or np.any(mu_x >= 1.0):
        raise DomainError("mu_x must lie strictly inside (0, 1)")
    mu_z = np.zeros(config.dim_z) if mu_z is None else np.asarray(mu_z, dtype=np.float64)
    logvar_z = np.zeros(config.dim_z) if logvar_z is None else np.asarray(logvar_z, dtype=np.float64)
    params = init_params(config, seed=0)
    zeros_w = np.zeros(config.dim_w)
    set_constant_output(params.phi_z, [mu_z, logvar_z])
    set_constant_output(params.phi_w, [zeros_w, zeros_w])
    set_constant_output(params.beta, [mu_z, logvar_z] * config.total_components)
    set_constant_output(params.theta, [np.log(mu_x) - np.log1p(-mu_x)])
    return params


def generate_samples(params: GmvaeParams, c: int, n: int, rng: np.random.Generator,
                     binarize: bool = False, return_latents: bool = False):
    """``n`` ancestral draws from p(x | y=c): w ~ N(0, I), v ~ Mult(pi(c)), z ~ p(z | w, v).

    Returns Bernoulli means of shape ``(n, dim_x)``, or binary draws when
    ``binarize``; with ``return_latents`` also a dict of w, 1-based v and z.
    """
    cfg = params.config
    cfg.check_class(c)
    if n < 1:
        raise ContractError("need at least one sample")
    w = rng.standard_normal((n, cfg.dim_w))
    v = rng.choice(cfg.K[c - 1], size=n, p=np.exp(cfg.log_prior(c)))
    comps = subcluster_components(params, w, c)
    mean = np.stack([g.mean.data for g in comps], axis=1)[np.arange(n), v]
    logvar = np.stack([g.logvar.data for g in comps], axis=1)[np.arange(n), v]
    z = mean + np.exp(0.5 * logvar) * rng.standard_normal((n, cfg.dim_z))
    x = decode(params, z).mean.data
    if binarize:
        x = (rng.random(x.shape) < x).astype(np.float64)
    if return_latents:
        return x, {"w": w, "v": v + 1, "z": z}
    return x


def generate_sample(params: GmvaeParams, c: int, rng: np.random.Generator,
                    binarize: bool = False, return_latents: bool = False):
    """A single draw from p(x | y=c); see :func:`generate_samples`."""
    out = generate_samples(params, c, 1, rng, binarize, return_latents)
    if return_latents:
        x, lat = out
        return x[0], {"w": lat["w"][0], "v": int(lat["v"][0]), "z": lat["z"][0]}
    return out[0]
