"""Fully connected n-headed networks.

A :class:`HeadedNetwork` is a shared trunk of dense layers followed by ``n``
independent heads.  The last layer of every head must use the identity
activation; that restriction is what makes :func:`set_constant_output` exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

ACTIVATIONS = {
    "identity": lambda t: t,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
}


@dataclass
class Layer:
    """Dense layer ``act(x @ weight + bias)``.

    With ``passthrough = p > 0`` the last ``p`` input columns skip the layer
    and are appended unchanged to its output.
    """

    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    passthrough: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not form a layer")
        if self.passthrough < 0:
            raise ContractError("passthrough must be non-negative")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0] + self.passthrough

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1] + self.passthrough

    def __call__(self, x: Tensor) -> Tensor:
        if self.passthrough:
            p = self.passthrough
            main, rest = x[:, :-p], x[:, -p:]
            h = ACTIVATIONS[self.activation](T.linear(main, self.weight, self.bias))
            return T.concat([h, rest], axis=1)
        return ACTIVATIONS[self.activation](T.linear(x, self.weight, self.bias))

    def copy(self) -> "Layer":
        return Layer(Tensor(self.weight.data.copy(), requires_grad=self.weight.requires_grad),
                     Tensor(self.bias.data.copy(), requires_grad=self.bias.requires_grad),
                     self.activation, self.passthrough)


def dense(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator,
          passthrough: int = 0) -> Layer:
    """Layer with weights uniform in +-1/sqrt(fan_in) and zero bias."""
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    return Layer(Tensor(w, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True),
                 activation, passthrough)


@dataclass
class HeadedNetwork:
    """Shared trunk followed by independent heads, one output vector per head."""

    trunk: list[Layer]
    heads: list[list[Layer]]
    input_dim: int = field(default=0)

    def __post_init__(self):
        if not self.heads:
            raise ContractError("a headed network needs at least one head")
        if not self.input_dim:
            first = self.trunk[0] if self.trunk else self.heads[0][0]
            self.input_dim = first.in_dim
        width = self.input_dim
        for layer in self.trunk:
            if layer.in_dim != width:
                raise DimensionError(f"trunk layer expects {layer.in_dim} inputs, gets {width}")
            width = layer.out_dim
        for i, head in enumerate(self.heads):
            self._check_head(head, width, i)

    @staticmethod
    def _check_head(head: Sequence[Layer], width: int, i: int) -> None:
        if not head:
            raise ContractError(f"head {i} has no layers")
        if head[-1].activation != "identity":
            raise ContractError(f"head {i} must end in an identity activation")
        for layer in head:
            if layer.in_dim != width:
                raise DimensionError(f"head {i} layer expects {layer.in_dim} inputs, gets {width}")
            width = layer.out_dim

    @property
    def trunk_dim(self) -> int:
        return self.trunk[-1].out_dim if self.trunk else self.input_dim

    @property
    def head_dims(self) -> list[int]:
        return [head[-1].out_dim for head in self.heads]

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def features(self, x) -> Tensor:
        h = T.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of shape (B, {self.input_dim}), got {h.shape}")
        for layer in self.trunk:
            h = layer(h)
        return h

    def run_heads(self, h: Tensor, which: Sequence[int] | None = None) -> list[Tensor]:
        idx = range(len(self.heads)) if which is None else which
        outs = []
        for i in idx:
            a = h
            for layer in self.heads[i]:
                a = layer(a)
            outs.append(a)
        return outs

    def __call__(self, x, which: Sequence[int] | None = None) -> list[Tensor]:
        return self.run_heads(self.features(x), which)

    def layers(self) -> Iterator[tuple[str, Layer]]:
        for j, layer in enumerate(self.trunk):
            yield f"trunk.{j}", layer
        for i, head in enumerate(self.heads):
            for j, layer in enumerate(head):
                yield f"head.{i}.{j}", layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, layer in self.layers():
            yield f"{prefix}{name}.weight", layer.weight
            yield f"{prefix}{name}.bias", layer.bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def copy(self) -> "HeadedNetwork":
        return HeadedNetwork([l.copy() for l in self.trunk],
                             [[l.copy() for l in head] for head in self.heads],
                             self.input_dim)


def build_network(input_dim: int, trunk_widths: Sequence[int], head_dims: Sequence[int],
                  rng: np.random.Generator, *, head_hidden: Sequence[int] = (),
                  passthrough: int = 0, activation: str = "relu") -> HeadedNetwork:
    """Randomly initialised network; ``passthrough`` applies to the first trunk layer only."""
    trunk, width = [], input_dim
    for j, w in enumerate(trunk_widths):
        p = passthrough if j == 0 else 0
        layer = dense(width - p, w, activation, rng, passthrough=p)
        trunk.append(layer)
        width = layer.out_dim
    heads = [_head(width, head_hidden, d, activation, rng) for d in head_dims]
    return HeadedNetwork(trunk, heads, input_dim)


def _head(width: int, hidden: Sequence[int], out_dim: int, activation: str,
          rng: np.random.Generator) -> list[Layer]:
    layers = []
    for h in hidden:
        layers.append(dense(width, h, activation, rng))
        width = h
    layers.append(dense(width, out_dim, "identity", rng))
    return layers


def constant_head(like: Sequence[Layer], target) -> list[Layer]:
    """Head with the architecture of ``like`` that outputs ``target`` for every input."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (like[-1].out_dim,):
        raise ContractError(f"target shape {target.shape} does not match head output "
                            f"{like[-1].out_dim}")
    layers = []
    for j, layer in enumerate(like):
        bias = target.copy() if j == len(like) - 1 else np.zeros(layer.bias.shape)
        layers.append(Layer(Tensor(np.zeros(layer.weight.shape), requires_grad=True),
                            Tensor(bias, requires_grad=True),
                            layer.activation, layer.passthrough))
    return layers


def set_constant_output(net: HeadedNetwork, targets: Sequence) -> None:
    """Zero every weight and bias, then set each head's final bias to its target.

    Afterwards ``net(x)`` returns ``targets`` for every ``x``.
    """
    if len(targets) != len(net.heads):
        raise ContractError(f"{len(targets)} targets for {len(net.heads)} heads")
    for i, (head, target) in enumerate(zip(net.heads, targets)):
        t = np.asarray(target, dtype=np.float64)
        if t.shape != (head[-1].out_dim,):
            raise ContractError(f"target {i} has shape {t.shape}, head outputs {head[-1].out_dim}")
    for _, layer in net.layers():
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    for head, target in zip(net.heads, targets):
        head[-1].bias.data[...] = np.asarray(target, dtype=np.float64)
