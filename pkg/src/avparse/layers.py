"""Small parameterized building blocks on top of the tensor core."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class Module:
    """Minimal module base: named parameter registry plus child modules."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def _register(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def _child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in self._params.items():
            key = f"{prefix}{name}"
            p.name = key
            out[key] = p
        for cname, child in self._children.items():
            out.update(child.parameters(prefix=f"{prefix}{cname}."))
        return out

    def reset_grads(self) -> None:
        for p in self.parameters().values():
            p.reset_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Linear(Module):
    """Affine map ``x @ W + b`` with N(0, init_scale^2/fan_in) weight init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        super().__init__()
        self.w = self._register(
            "w", rng.standard_normal((d_in, d_out)) * (init_scale / np.sqrt(d_in)))
        self.b = self._register("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tt.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class LayerNorm(Module):
    """Normalize over the last axis with learnable gain and bias."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self._register("g", np.ones(dim))
        self.b = self._register("b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = tt.pow_const(var + tt.full(var.shape, self.eps), -0.5)
        return centered * inv * self.g + self.b


class MLP(Module):
    """Two-layer perceptron with ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self._child("fc1", Linear(d_in, d_hidden, rng))
        self.fc2 = self._child("fc2", Linear(d_hidden, d_out, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tt.relu(self.fc1(x)))

    def zero_(self) -> None:
        """Zero all weights and biases (turns the map into a constant zero)."""
        for p in self.parameters().values():
            p.data[...] = 0.0
