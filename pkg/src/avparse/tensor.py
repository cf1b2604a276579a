"""Dense float64 tensor with reverse-mode automatic differentiation.

The array payload is a numpy ``float64`` ndarray; the graph bookkeeping,
gradient rules and the AdamW optimizer are implemented here. Design choices
that tests rely on:

* gradients never accumulate across ``backward`` calls -- a second call that
  reaches an already-populated gradient raises ``ContractError``;
* max-pooling routes its gradient to the lowest flat index on ties;
* broadcasting follows numpy's trailing-dimension rules only.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

Array = np.ndarray


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in the computation graph.

    ``data`` is always a C-contiguous float64 array. ``grad`` stays ``None``
    until a backward pass reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may alias another tensor's grad
        else:
            self.grad += g

    def reset_grad(self) -> None:
        self.grad = None

    def backward(self, params=None) -> None:
        """Reverse-topological gradient accumulation from a scalar root.

        ``params``, when given, is an iterable of tensors whose gradients are
        zero-filled if the graph never reaches them (disconnected parameters
        read as all-zero gradients instead of ``None``).
        """
        if self.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.requires_grad and node.grad is not None:
                label = node.name or f"tensor{list(node.shape)}"
                raise ContractError(
                    f"gradient already populated on {label}; reset grads before "
                    "calling backward again (accumulation across passes is forbidden)"
                )
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcast)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- constructors ------------------------------------------------------------


def _check_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    for d in dims:
        if d < 1:
            raise ShapeError(f"invalid shape {list(dims)}: dimensions must be >= 1")
    return dims


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad, name)


def full(shape, value: float, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad, name)


def seeded_gaussian(seed: int, shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Standard-normal tensor; equal seeds give bit-identical contents."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(_check_shape(shape)), requires_grad, name)


# -- binary elementwise ops ---------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out = _make(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward():
        a._accumulate(out.grad)
        b._accumulate(-out.grad)

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward():
        a._accumulate(out.grad * b.data)
        b._accumulate(out.grad * a.data)

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out_data = a.data / b.data

    def backward():
        a._accumulate(out.grad / b.data)
        b._accumulate(-out.grad * a.data / (b.data * b.data))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward():
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    out = _make(out_data, (a, b), backward)
    return out


# -- unary elementwise ops ----------------------------------------------------


def _unary(a: Tensor, out_data: Array, grad_fn) -> Tensor:
    def backward():
        a._accumulate(out.grad * grad_fn())

    out = _make(out_data, (a,), backward)
    return out


def _expit(x: Array) -> Array:
    # clip keeps exp() finite; the result differs from true sigmoid by < 1e-300
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700.0, 700.0)))


def sigmoid(a: Tensor) -> Tensor:
    s = _expit(a.data)
    return _unary(a, s, lambda: s * (1.0 - s))


def silu(a: Tensor) -> Tensor:
    s = _expit(a.data)
    return _unary(a, a.data * s, lambda: s * (1.0 + a.data * (1.0 - s)))


def softplus(a: Tensor) -> Tensor:
    return _unary(a, np.logaddexp(0.0, a.data), lambda: 1.0 / (1.0 + np.exp(-a.data)))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _unary(a, e, lambda: e)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary(a, t, lambda: 1.0 - t * t)


def relu(a: Tensor) -> Tensor:
    return _unary(a, np.maximum(a.data, 0.0), lambda: (a.data > 0.0).astype(np.float64))


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def pow_const(a: Tensor, p: float) -> Tensor:
    return _unary(a, a.data**p, lambda: p * a.data ** (p - 1.0))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _unary(a, np.clip(a.data, lo, hi), lambda: inside)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def pool(a: Tensor, axis: int, kind: str) -> Tensor:
    """Reduce one axis to size 1 (kept). ``kind`` is ``avg`` or ``max``.

    Max pooling sends the whole gradient to the first (lowest-index) maximal
    element along the axis, so repeated runs are bit-identical.
    """
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"pool axis {axis} out of range for shape {a.shape}")
    axis = axis % a.data.ndim
    if kind == "avg":
        n = a.data.shape[axis]
        out_data = a.data.mean(axis=axis, keepdims=True)

        def backward():
            a._accumulate(np.broadcast_to(out.grad / n, a.data.shape))

    elif kind == "max":
        out_data = a.data.max(axis=axis, keepdims=True)
        argmax = a.data.argmax(axis=axis)  # first occurrence wins ties

        def backward():
            g = np.zeros_like(a.data)
            np.put_along_axis(g, np.expand_dims(argmax, axis), out.grad, axis)
            a._accumulate(g)

    else:
        raise ConfigError(f"unknown pool kind {kind!r}")
    out = _make(out_data, (a,), backward)
    return out


# -- shape ops ----------------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        a, b = list(ref), list(t.data.shape)
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(f"concat dims mismatch: {ref} vs {t.data.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, n in zip(tensors, extents):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(offset, offset + n)
            t._accumulate(out.grad[tuple(idx)])
            offset += n

    out = _make(out_data, tuple(tensors), backward)
    return out


def reverse(a: Tensor, axis: int = 0) -> Tensor:
    out_data = np.flip(a.data, axis=axis).copy()

    def backward():
        a._accumulate(np.flip(out.grad, axis=axis))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def backward():
        a._accumulate(out.grad.T)

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {list(shape)}")
    out_data = a.data.reshape(shape)

    def backward():
        a._accumulate(out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def rotate(a: Tensor, axis: int = 0, offset: int = 0) -> Tensor:
    """Cyclic left rotation: element ``i`` of the output is input ``i+offset``."""
    out_data = np.roll(a.data, -offset, axis=axis)

    def backward():
        a._accumulate(np.roll(out.grad, offset, axis=axis))

    out = _make(out_data, (a,), backward)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def backward():
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        a._accumulate(g)

    out = _make(out_data, (a,), backward)
    return out


# -- depthwise causal convolution ----------------------------------------------


def conv1d_depthwise(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal 1-D convolution over a ``[T, D]`` sequence.

    ``weights`` is ``[k, D]`` with the last row tapping the current step; the
    input is implicitly left-padded with ``k - 1`` zeros so position ``t``
    only sees inputs at or before ``t``.
    """
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"conv1d expects [T,D] and [k,D], got {x.shape}, {weights.shape}")
    k, d = weights.data.shape
    if k < 1:
        raise ConfigError(f"conv1d kernel size must be >= 1, got {k}")
    if d != x.data.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, weights {weights.shape}")
    t_len = x.data.shape[0]
    padded = np.concatenate([np.zeros((k - 1, d)), x.data], axis=0)
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += weights.data[j] * padded[j : j + t_len]
    if bias is not None:
        out_data = out_data + bias.data

    def backward():
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[j : j + t_len] += weights.data[j] * out.grad
        x._accumulate(gpad[k - 1 :])
        gw = np.empty_like(weights.data)
        for j in range(k):
            gw[j] = (padded[j : j + t_len] * out.grad).sum(axis=0)
        weights._accumulate(gw)
        if bias is not None:
            bias._accumulate(out.grad.sum(axis=0))

    parents = (x, weights) if bias is None else (x, weights, bias)
    out = _make(out_data, parents, backward)
    return out


# -- helpers used across the model ---------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax built from primitive ops."""
    shifted = sub(a, pool(a, axis=axis, kind="max"))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis % a.data.ndim, keepdims=True))


def reset_grads(tensors) -> None:
    for t in tensors:
        t.reset_grad()


def graph_tensors(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root`` through the parent links."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


# -- AdamW ---------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter collection."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        reset_grads(self.params.values())
