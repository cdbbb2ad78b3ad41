"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default) and record a backward
closure per op. Gradients are accumulated by a topological sweep from a
scalar loss. Broadcasting follows numpy semantics; gradients are
un-broadcast back to the operand shapes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """An op precondition was violated by the caller."""


class NumericsError(ArithmeticError):
    """A computation became numerically degenerate."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to our reflected ops

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep from a scalar. Raises on non-scalar output."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out = Tensor(self.data + other.data,
                     self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g, other.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out = Tensor(self.data * other.data,
                     self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        out = Tensor(self.data / other.data,
                     self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = Tensor(self.data ** p, self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        other = _wrap(other, self.dtype)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires tensors of rank >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {self.shape} @ {other.shape}")
        out = Tensor(self.data @ other.data,
                     self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))
            out._backward = _bw
        return out

    # -- elementwise nonlinearities --------------------------------------
    def exp(self):
        data = np.exp(self.data)  # captured directly: a closure over `out`
        out = Tensor(data, self.requires_grad, _parents=(self,))  # would be a ref cycle
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        data = np.sqrt(self.data)
        out = Tensor(data, self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * 0.5 / np.maximum(data, 1e-12))
        return out

    def tanh(self):
        data = np.tanh(self.data)
        out = Tensor(data, self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (1.0 - data ** 2))
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (self.data > 0))
        return out

    def elu(self):
        e = np.exp(np.minimum(self.data, 0.0))
        out_data = np.where(self.data > 0, self.data, e - 1.0).astype(self.dtype)
        out = Tensor(out_data, self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * np.where(self.data > 0, 1.0, e).astype(self.dtype))
        return out

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
        out = Tensor((x * cdf).astype(self.dtype), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            pdf = np.exp(-0.5 * x ** 2) / math.sqrt(2.0 * math.pi)
            out._backward = lambda g: self._accum(g * (cdf + x * pdf).astype(self.dtype))
        return out

    # -- shape ops -------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def swapaxes(self, a, b):
        out = Tensor(np.swapaxes(self.data, a, b), self.requires_grad, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(np.swapaxes(g, a, b))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], self.requires_grad, _parents=(self,))
        if out.requires_grad:
            def _bw(g):
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accum(full)
            out._backward = _bw
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, _parents=(self,))
        if out.requires_grad:
            def _bw(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).astype(self.dtype))
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ----------------------------------------------------------------------
# functional ops
# ----------------------------------------------------------------------

def concat(tensors, axis=0) -> Tensor:
    datas = [t.data for t in tensors]
    req = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate(datas, axis=axis), req, _parents=tuple(tensors))
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def _bw(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(a, b)
                    t._accum(g[tuple(idx)])
        out._backward = _bw
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    shift = x - x.data.max(axis=axis, keepdims=True)  # max detached: constant shift
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shift = x - x.data.max(axis=axis, keepdims=True)
    lse = shift.exp().sum(axis=axis, keepdims=True).log()
    return shift - lse


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis then apply the (gamma, beta) affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gamma + beta


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select row idx[i] from the leading axis of x for each i."""
    idx = np.asarray(idx)
    out = Tensor(x.data[idx], x.requires_grad, _parents=(x,))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accum(full)
        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax.

    logits: [N, C]; labels: [N] ints in [0, C).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [N,C] logits and [N] labels, "
                         f"got {logits.shape} and {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("label out of range for logit width")
    logp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    picked = Tensor(logp.data[np.arange(n), labels], logp.requires_grad, _parents=(logp,))
    if picked.requires_grad:
        def _bw(g):
            full = np.zeros_like(logp.data)
            full[np.arange(n), labels] = g
            logp._accum(full)
        picked._backward = _bw
    return -picked.mean()


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
