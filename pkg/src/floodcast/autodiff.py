"""Dense float64 arrays with reverse-mode differentiation.

Implements exactly the operation set the classifier needs: matrix products,
"same"-padded temporal cross-correlation, batch normalization with running
statistics, the usual pointwise nonlinearities, Hadamard products, and the
reductions/reshapes that glue a network together. Operations build an
implicit DAG of :class:`Node` objects; :func:`backward` runs a reverse
topological sweep from a scalar root and *accumulates* gradients with
``+=`` (call :func:`zero_grads` between steps).

A finite-difference checker (:func:`grad_check`) and a splittable
deterministic random stream (:class:`Rng`) live here too, since every other
module leans on them.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateVarianceError,
    DimensionError,
    NumericError,
)

_MASK64 = (1 << 64) - 1


# =====================================================================
# Random streams
# =====================================================================

class Rng:
    """Deterministic, splittable random stream.

    Backed by numpy's counter-based Philox generator, so the same seed
    yields the same draw sequence on every platform. ``split`` derives an
    independent child stream from the parent seed plus arbitrary hashable
    labels, which lets each (weight, run, layer) own its own stream without
    any draw-order coupling.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.algorithm = "philox"
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *keys) -> "Rng":
        material = repr((self.seed,) + keys).encode("utf-8")
        digest = hashlib.blake2b(material, digest_size=8).digest()
        return Rng(int.from_bytes(digest, "big"))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


# =====================================================================
# Graph nodes
# =====================================================================

class Node:
    """One value in the computation graph.

    ``data`` is a C-ordered float64 array, ``grad`` an array of the same
    shape, zero until a backward sweep reaches the node. ``inputs`` holds
    the parent nodes, so the graph is implicit and acyclic by construction
    (parents always exist before children).
    """

    __slots__ = ("id", "op", "inputs", "data", "grad", "_backward", "_accumulated")

    _ids = itertools.count()

    def __init__(self, data, inputs: Sequence["Node"] = (), op: str = "leaf",
                 backward: Callable[["Node"], None] | None = None):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d to 1-d, so gate it
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = np.zeros(data.shape)  # np.zeros gets calloc'd pages cheaply
        self.inputs = tuple(inputs)
        self.op = op
        self._backward = backward
        self._accumulated = False
        self.id = next(Node._ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


def as_node(x) -> Node:
    """Lift arrays/scalars to leaf nodes; pass nodes through unchanged."""
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=np.float64))


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.id not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Reverse sweep from a scalar root, accumulating into ``grad``.

    Each sweep propagates through fresh adjoint buffers and then adds its
    result onto whatever the nodes already held, so running twice without
    zeroing doubles every gradient. Unreachable nodes stay untouched.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    previous: list[np.ndarray | None] = []
    for node in order:
        previous.append(node.grad if node._accumulated else None)
        node.grad = np.zeros(node.data.shape)
    root.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
    for node, old in zip(order, previous):
        if old is not None:
            node.grad += old
        node._accumulated = True


def zero_grads(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad[...] = 0.0
        node._accumulated = False


# =====================================================================
# Arithmetic
# =====================================================================

def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # trailing-axes broadcast: (m, n) reduced to (n,)
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def _broadcast_ok(a: Node, b: Node) -> bool:
    # Supported: equal shapes, a scalar side, or a trailing vector added to
    # the rows of a matrix. Anything fancier is out of scope by design.
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return True
    if len(b.shape) == 1 and a.shape[-1:] == b.shape:
        return True
    if len(a.shape) == 1 and b.shape[-1:] == a.shape:
        return True
    return False


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if not _broadcast_ok(a, b):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def back(out: Node):
        a.grad += _reduce_to(a.shape, out.grad)
        b.grad += _reduce_to(b.shape, out.grad)

    return Node(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if not _broadcast_ok(a, b):
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def back(out: Node):
        a.grad += _reduce_to(a.shape, out.grad)
        b.grad -= _reduce_to(b.shape, out.grad)

    return Node(a.data - b.data, (a, b), "sub", back)


def hadamard(a, b) -> Node:
    """Elementwise product. Equal shapes, or one scalar side."""
    a, b = as_node(a), as_node(b)
    if not (a.shape == b.shape or a.shape == () or b.shape == ()):
        raise DimensionError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")

    def back(out: Node):
        a.grad += _reduce_to(a.shape, out.grad * b.data)
        b.grad += _reduce_to(b.shape, out.grad * a.data)

    return Node(a.data * b.data, (a, b), "hadamard", back)


def scale_const(x: Node, c: float) -> Node:
    def back(out: Node):
        x.grad += c * out.grad

    return Node(c * x.data, (x,), "scale_const", back)


def mul_const(x: Node, c) -> Node:
    """Multiply by a constant array (no gradient flows into ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape and c.shape != ():
        raise DimensionError(f"mul_const: incompatible shapes {x.shape} and {c.shape}")

    def back(out: Node):
        x.grad += c * out.grad

    return Node(x.data * c, (x,), "mul_const", back)


def rsub_const(c: float, x: Node) -> Node:
    """``c - x`` for a plain float ``c``."""

    def back(out: Node):
        x.grad -= out.grad

    return Node(c - x.data, (x,), "rsub_const", back)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(out: Node):
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    return Node(a.data @ b.data, (a, b), "matmul", back)


def transpose(x: Node) -> Node:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def back(out: Node):
        x.grad += out.grad.T

    return Node(x.data.T, (x,), "transpose", back)


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    def back(out: Node):
        x.grad += out.grad.reshape(x.shape)

    return Node(x.data.reshape(shape), (x,), "reshape", back)


def concat(a: Node, b: Node, axis: int = 1) -> Node:
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    split = a.shape[axis]

    def back(out: Node):
        a.grad += np.take(out.grad, range(split), axis=axis)
        b.grad += np.take(out.grad, range(split, out.shape[axis]), axis=axis)

    return Node(np.concatenate([a.data, b.data], axis=axis), (a, b), "concat", back)


def column(x: Node, j: int) -> Node:
    """Column ``j`` of a matrix as a vector."""
    if x.data.ndim != 2:
        raise DimensionError(f"column expects a matrix, got shape {x.shape}")

    def back(out: Node):
        x.grad[:, j] += out.grad

    return Node(x.data[:, j].copy(), (x,), "column", back)


def time_slice(x: Node, t: int) -> Node:
    """Slice step ``t`` from the last axis of a (B, D, T) tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"time_slice expects rank 3, got shape {x.shape}")

    def back(out: Node):
        x.grad[:, :, t] += out.grad

    return Node(x.data[:, :, t].copy(), (x,), "time_slice", back)


# =====================================================================
# Reductions
# =====================================================================

def sum_all(x: Node) -> Node:
    def back(out: Node):
        x.grad += out.grad

    return Node(x.data.sum(), (x,), "sum_all", back)


def mean_all(x: Node) -> Node:
    n = x.size

    def back(out: Node):
        x.grad += out.grad / n

    return Node(x.data.mean(), (x,), "mean_all", back)


def mean_axis(x: Node, axis: int) -> Node:
    n = x.shape[axis]

    def back(out: Node):
        x.grad += np.expand_dims(out.grad, axis) / n

    return Node(x.data.mean(axis=axis), (x,), "mean_axis", back)


# =====================================================================
# Pointwise nonlinearities
# =====================================================================

def sigmoid(x) -> Node:
    x = as_node(x)
    # stable two-sided form
    pos = x.data >= 0
    s = np.empty_like(x.data)
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    s[~pos] = ex / (1.0 + ex)

    def back(out: Node):
        x.grad += out.grad * out.data * (1.0 - out.data)

    return Node(s, (x,), "sigmoid", back)


def tanh(x) -> Node:
    x = as_node(x)

    def back(out: Node):
        x.grad += out.grad * (1.0 - out.data * out.data)

    return Node(np.tanh(x.data), (x,), "tanh", back)


def relu(x) -> Node:
    x = as_node(x)

    def back(out: Node):
        x.grad += out.grad * (x.data > 0.0)

    return Node(np.maximum(x.data, 0.0), (x,), "relu", back)


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def pointwise(kind: str, x) -> Node:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise kind {kind!r}") from None
    return fn(x)


def log_clamped(x: Node, floor: float = 1e-12) -> Node:
    """log with the argument clamped below at ``floor``.

    The derivative is zero in the clamped region (the value is constant
    there), which keeps losses finite under saturated probabilities.
    """
    clamped = np.maximum(x.data, floor)

    def back(out: Node):
        x.grad += out.grad * (x.data > floor) / clamped

    return Node(np.log(clamped), (x,), "log_clamped", back)


def softmax_rows(x: Node) -> Node:
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(out: Node):
        inner = (out.grad * out.data).sum(axis=1, keepdims=True)
        x.grad += out.data * (out.grad - inner)

    return Node(p, (x,), "softmax", back)


# =====================================================================
# Temporal convolution (cross-correlation, "same" zero padding)
# =====================================================================

def conv1d(x: Node, kernels: Node, bias: Node) -> Node:
    """Per-channel cross-correlation plus bias.

    ``x`` is (C_in, T) or (B, C_in, T); ``kernels`` is (C_out, C_in, K)
    with K odd; ``bias`` is (C_out,). Output length equals input length
    ("same" zero padding).
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.data.ndim != 3 or bias.data.ndim != 1:
        raise DimensionError(
            f"conv1d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    n_batch, c_in, t_len = xd.shape
    c_out, k_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel width must be odd, got {k}")
    if k_in != c_in or bias.shape[0] != c_out:
        raise DimensionError(
            f"conv1d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")

    pad = (k - 1) // 2
    xp = np.zeros((n_batch, c_in, t_len + 2 * pad))
    xp[:, :, pad:pad + t_len] = xd
    # im2col: (B, T, C_in, K) -> one GEMM per call
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, T, K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(
        n_batch * t_len, c_in * k)
    kmat = kernels.data.reshape(c_out, c_in * k)
    out = (cols @ kmat.T).reshape(n_batch, t_len, c_out).transpose(0, 2, 1)
    out = out + bias.data[None, :, None]

    def back(node: Node):
        g = node.grad[None] if squeeze else node.grad          # (B, C_out, T)
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(
            n_batch * t_len, c_out)
        kernels.grad += (gmat.T @ cols).reshape(c_out, c_in, k)
        bias.grad += g.sum(axis=(0, 2))
        dcols = (gmat @ kmat).reshape(n_batch, t_len, c_in, k)
        # one contiguous gather up front keeps the scatter adds memcpy-like
        dcols_k = np.ascontiguousarray(dcols.transpose(3, 0, 2, 1))  # (K, B, C, T)
        dxp = np.zeros(xp.shape)
        for j in range(k):
            dxp[:, :, j:j + t_len] += dcols_k[j]
        dx = dxp[:, :, pad:pad + t_len]
        x.grad += dx[0] if squeeze else dx

    value = out[0] if squeeze else out
    return Node(value, (x, kernels, bias), "conv1d", back)


# =====================================================================
# Batch normalization
# =====================================================================

@dataclass
class BatchNormState:
    """Running statistics, updated in train mode, read in infer mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int) -> "BatchNormState":
        return cls(mean=np.zeros(channels), var=np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batchnorm(x: Node, gamma: Node, beta: Node, state: BatchNormState,
              mode: str, momentum: float = 0.99, epsilon: float = 0.001) -> Node:
    """Per-channel normalization of a (B, C, T) tensor.

    Train mode normalizes with batch statistics over (B, T) and updates the
    running stats as ``running = momentum * running + (1 - momentum) * batch``;
    infer mode uses the running stats, so output is independent of batch
    composition.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm expects (B, C, T), got shape {x.shape}")
    n_batch, channels, t_len = x.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batchnorm: gamma {gamma.shape} / beta {beta.shape} vs C={channels}")

    if mode == "train":
        n = n_batch * t_len
        if n < 2:
            raise DegenerateVarianceError(
                "batchnorm train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=(0, 2))
        centered = x.data - mean[None, :, None]
        var = np.einsum("bct,bct->c", centered, centered) / n
        state.mean = momentum * state.mean + (1.0 - momentum) * mean
        state.var = momentum * state.var + (1.0 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = centered * inv_std[None, :, None]
        out = xhat * gamma.data[None, :, None]
        out += beta.data[None, :, None]

        def back(node: Node):
            g = node.grad
            gamma.grad += np.einsum("bct,bct->c", g, xhat)
            beta.grad += np.einsum("bct->c", g)
            dxhat = g * gamma.data[None, :, None]
            dvar = np.einsum("bct,bct->c", dxhat, centered) * (-0.5) * inv_std ** 3
            dmean = -np.einsum("bct->c", dxhat) * inv_std \
                - dvar * 2.0 / n * np.einsum("bct->c", centered)
            dxhat *= inv_std[None, :, None]
            dxhat += (2.0 / n) * dvar[None, :, None] * centered
            dxhat += dmean[None, :, None] / n
            x.grad += dxhat

        return Node(out, (x, gamma, beta), "batchnorm", back)

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.var + epsilon)
        xhat = (x.data - state.mean[None, :, None]) * inv_std[None, :, None]
        out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

        def back(node: Node):
            g = node.grad
            gamma.grad += (g * xhat).sum(axis=(0, 2))
            beta.grad += g.sum(axis=(0, 2))
            x.grad += g * (gamma.data * inv_std)[None, :, None]

        return Node(out, (x, gamma, beta), "batchnorm", back)

    raise ConfigurationError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")


# =====================================================================
# Gradient checking
# =====================================================================

def grad_check(f: Callable[[], Node], params: Sequence[Node],
               step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not (0.0 < step <= 1e-2):
        raise ContractError(f"grad_check step must be in (0, 1e-2], got {step}")

    def evaluate() -> float:
        out = f()
        if out.size != 1:
            raise ContractError(f"grad_check target must be scalar, got {out.shape}")
        value = float(out.data.reshape(()))
        if not math.isfinite(value):
            raise NumericError("grad_check target is not finite")
        return value

    zero_grads(params)
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check target must be scalar, got {out.shape}")
    if not math.isfinite(float(out.data.reshape(()))):
        raise NumericError("grad_check target is not finite")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
