"""Minimal reverse-mode autodiff over f64 numpy arrays.

Define-by-run graph, freed after each backward pass. Only the 2-D shapes the
trainable modules need are supported; no broadcasting beyond row-vector bias
addition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# When True, any NaN/Inf appearing in a forward op raises immediately.
CHECK_FINITE = False


class RngStream:
    """Counter-based generator (Philox) so sequences are seed-stable across platforms."""

    algorithm = "philox"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, *shape: int, scale: float = 1.0) -> np.ndarray:
        return scale * self.gen.standard_normal(shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- helpers -----------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value in forward pass")
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Bias rows (1, d) or (d,) broadcast over (n, d) rows.
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(c * g)

    return _make(c * a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accumulate(g * s * (1.0 - s))

    return _make(s, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax with max-subtraction for shift stability."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        a._accumulate(s * (g - dot))

    return _make(s, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable scale/shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        d = x.data.shape[-1]
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x._accumulate(dx)
        gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        beta._accumulate(_unbroadcast(g, beta.data.shape))

    return _make(data, (x, gamma, beta), backward)


def bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on probabilities in (0, 1)."""
    pred = _wrap(pred)
    t = np.asarray(target, dtype=np.float64)
    p = pred.data
    data = np.array(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())

    def backward(g):
        n = p.size
        pred._accumulate(g * (-(t / p) + (1.0 - t) / (1.0 - p)) / n)

    return _make(data, (pred,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Numerically stable mean BCE on raw logits."""
    logits = _wrap(logits)
    t = np.asarray(target, dtype=np.float64)
    z = logits.data
    # softplus(z) - z*t, with softplus computed stably
    data = np.array((np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean())

    def backward(g):
        n = z.size
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accumulate(g * (s - t) / n)

    return _make(data, (logits,), backward)


def mean(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g) / a.data.size))

    return _make(np.array(a.data.mean()), (a,), backward)


def total(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(np.array(a.data.sum()), (a,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _make(a.data[idx], (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _wrap(a)

    def backward(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        a._accumulate(acc)

    return _make(a.data[:, start:stop], (a,), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            p._accumulate(g[:, off : off + w])
            off += w

    return _make(data, tuple(parts), backward)


# ---------------------------------------------------------------------------


def finite_diff_check(f, params: list[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a list of leaf Tensors to a scalar Tensor and must be
    side-effect-free; the relative error denominator is max(|a|, |b|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    leaves = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
    out = f(leaves)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def value_at(arrays: list[np.ndarray]) -> float:
        return float(f([Tensor(a) for a in arrays]).data)

    max_err = 0.0
    base = [leaf.data.copy() for leaf in leaves]
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = value_at(base)
            flat[j] = orig - eps
            fm = value_at(base)
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic[i].reshape(-1)[j]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            max_err = max(max_err, err)
    return max_err
