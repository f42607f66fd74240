"""Dense-array reverse-mode autodiff core.

Small by design: just the ops the looped-transformer lab needs. Arrays are
numpy, graphs are built eagerly, backward walks the tape once in reverse
topological order. Leading batch dimensions broadcast through every op; the
gradient of a broadcast input is summed back down to its shape.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np


class NumericError(RuntimeError):
    """An op produced a non-finite value (exploded logits, overflow, ...)."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (non-scalar root, reuse, ...)."""


_grad_enabled: bool = True
_counter_stack: list["MatmulFlopCounter"] = []


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MatmulFlopCounter:
    """Counts 2*m*n*k (times batch) for every matmul run while active."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total: int = 0


@contextmanager
def count_matmul_flops() -> Iterator[MatmulFlopCounter]:
    counter = MatmulFlopCounter()
    _counter_stack.append(counter)
    try:
        yield counter
    finally:
        _counter_stack.pop()


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # One-pass probe: any nan/inf propagates into the sum. Only a non-finite
    # sum pays for the exact elementwise scan (a finite overflow of the sum
    # itself is the lone false alarm, and the scan clears it).
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_mask_cache: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _mask_cache.get(n)
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
        _mask_cache[n] = mask
    return mask


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches share it, so this stays fully
    # vectorized instead of scattering through boolean masks.
    one = x.dtype.type(1)
    z = np.abs(x)
    np.negative(z, out=z)
    np.exp(z, out=z)
    num = np.where(x >= 0, one, z)
    np.add(z, one, out=z)
    np.divide(num, z, out=num)
    return num


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_ran", "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()
        self._ran = False
        self._grad_borrowed = False

    # ---- basic introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- graph plumbing ----

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor(data)
        _check_finite(out.data, op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = parents
        return out

    def _accumulate(self, grad: np.ndarray, fresh: bool = False) -> None:
        """Add `grad` into this tensor's gradient.

        fresh=True promises the caller just allocated `grad` for this call
        alone, so the first accumulation takes the array outright. Without
        the promise (pass-through gradients: views of a child's grad) the
        buffer is borrowed instead of copied, and a later accumulation
        reallocates rather than mutating what it does not own.
        """
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
            fresh = True
        if grad.dtype != self.data.dtype:
            grad = grad.astype(self.data.dtype)
            fresh = True
        if self.grad is None:
            self.grad = grad
            self._grad_borrowed = not fresh
        elif self._grad_borrowed:
            self.grad = self.grad + grad
            self._grad_borrowed = False
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError("backward requires a scalar output")
        if self._ran:
            raise GraphError("backward already ran on this graph; rebuild it first")
        self._ran = True

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
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # ---- arithmetic ----

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = self._make(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad)
                other._accumulate(out.grad)
            out._backward = _bw
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = self._make(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * other.data, fresh=True)
                other._accumulate(out.grad * self.data, fresh=True)
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        out = self._make(-self.data, (self,), "neg")
        if out.requires_grad:
            def _bw():
                self._accumulate(-out.grad, fresh=True)
            out._backward = _bw
        return out

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = self._make(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad)
                other._accumulate(-out.grad, fresh=True)
            out._backward = _bw
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor(np.asarray(other, dtype=self.dtype)) - self

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out = self._make(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad / other.data, fresh=True)
                other._accumulate(-out.grad * self.data / (other.data * other.data), fresh=True)
            out._backward = _bw
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = self._make(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1), fresh=True)
            out._backward = _bw
        return out

    # ---- shape ops ----

    def reshape(self, *shape: int) -> "Tensor":
        out = self._make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad.reshape(self.data.shape))
            out._backward = _bw
        return out

    @property
    def mT(self) -> "Tensor":
        """Transpose of the last two axes."""
        return self.swapaxes(-1, -2)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        out = self._make(np.swapaxes(self.data, ax1, ax2), (self,), "swapaxes")
        if out.requires_grad:
            def _bw():
                self._accumulate(np.swapaxes(out.grad, ax1, ax2))
            out._backward = _bw
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def _bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape))
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else (
            np.prod([self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # ---- matmul ----

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor operand")
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ValueError(
                f"matmul inner dimensions differ: {self.data.shape} @ {other.data.shape}"
            )
        data = np.matmul(self.data, other.data)
        m = self.data.shape[-2]
        n = self.data.shape[-1]
        k = other.data.shape[-1]
        batch = 1
        for extent in data.shape[:-2]:
            batch *= int(extent)
        flops = 2 * batch * int(m) * int(n) * int(k)
        if _counter_stack:
            for counter in _counter_stack:
                counter.total += flops
        out = self._make(data, (self, other), "matmul")
        if out.requires_grad:
            def _bw():
                if _counter_stack:
                    # dA = dC @ B^T and dB = A^T @ dC each cost the same as
                    # the forward product, hence backward adds 2x.
                    for counter in _counter_stack:
                        counter.total += 2 * flops
                self._accumulate(np.matmul(out.grad, np.swapaxes(other.data, -1, -2)), fresh=True)
                other._accumulate(np.matmul(np.swapaxes(self.data, -1, -2), out.grad), fresh=True)
            out._backward = _bw
        return out

    # ---- nonlinearities ----

    def relu(self) -> "Tensor":
        out = self._make(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * (self.data > 0), fresh=True)
            out._backward = _bw
        return out

    def silu(self) -> "Tensor":
        sig = _stable_sigmoid(self.data)
        out = self._make(self.data * sig, (self,), "silu")
        if out.requires_grad:
            def _bw():
                # d silu/dx = sig * (1 + x * (1 - sig)), built in one buffer
                one = sig.dtype.type(1)
                t = one - sig
                np.multiply(t, self.data, out=t)
                np.add(t, one, out=t)
                np.multiply(t, sig, out=t)
                np.multiply(t, out.grad, out=t)
                self._accumulate(t, fresh=True)
            out._backward = _bw
        return out

    def softmax_lastdim(self) -> "Tensor":
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        out = self._make(y, (self,), "softmax")
        if out.requires_grad:
            def _bw():
                inner = np.einsum("...ij,...ij->...i", out.grad, y)[..., None]
                t = out.grad - inner
                np.multiply(t, y, out=t)
                self._accumulate(t, fresh=True)
            out._backward = _bw
        return out

    def causal_softmax(self) -> "Tensor":
        """Masked softmax over the last axis of (..., N, N) score arrays.

        Position j attends only to j' <= j. Masked entries come out exactly
        zero; the mask fill underflows to zero through exp, so no non-finite
        value ever reaches a tensor.
        """
        if self.ndim < 2 or self.data.shape[-1] != self.data.shape[-2]:
            raise ValueError("causal_softmax expects square (..., N, N) scores")
        n = self.data.shape[-1]
        mask = _causal_mask(n)
        # single working buffer: fill, shift, exponentiate, normalize in place;
        # exp(fill - rowmax) underflows to exactly 0, the diagonal keeps every
        # row's max finite, so masked entries need no second pass
        fill = np.float64(-1e30) if self.dtype == np.float64 else np.float32(-1e9)
        z = np.where(mask, self.data, fill)
        np.subtract(z, z.max(axis=-1, keepdims=True), out=z)
        np.exp(z, out=z)
        np.divide(z, z.sum(axis=-1, keepdims=True), out=z)
        y = z
        out = self._make(y, (self,), "causal_softmax")
        if out.requires_grad:
            def _bw():
                inner = np.einsum("...ij,...ij->...i", out.grad, y)[..., None]
                t = out.grad - inner
                np.multiply(t, y, out=t)
                self._accumulate(t, fresh=True)
            out._backward = _bw
        return out

    def rotary(self, cos: np.ndarray, sin: np.ndarray) -> "Tensor":
        """Apply rotary phases: x*cos + rotate_half(x)*sin over the last axis.

        cos/sin are constant (N, D) tables broadcast over leading dims; D must
        be even, rotate_half maps [x1, x2] to [-x2, x1].
        """
        d = self.data.shape[-1]
        if d % 2 != 0:
            raise ValueError("rotary width must be even")
        half = d // 2

        def rot(a: np.ndarray) -> np.ndarray:
            return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)

        out = self._make(self.data * cos + rot(self.data) * sin, (self,), "rotary")
        if out.requires_grad:
            def _bw():
                gs = out.grad * sin
                # adjoint of rotate_half is its inverse: [u1, u2] -> [u2, -u1]
                adj = np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1)
                self._accumulate(out.grad * cos + adj, fresh=True)
            out._backward = _bw
        return out


def concat(parts: "list[Tensor] | tuple[Tensor, ...]", axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`; the gradient splits back per part.

    Each part's gradient slice is copied out as an owned buffer, so parts
    that are long-lived leaves (parameters) never borrow graph temporaries.
    """
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat needs at least one tensor")
    out = parts[0]._make(np.concatenate([p.data for p in parts], axis=axis), parts, "concat")
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]

        def _bw():
            index = [slice(None)] * out.grad.ndim
            start = 0
            for part, size in zip(parts, sizes):
                index[axis] = slice(start, start + size)
                part._accumulate(np.ascontiguousarray(out.grad[tuple(index)]), fresh=True)
                start += size
        out._backward = _bw
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather out of an embedding table; gradient scatters back with +=."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("token id out of vocabulary range")
    out = table._make(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
            table._accumulate(g, fresh=True)
        out._backward = _bw
    return out


def next_token_cross_entropy(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Mean next-token cross entropy in nats.

    logits: (B, N, V); ids: (B, N). Position t predicts ids[t+1], so N-1
    positions per sequence are supervised. Log-sum-exp and the mean run in
    64-bit regardless of the logits dtype.
    """
    ids = np.asarray(ids)
    if logits.ndim != 3 or ids.ndim != 2 or ids.shape != logits.shape[:2]:
        raise ValueError("expected logits (B, N, V) and ids (B, N)")
    b, n, v = logits.shape
    if n < 2:
        raise ValueError("need at least 2 tokens for a supervised position")
    targets = ids[:, 1:]
    z = logits.data[:, :-1, :].astype(np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(sez)
    rows = np.arange(b)[:, None]
    cols = np.arange(n - 1)[None, :]
    picked = logp[rows, cols, targets]
    count = b * (n - 1)
    loss = np.asarray(-picked.sum() / count, dtype=np.float64)
    out = logits._make(loss, (logits,), "cross_entropy")
    if out.requires_grad:
        def _bw():
            soft = ez / sez
            soft[rows, cols, targets] -= 1.0
            g = np.zeros(logits.shape, dtype=np.float64)
            g[:, :-1, :] = soft * (float(out.grad) / count)
            logits._accumulate(g, fresh=True)
        out._backward = _bw
    return out
