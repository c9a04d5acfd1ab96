"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the recorded DAG once in reverse
topological order and accumulates into ``.grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass, field

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward
        # only leaves hold a persistent accumulator
        self.grad = np.zeros_like(self.data) if requires_grad and not parents else None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self):
        return sum_(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def sum_(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics for operands of rank >= 2, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), grad)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum where every index of an operand appears in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = inputs.split(",")
    for idx, other in ((ia, ib), (ib, ia)):
        if len(set(idx)) != len(idx) or any(c not in other and c not in out_idx for c in idx):
            raise ValueError(f"einsum: unsupported subscripts {subscripts!r}")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"einsum: {exc}") from None
    return _make(
        out, "einsum", (a, b),
        lambda g: (
            np.einsum(f"{out_idx},{ib}->{ia}", g, b.data),
            np.einsum(f"{out_idx},{ia}->{ib}", g, a.data),
        ),
    )


_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("kink_log", default=None)


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every leaky_relu input evaluated inside the block."""
    log: list[np.ndarray] = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0
    log = _kink_log.get()
    if log is not None:
        log.append(positive.copy())
    return _make(
        np.where(positive, a.data, slope * a.data), "leaky_relu", (a,),
        lambda g: (np.where(positive, g, slope * g),),
    )


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if axis != -1 and axis != tensors[0].ndim - 1:
        raise ValueError("concat only joins along the last axis")
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ValueError(f"concat: leading shapes differ: {sorted(lead)}")
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=-1), "concat", tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=-1)),
    )


def slice_(a: Tensor, index) -> Tensor:
    """Basic and integer-array indexing; repeated indices accumulate in the backward pass."""
    out = a.data[index]

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, "slice", (a,), grad)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def grad(g):
        full = np.zeros(a.shape[:axis] + (a.shape[axis],) + a.shape[axis + 1:])
        moved = np.moveaxis(full, axis, 0)
        gm = g.reshape(a.shape[:axis] + (indices.size,) + a.shape[axis + 1:])
        np.add.at(moved, indices.ravel(), np.moveaxis(gm, axis, 0))
        return (full,)

    return _make(out, "take", (a,), grad)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries get exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no valid positions")
    z = np.where(mask, scores.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _make(p, "masked_softmax", (scores,), grad)


def causal_dilated_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Channel-wise causal convolution: y[c, t] = sum_i kernel[c, i] * x[c, t - i*dilation].

    ``x`` is (..., C, L) and ``kernel`` is (C, k); positions before the start
    read as zero.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 2 or x.ndim < 2 or x.shape[-2] != kernel.shape[0]:
        raise ValueError(f"causal_dilated_conv1d: input {x.shape} vs kernel {kernel.shape}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    k = kernel.shape[1]
    length = x.shape[-1]
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros(x.shape[:-1] + (pad,)), x.data], axis=-1)
    # taps[..., c, i, t] = x[..., c, t - i*dilation]
    taps = np.stack([xp[..., pad - i * dilation: pad - i * dilation + length] for i in range(k)], axis=-2)
    out = np.einsum("...cit,ci->...ct", taps, kernel.data)

    def grad(g):
        c = kernel.shape[0]
        gk = np.einsum("ncit,nct->ci", taps.reshape(-1, c, k, length), g.reshape(-1, c, length))
        gxp = np.zeros(x.shape[:-1] + (pad + length,))
        for i in range(k):
            gxp[..., pad - i * dilation: pad - i * dilation + length] += g * kernel.data[:, i:i + 1]
        return gxp[..., pad:], gk

    return _make(out, "causal_dilated_conv1d", (x, kernel), grad)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _make(
        np.asarray((diff**2).mean()), "mse", (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[int, tuple[int, ...]] | None = None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} checked={self.n_checked} "
                f"excluded={len(self.excluded)}")


def grad_check(fn, inputs: list[Tensor], step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Coordinates whose +/- perturbation flips the sign of any leaky_relu input
    are excluded, since the function is not differentiable there.
    """
    for t in inputs:
        t.zero_grad()
    fn(*inputs).backward()
    analytic = [t.grad.copy() for t in inputs]

    worst_err, worst, checked, excluded = 0.0, None, 0, []
    for n, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for pos in range(flat.size):
            orig = flat[pos]
            flat[pos] = orig + step
            with record_kinks() as up_signs:
                f_up = float(fn(*inputs).data)
            flat[pos] = orig - step
            with record_kinks() as down_signs:
                f_down = float(fn(*inputs).data)
            flat[pos] = orig
            coord = np.unravel_index(pos, t.shape)
            if any(not np.array_equal(u, d) for u, d in zip(up_signs, down_signs)):
                excluded.append((n, tuple(int(c) for c in coord)))
                continue
            numeric = (f_up - f_down) / (2.0 * step)
            a = analytic[n].reshape(-1)[pos]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (n, tuple(int(c) for c in coord))
    return GradCheckReport(worst_err, worst_err < tolerance, checked, excluded, worst)


_MAGIC = b"DSTP"
_VERSION = 1


def save_params(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Header (magic, version, count) then per tensor: name, rank, dims, little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    return out
