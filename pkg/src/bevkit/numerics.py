"""Dense float64 tensors with an opt-in reverse-mode tape.

Every learned block in the pipeline is assembled from the primitives here,
so one backward() implementation serves the whole model. Tensors are
immutable values; gradients live in the tape, keyed by tensor id, not on
the tensors themselves. Running ops outside any ``with Tape()`` block is
the tape-free inference path.
"""

from __future__ import annotations

import itertools
import struct
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NumericError",
    "DimensionError",
    "Tensor",
    "Tape",
    "TapeNode",
    "active_tape",
    "backward",
    "finite_diff_check",
    "LinearParams",
    "add",
    "mul",
    "sub",
    "linear",
    "matmul",
    "concat",
    "gather_rows",
    "scatter_add",
    "softmax",
    "sigmoid",
    "relu",
    "log",
    "exp",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "permute",
    "save_tensor",
    "load_tensor",
]


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


_tensor_ids = itertools.count(1)


class Tensor:
    """Immutable row-major float64 array with a process-unique id.

    The id is what the tape keys gradients by; two tensors never share one.
    Construction rejects NaN/Inf so a poisoned value surfaces at the op
    that made it instead of ten ops later.
    """

    __slots__ = ("data", "id")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_tensor_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.id})"

    # Operator sugar; routed through the module ops so it is tape-aware.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    op: str
    input_ids: tuple
    output_id: int
    saved: tuple
    vjp: Callable  # grad wrt output -> tuple of grads aligned with input_ids


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op record for one forward pass; single-owner, not shareable.

    Nodes are appended in execution order, which is already a topological
    order, so backward() is a single reverse sweep visiting each node once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.gradients: dict[int, Tensor] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a non-top tape")
        return False

    def record(self, op, inputs, output, saved, vjp):
        self.nodes.append(
            TapeNode(op, tuple(t.id for t in inputs), output.id, tuple(saved), vjp)
        )

    def grad(self, t: Tensor) -> Tensor:
        """Gradient of the last backward() wrt t; zeros if unreachable."""
        g = self.gradients.get(t.id)
        if g is None:
            return Tensor(np.zeros(t.shape))
        return g


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Populate tape.gradients for everything reachable from a scalar loss."""
    if loss.size != 1:
        raise DimensionError("backward requires a scalar loss")
    raw: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        gout = raw.get(node.output_id)
        if gout is None:
            continue
        for iid, gin in zip(node.input_ids, node.vjp(gout)):
            if gin is None:
                continue
            acc = raw.get(iid)
            raw[iid] = gin if acc is None else acc + gin
    tape.gradients = {k: Tensor(v) for k, v in raw.items()}
    return tape.gradients


def _emit(op, inputs, out_arr, saved, vjp) -> Tensor:
    out = Tensor(out_arr)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, saved, vjp)
    return out


def _as_scalar(x):
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _emit("add_scalar", (a,), a.data + s, (s,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, (), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return add(a, -s)
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _emit("mul_scalar", (a,), a.data * s, (s,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, (ad, bd), lambda g: (g * bd, g * ad))


@dataclass(frozen=True)
class LinearParams:
    """Affine map y = x W^T + b with weight [out, in] and bias [out]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("LinearParams: weight must be 2-D, bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"LinearParams: out dims disagree "
                f"({self.weight.shape[0]} vs {self.bias.shape[0]})"
            )

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """y[..., o] = sum_i x[..., i] W[o, i] + b[o], over the trailing axis."""
    if x.ndim < 1 or x.shape[-1] != p.in_dim:
        raise DimensionError(
            f"linear: trailing extent {x.shape[-1] if x.ndim else None} != in dim {p.in_dim}"
        )
    W, b = p.weight.data, p.bias.data
    xd = x.data
    out = xd @ W.T + b

    def vjp(g):
        g2 = g.reshape(-1, p.out_dim)
        x2 = xd.reshape(-1, p.in_dim)
        return (g @ W, g2.T @ x2, g2.sum(axis=0))

    return _emit("linear", (x, p.weight, p.bias), out, (xd,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, (), lambda g: (g @ bd.T, ad.T @ g))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat: empty input list")
    arrs = [t.data for t in parts]
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", tuple(parts), out, (axis,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by an integer index array; repeats allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    rows = x.shape[0]

    def vjp(g):
        z = np.zeros((rows,) + g.shape[1:])
        np.add.at(z, idx, g)
        return (z,)

    return _emit("gather_rows", (x,), x.data[idx], (idx,), vjp)


def scatter_add(values: Tensor, idx, num_rows: int) -> Tensor:
    """Accumulate value rows into a fresh [num_rows, ...] array at idx.

    np.add.at applies updates sequentially in index order, so repeated
    targets accumulate deterministically.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise DimensionError("scatter_add: index must be 1-D, one entry per value row")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise DimensionError("scatter_add: index out of range")
    out = np.zeros((num_rows,) + values.shape[1:])
    np.add.at(out, idx, values.data)
    return _emit("scatter_add", (values,), out, (idx, num_rows), lambda g: (g[idx],))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability vector along axis, computed with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax", (x,), y, (axis,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _emit("sigmoid", (x,), y, (), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), (), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _emit("log", (x,), y, (), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, (), lambda g: (g * y,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (x.data > lo) & (x.data < hi)
    return _emit(
        "clamp", (x,), np.clip(x.data, lo, hi), (lo, hi), lambda g: (g * inside,)
    )


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors the primitive name
    out = x.data.sum(axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (x,), out, (axis,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError("mean over an empty extent")
    out = x.data.mean(axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / count,)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return _emit("mean", (x,), out, (axis,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: {x.shape} -> {shape}: {err}") from None
    old = x.shape
    return _emit("reshape", (x,), out, (shape,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    return _emit(
        "permute", (x,), np.transpose(x.data, axes), (axes,), lambda g: (np.transpose(g, inv),)
    )


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of f and central differences.

    f must be a pure scalar-valued function of one tensor. Non-finite
    evaluations raise NumericError via the Tensor constructor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        out = f(x)
        if out.size != 1:
            raise DimensionError("finite_diff_check requires a scalar-valued f")
        backward(tape, out)
    analytic = tape.grad(x).data.ravel()
    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bump = np.array(flat)
        bump[i] = flat[i] + eps
        fp = f(Tensor(bump.reshape(x.shape))).item()
        bump[i] = flat[i] - eps
        fm = f(Tensor(bump.reshape(x.shape))).item()
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# --- serialization: magic "BKT1", u32 rank, u64 extents, f64 payload (LE) ---

_TENSOR_MAGIC = b"BKT1"


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<I", t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(t.data.astype("<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob, str(path))


def tensor_to_bytes(t: Tensor) -> bytes:
    return (
        _TENSOR_MAGIC
        + struct.pack("<I", t.ndim)
        + struct.pack(f"<{t.ndim}Q", *t.shape)
        + t.data.astype("<f8").tobytes()
    )


def tensor_from_bytes(blob: bytes, origin: str = "<bytes>") -> Tensor:
    if blob[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{origin}: bad tensor magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header = 8 + 8 * rank
    if len(blob) < header:
        raise ValueError(f"{origin}: truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    count = int(np.prod(shape)) if rank else 1
    payload = blob[header:]
    if len(payload) != 8 * count:
        raise ValueError(
            f"{origin}: payload holds {len(payload) // 8} values, shape needs {count}"
        )
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return Tensor(arr)
