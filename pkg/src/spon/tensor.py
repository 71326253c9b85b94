"""Dense float arrays with taped reverse-mode differentiation.

Values are C-contiguous numpy arrays, float32 by default (float64 is also
accepted so that reference computations can rerun a graph at higher
precision). Every op validates that its output is finite; NaN or Inf is an
error state, not a value.

Differentiation uses a Wengert list: ops executed while an operand belongs
to a :class:`Tape` append a backward closure, and :func:`backward` replays
the closures in exact reverse execution order, accumulating gradients into
every tensor that participates. Parameters are tensors registered on the
tape via :meth:`Tape.parameter`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by '{op}'")
    return data


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d scalars to shape (1,); avoid that
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense array node; may carry a gradient buffer when on a tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        arr = _contiguous(np.asarray(arr, dtype=dtype))
        self.data = _checked(arr, "tensor")
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of executed ops plus the parameter registry."""

    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []
        self._params: list[Tensor] = []

    def parameter(self, data, dtype=None) -> Tensor:
        """Wrap `data` as a trainable tensor; gradients accumulate in .grad."""
        t = Tensor(data, tape=self, dtype=dtype)
        t.grad = np.zeros_like(t.data)
        self._params.append(t)
        return t

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def _record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)


def backward(loss: Tensor, tape: Tape) -> list[np.ndarray]:
    """Replay the tape in reverse; returns gradients per registered parameter.

    `loss` must be a scalar produced on `tape`. Gradient buffer shapes equal
    their parameter shapes.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    _ensure_grad(loss)
    loss.grad[...] = 1.0
    for fn in reversed(tape._ops):
        fn()
    return [p.grad.copy() for p in tape._params]


# ---------------------------------------------------------------------------
# op plumbing

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, op: str, *inputs: Tensor) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError(f"'{op}' mixes tensors from different tapes")
    out = Tensor.__new__(Tensor)
    out.data = _checked(_contiguous(np.asarray(data)), op)
    out.grad = None
    out.tape = tape
    return out


def _ensure_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    """same-shape, scalar, or trailing row-vector; anything else is an error."""
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar"
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "row"
    raise DimensionError(f"'{op}' cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return g.sum(dtype=g.dtype).reshape(())
    return g.reshape(-1, shape[0]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise suite

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    kind = _broadcast_kind(a, b, "add")
    out = _result(a.data + b.data, "add", a, b)
    if out.tape is not None:
        def bwd() -> None:
            g = out.grad
            if a.tape is not None:
                _ensure_grad(a)
                a.grad += g
            if b.tape is not None:
                _ensure_grad(b)
                b.grad += _reduce_to(g, kind, b.shape)
        out.tape._record(bwd)
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    kind = _broadcast_kind(a, b, "mul")
    out = _result(a.data * b.data, "mul", a, b)
    if out.tape is not None:
        def bwd() -> None:
            g = out.grad
            if a.tape is not None:
                _ensure_grad(a)
                a.grad += g * b.data
            if b.tape is not None:
                _ensure_grad(b)
                b.grad += _reduce_to(g * a.data, kind, b.shape)
        out.tape._record(bwd)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = _result(np.maximum(x.data, 0), "relu", x)
    if out.tape is not None:
        # derivative at exactly 0 is 0 (strict > keeps the subgradient choice)
        mask = (x.data > 0).astype(x.dtype)
        def bwd() -> None:
            if x.tape is not None:
                _ensure_grad(x)
                x.grad += out.grad * mask
        out.tape._record(bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = _result(x.data * s, "silu", x)
    if out.tape is not None:
        def bwd() -> None:
            if x.tape is not None:
                _ensure_grad(x)
                x.grad += out.grad * (s + x.data * s * (1.0 - s))
        out.tape._record(bwd)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax; rows along `axis` sum to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, "softmax", x)
    if out.tape is not None:
        def bwd() -> None:
            if x.tape is not None:
                g = out.grad
                dot = (g * y).sum(axis=axis, keepdims=True)
                _ensure_grad(x)
                x.grad += (g - dot) * y
        out.tape._record(bwd)
    return out


def rms_norm(x, gain, eps: float) -> Tensor:
    """Scale rows to unit root-mean-square (plus eps) and multiply by gain."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    if gain.data.ndim not in (0, 1):
        raise DimensionError("rms_norm gain must be a scalar or a vector")
    if gain.data.ndim == 1 and gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"gain length {gain.shape[0]} != last dim {x.shape[-1]}")
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    y = x.data * inv * gain.data
    out = _result(y, "rms_norm", x, gain)
    if out.tape is not None:
        def bwd() -> None:
            g = out.grad
            gg = g * gain.data
            if x.tape is not None:
                dot = (gg * x.data).mean(axis=-1, keepdims=True)
                _ensure_grad(x)
                x.grad += inv * gg - (inv ** 3) * dot * x.data
            if gain.tape is not None:
                contrib = g * x.data * inv
                _ensure_grad(gain)
                if gain.data.ndim == 0:
                    gain.grad += contrib.sum(dtype=x.dtype)
                else:
                    gain.grad += contrib.reshape(-1, d).sum(axis=0)
        out.tape._record(bwd)
    return out


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = _result(x.data.reshape(shape), "reshape", x)
    if out.tape is not None:
        def bwd() -> None:
            if x.tape is not None:
                _ensure_grad(x)
                x.grad += out.grad.reshape(old)
        out.tape._record(bwd)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _result(np.transpose(x.data, axes), "transpose", x)
    if out.tape is not None:
        def bwd() -> None:
            if x.tape is not None:
                _ensure_grad(x)
                x.grad += np.transpose(out.grad, inv)
        out.tape._record(bwd)
    return out


# ---------------------------------------------------------------------------
# matmul and lookups

def matmul(a, b) -> Tensor:
    """Matrix product; 2-D, or 3-D with matching leading batch dimension."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise DimensionError("matmul supports 2-D and batched 3-D operands")
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, "matmul", a, b)
    if out.tape is not None:
        def bwd() -> None:
            g = out.grad
            if a.tape is not None:
                _ensure_grad(a)
                a.grad += g @ np.swapaxes(b.data, -1, -2)
            if b.tape is not None:
                _ensure_grad(b)
                b.grad += np.swapaxes(a.data, -1, -2) @ g
        out.tape._record(bwd)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]. Gradients scatter-add into table."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError("embedding ids must be a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = _result(table.data[ids], "embedding", table)
    if out.tape is not None:
        def bwd() -> None:
            if table.tape is not None:
                _ensure_grad(table)
                np.add.at(table.grad, ids, out.grad)
        out.tape._record(bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and losses

def total(x) -> Tensor:
    """Sum of all elements as a scalar (64-bit accumulation)."""
    x = as_tensor(x)
    value = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    out = _result(value, "total", x)
    if out.tape is not None:
        def bwd() -> None:
            if x.tape is not None:
                _ensure_grad(x)
                x.grad += out.grad
        out.tape._record(bwd)
    return out


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """Stabilized log-softmax over the last axis, in the input's dtype."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-wise softmax."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy shapes: {logits.shape} vs {targets.shape}")
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(n), targets]
    value = np.asarray(nll.mean(dtype=np.float64), dtype=logits.dtype)
    out = _result(value, "cross_entropy", logits)
    if out.tape is not None:
        def bwd() -> None:
            if logits.tape is not None:
                p = np.exp(logp)
                p[np.arange(n), targets] -= 1.0
                _ensure_grad(logits)
                logits.grad += out.grad * p / np.asarray(n, dtype=logits.dtype)
        out.tape._record(bwd)
    return out


def kl_to_teacher(teacher_logp: np.ndarray, student_logits: Tensor) -> Tensor:
    """Mean per-row KL(teacher || student) with the teacher held constant.

    `teacher_logp` must already be log-probabilities (rows of log-softmax).
    """
    if teacher_logp.shape != student_logits.shape:
        raise DimensionError(
            f"teacher/student shapes disagree: {teacher_logp.shape} vs {student_logits.shape}"
        )
    n = student_logits.shape[0]
    logq = log_softmax_np(student_logits.data)
    p = np.exp(teacher_logp)
    value = np.asarray(
        (p.astype(np.float64) * (teacher_logp.astype(np.float64) - logq.astype(np.float64)))
        .sum(axis=-1)
        .mean(),
        dtype=student_logits.dtype,
    )
    out = _result(value, "kl_to_teacher", student_logits)
    if out.tape is not None:
        def bwd() -> None:
            if student_logits.tape is not None:
                q = np.exp(logq)
                _ensure_grad(student_logits)
                student_logits.grad += out.grad * (q - p.astype(logq.dtype)) / np.asarray(
                    n, dtype=student_logits.dtype
                )
        out.tape._record(bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Plain Adam, no schedule. State is keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, named_params: dict[str, Tensor]) -> None:
        """Update each tensor's data in place from its accumulated gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            p.data -= np.asarray(self.lr, dtype=p.dtype) * mhat / (np.sqrt(vhat) + self.eps)
