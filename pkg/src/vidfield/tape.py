"""Dense tensors with reverse-mode differentiation on a flat tape.

Conventions
-----------
* A :class:`Tensor` wraps a float32 or float64 ndarray. Every primitive
  validates that its output is finite and raises :class:`NonFiniteError`
  otherwise.
* Differentiation is recorded on an ambient :class:`Tape` opened with a
  ``with`` block. Outside a tape, the same functions are plain numpy
  computations.
* The tape is a flat list of (output, parents, backward_fn) nodes replayed
  in exact reverse execution order; replaying it twice gives bitwise
  identical gradients. There is no graph optimization.
* Broadcasting in binary elementwise ops is restricted to equal shapes and
  tensor-scalar; anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Tolerances and finite-difference steps keyed by precision.
FD_EPSILON = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}
FD_TOLERANCE = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}


class Tensor:
    """Shape-carrying dense array of float32 or float64 scalars."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # Operator sugar; delegates to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor whose gradient is accumulated during backward."""
    return Tensor(data, dtype=dtype, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=False)


_ACTIVE: list["Tape"] = []


class Tape:
    """Flat record of executed primitives, replayed backwards for gradients."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self._nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tracked tensor.

        ``loss`` must be scalar. Grads touched by this tape are cleared
        first, so calling backward twice yields identical results.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for out, parents, _ in self._nodes:
            out.grad = None
            for p in parents:
                p.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            contribs = backward_fn(out.grad)
            for p, g in zip(parents, contribs):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.data.shape:
                    raise ShapeError(
                        f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
                    )
                p.grad = g if p.grad is None else p.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _track(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record the node if a tape is active and any parent is tracked."""
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward_fn)
    return out


# ---------------------------------------------------------------------------
# Elementwise primitives


def _binary_operands(a, b, op: str):
    """Resolve a binary op's operands under the equal-or-scalar rule.

    Returns (a_tensor, b_tensor_or_None, b_value). A python scalar stays a
    plain float and is not a differentiable parent.
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
        return a, b, b.data
    return a, None, float(b)


def add(a, b) -> Tensor:
    a, bt, bv = _binary_operands(a, b, "add")
    out = Tensor(a.data + bv)
    _check_finite(out.data, "add")

    def backward(g):
        ga = _reduce_to(g, a.shape)
        gb = _reduce_to(g, bt.shape) if bt is not None else None
        return (ga, gb) if bt is not None else (ga,)

    return _track(out, (a, bt) if bt is not None else (a,), backward)


def sub(a, b) -> Tensor:
    a, bt, bv = _binary_operands(a, b, "sub")
    out = Tensor(a.data - bv)
    _check_finite(out.data, "sub")

    def backward(g):
        ga = _reduce_to(g, a.shape)
        gb = _reduce_to(-g, bt.shape) if bt is not None else None
        return (ga, gb) if bt is not None else (ga,)

    return _track(out, (a, bt) if bt is not None else (a,), backward)


def mul(a, b) -> Tensor:
    a, bt, bv = _binary_operands(a, b, "mul")
    out = Tensor(a.data * bv)
    _check_finite(out.data, "mul")
    a_data = a.data

    def backward(g):
        ga = _reduce_to(g * bv, a.shape)
        gb = _reduce_to(g * a_data, bt.shape) if bt is not None else None
        return (ga, gb) if bt is not None else (ga,)

    return _track(out, (a, bt) if bt is not None else (a,), backward)


def div(a, b) -> Tensor:
    a, bt, bv = _binary_operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / bv)
    _check_finite(out.data, "div")
    a_data = a.data

    def backward(g):
        ga = _reduce_to(g / bv, a.shape)
        gb = _reduce_to(-g * a_data / (bv * bv), bt.shape) if bt is not None else None
        return (ga, gb) if bt is not None else (ga,)

    return _track(out, (a, bt) if bt is not None else (a,), backward)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` (identity or scalar under our rules)."""
    if g.shape == shape:
        return g
    # Only a scalar operand can differ in shape under the equal-or-scalar rule.
    return g.sum().reshape(shape)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    mask = x.data >= 0
    out = Tensor(np.where(mask, x.data, slope * x.data))
    _check_finite(out.data, "leaky_relu")

    def backward(g):
        return (np.where(mask, g, slope * g),)

    return _track(out, (x,), backward)


def sigmoid(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    # exp(-|x|) never overflows, so both branches stay finite.
    d = x.data
    z = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(s)
    _check_finite(out.data, "sigmoid")

    def backward(g):
        return (g * s * (1.0 - s),)

    return _track(out, (x,), backward)


def tanh(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    _check_finite(out.data, "tanh")

    def backward(g):
        return (g * (1.0 - t * t),)

    return _track(out, (x,), backward)


def square(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    out = Tensor(x.data * x.data)
    _check_finite(out.data, "square")
    x_data = x.data

    def backward(g):
        return (2.0 * x_data * g,)

    return _track(out, (x,), backward)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "square": square,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds require ``b``, unary kinds forbid it."""
    if op_kind not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    return fn(a)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} differ")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")
    a_data, b_data = a.data, b.data

    def backward(g):
        return (g @ b_data.T, a_data.T @ g)

    return _track(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear expects x (M,K), w (K,N), b (N,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = Tensor(x.data @ w.data + b.data)
    _check_finite(out.data, "linear")
    x_data, w_data = x.data, w.data

    def backward(g):
        return (g @ w_data.T, x_data.T @ g, g.sum(axis=0))

    return _track(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# Structural primitives (artifact plumbing: shape moves and reductions the
# representations cannot be written without)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _track(out, (x,), backward)


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last needs at least one operand")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat_last: leading dimensions differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        grads = []
        offset = 0
        for wdt in widths:
            grads.append(np.ascontiguousarray(g[..., offset : offset + wdt]))
            offset += wdt
        return tuple(grads)

    return _track(out, tuple(parts), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for width {width}")
    out = Tensor(np.ascontiguousarray(x.data[..., start:stop]))

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _track(out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    _check_finite(out.data, "sum")
    shape, dtype = x.data.shape, x.data.dtype

    def backward(g):
        return (np.full(shape, g, dtype=dtype),)

    return _track(out, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    _check_finite(out.data, "mean")
    shape, dtype = x.data.shape, x.data.dtype
    inv = 1.0 / x.data.size

    def backward(g):
        return (np.full(shape, g * inv, dtype=dtype),)

    return _track(out, (x,), backward)


def mask_blend(mask: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``mask * a + (1 - mask) * b`` with mask (..., 1) spread over channels."""
    if a.shape != b.shape:
        raise ShapeError(f"mask_blend: branch shapes {a.shape} and {b.shape} differ")
    if mask.shape != a.shape[:-1] + (1,):
        raise ShapeError(
            f"mask_blend: mask shape {mask.shape} must be {a.shape[:-1] + (1,)}"
        )
    m = mask.data
    out = Tensor(m * a.data + (1.0 - m) * b.data)
    _check_finite(out.data, "mask_blend")
    a_data, b_data = a.data, b.data

    def backward(g):
        gm = ((a_data - b_data) * g).sum(axis=-1, keepdims=True)
        return (gm, m * g, (1.0 - m) * g)

    return _track(out, (mask, a, b), backward)
