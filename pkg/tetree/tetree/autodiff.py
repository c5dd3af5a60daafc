"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive computes its forward value with numpy and, when a `Tape` is active and one of its
operands requires a gradient, records a `TapeEntry` holding the local backward rule. Backward rules
only use the arrays captured at forward time, so a backward pass never re-enters a forward primitive.

The closed primitive set is: matmul, add, mul, softmax_rows, layer_norm, gelu, gather, reshape,
transpose, log, exp and reduce_sum. Everything else in this module is composed from them; other
modules extend the tape only through `apply` (the CTC loss node uses it for its analytic gradient).
"""
import math
import threading
from collections import Counter
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from tetree.errors import ContractException
from tetree.errors import DimensionException

DEFAULT_DTYPE = np.float64

# Forward invocations per primitive. Backward never touches these counters.
op_counts: Counter = Counter()
_op_counts_lock = threading.Lock()

_GELU_C = math.sqrt(2.0 / math.pi)


def precision_dtype(bits: int) -> np.dtype:
    if bits == 64:
        return np.dtype(np.float64)
    if bits == 32:
        return np.dtype(np.float32)
    raise ContractException("Precision must be 32 or 64 bits but received %d." % bits)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "tape_id", "name")

    def __init__(
        self,
        values: Union[np.ndarray, float, Sequence[float], Sequence[Sequence[float]]],
        requires_grad: bool = False,
        name: str = "",
        dtype: Optional[np.dtype] = None,
    ) -> None:
        array = np.asarray(values)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = self.name + ": " if self.name else ""
        return "Tensor(%sshape=%s, requires_grad=%s)" % (label, str(self.shape), self.requires_grad)


Operand = Union[Tensor, np.ndarray, float]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


@dataclass
class Tape:
    """
        Ordered record of primitive applications. Entries are appended in evaluation order, so every
        operand of entry i is either a leaf or the output of some entry j < i.
    """
    entries: List[TapeEntry] = field(default_factory=list)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardRule) -> None:
        output.tape_id = len(self.entries)
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def constant(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def apply(op: str, inputs: Tuple[Tensor, ...], values: np.ndarray, backward: BackwardRule) -> Tensor:
    """
        Wraps a forward value as a tensor and records it on the active tape when any input needs a gradient.
    """
    with _op_counts_lock:
        op_counts[op] += 1
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=tracked)
    tape = active_tape()
    if tracked and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionException("matmul inner dimensions disagree", a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape) if b.requires_grad else None
        return ga, gb

    return apply("matmul", (a, b), np.matmul(av, bv), backward)


def add(a: Operand, b: Operand) -> Tensor:
    ta = constant(a, b if isinstance(b, Tensor) else None)
    tb = constant(b, ta)
    sa, sb = ta.shape, tb.shape

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return apply("add", (ta, tb), ta.values + tb.values, backward)


def mul(a: Operand, b: Operand) -> Tensor:
    ta = constant(a, b if isinstance(b, Tensor) else None)
    tb = constant(b, ta)
    av, bv = ta.values, tb.values

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = unbroadcast(g * bv, av.shape) if ta.requires_grad else None
        gb = unbroadcast(g * av, bv.shape) if tb.requires_grad else None
        return ga, gb

    return apply("mul", (ta, tb), av * bv, backward)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply("softmax_rows", (x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractException("layer_norm eps must be positive but received %g." % eps)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionException("layer_norm gain/bias must match the last dimension", x.shape, gain.shape)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    gv = gain.values
    reduce_axes = tuple(range(x.values.ndim - 1))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gx = None
        if x.requires_grad:
            d_hat = g * gv
            gx = inv_std * (
                d_hat
                - d_hat.mean(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
            )
        g_gain = (g * x_hat).sum(axis=reduce_axes) if gain.requires_grad else None
        g_bias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return gx, g_gain, g_bias

    return apply("layer_norm", (x, gain, bias), x_hat * gv + bias.values, backward)


def gelu(x: Tensor) -> Tensor:
    xv = x.values
    inner = _GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv)
        return (g * d,)

    return apply("gelu", (x,), 0.5 * xv * (1.0 + t), backward)


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """
        Row lookup: out[..., :] = table[ids[...], :].
    """
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size > 0 and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise ContractException("Token id out of range [0, %d): found %d." % (rows, bad))
    shape = table.shape

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return apply("gather", (table,), table.values[ids], backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g.reshape(original),)

    return apply("reshape", (x,), x.values.reshape(shape), backward)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.transpose(g, inverse),)

    return apply("transpose", (x,), np.transpose(x.values, axes), backward)


def log(x: Tensor) -> Tensor:
    xv = x.values

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g / xv,)

    return apply("log", (x,), np.log(xv), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * y,)

    return apply("exp", (x,), y, backward)


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply("reduce_sum", (x,), np.asarray(x.values.sum(axis=axis, keepdims=keepdims)), backward)


# Composed operations.

def neg(x: Tensor) -> Tensor:
    return mul(x, -1.0)


def sub(a: Operand, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mean(x: Tensor) -> Tensor:
    return mul(reduce_sum(x), 1.0 / max(1, x.values.size))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def log_softmax_rows(x: Tensor) -> Tensor:
    """
        Stable log-softmax over the last axis. The max shift is a constant: log-softmax is shift invariant,
        so treating it as constant leaves the gradient exact.
    """
    shifted = add(x, -x.values.max(axis=-1, keepdims=True))
    return sub(shifted, log(reduce_sum(exp(shifted), axis=-1, keepdims=True)))


def backward(loss: Tensor, tape: Tape) -> None:
    """
        Accumulates d(loss)/d(leaf) into the grad buffer of every leaf that requires a gradient.
        Leaf gradients are added to what is already there, so two calls without zeroing double them.
        Intermediate tensors receive the gradient of this pass.
    """
    if loss.values.size != 1:
        raise ContractException("backward requires a scalar loss but received shape %s." % str(loss.shape))
    if loss.tape_id is None or loss.tape_id >= len(tape.entries) or tape.entries[loss.tape_id].output is not loss:
        raise ContractException("The loss was not produced on the given tape.")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for entry in reversed(tape.entries[: loss.tape_id + 1]):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        entry.output.grad = g
        for operand, operand_grad in zip(entry.inputs, entry.backward(g)):
            if not operand.requires_grad:
                continue
            if operand.tape_id is None:
                buffer = operand.ensure_grad()
                if operand_grad is not None:
                    buffer += operand_grad
            elif operand_grad is not None:
                key = id(operand)
                if key in pending:
                    pending[key] = pending[key] + operand_grad
                else:
                    pending[key] = operand_grad


@dataclass
class ParameterCheck:
    name: str
    max_relative_error: float
    coordinates: int
    failure: Optional[str] = None


@dataclass
class GradCheckReport:
    parameters: List[ParameterCheck]
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max((p.max_relative_error for p in self.parameters), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.failure is None and p.max_relative_error < self.tolerance for p in self.parameters)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: List[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coordinates: int = 64,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """
    Compares analytic gradients against central differences.

    :param f: Deterministic closure computing a scalar loss from the current values of `params`.
    :param max_coordinates: Larger parameters are checked on a seeded sample of this many coordinates.
    :param floor: Denominator floor; differences on gradients smaller than this are compared absolutely.
    """
    if h <= 0:
        raise ContractException("Finite-difference step must be positive but received %g." % h)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [p.ensure_grad().copy() for p in params]

    rng = np.random.default_rng(seed)
    checks: List[ParameterCheck] = []
    for index, (p, grad) in enumerate(zip(params, analytic)):
        if not p.values.flags.c_contiguous:
            p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)
        if flat.size <= max_coordinates:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
        name = p.name or "param[%d]" % index
        worst = 0.0
        failure: Optional[str] = None
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            plus = f().item()
            flat[c] = original - h
            minus = f().item()
            flat[c] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                failure = "non-finite loss when perturbing %s at flat index %d" % (name, int(c))
                break
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad.reshape(-1)[c])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        checks.append(ParameterCheck(name, worst, len(coords), failure))
    return GradCheckReport(checks, tol)

