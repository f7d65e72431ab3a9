"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one input requires a gradient. :func:`backward` walks the
tape once in reverse creation order, which is a valid reverse topological
order because a node can only consume tensors that already exist.

Binary elementwise ops require identical shapes. The only broadcasting
forms supported are the ones the model needs: ``add_bias`` (a vector added
along the last axis) and leading batch dimensions in :func:`matmul`.
"""

from __future__ import annotations

import builtins
import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "avejca_active_tape", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "avejca_grad_enabled", default=True
)


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[..., tuple]
    ctx: dict


@dataclass
class Tape:
    """Ordered record of operations for one forward/backward pass.

    Use as a context manager to make it the active tape. ``kinks`` collects
    the relu activation patterns of the forward pass so that gradient checks
    can tell when a finite-difference step crossed a non-differentiable point.
    """

    nodes: list[Node] = field(default_factory=list)
    kinks: list[np.ndarray] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def reset(self) -> None:
        for node in self.nodes:
            node.out.tape_id = None
        self.nodes.clear()
        self.kinks.clear()

    def record(self, node: Node) -> None:
        node.out.tape_id = len(self.nodes)
        self.nodes.append(node)

    def kink_signature(self) -> bytes:
        return b"".join(np.packbits(k).tobytes() for k in self.kinks)

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


_default_tape = Tape()


def current_tape() -> Tape:
    tape = _active_tape.get()
    return _default_tape if tape is None else tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, **ctx) -> Tensor:
    needs = tuple(t.requires_grad for t in inputs)
    track = _grad_enabled.get() and any(needs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out._grad = None
    out.tape_id = None
    if track:
        ctx["needs"] = needs
        current_tape().record(Node(out, inputs, backward_fn, ctx))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` for every tensor that requires grad and feeds ``loss``.

    Leaf gradients accumulate into any existing buffer.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = current_tape() if tape is None else tape
    seed = np.ones_like(loss.data)
    if loss.tape_id is None:
        _accumulate_leaf(loss, seed)
        return
    if loss.tape_id >= len(tape.nodes) or tape.nodes[loss.tape_id].out is not loss:
        raise ContractError("loss is not on the given tape")

    pending: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out._grad = g
        grads = node.backward_fn(g, node.ctx)
        for inp, gi, need in zip(node.inputs, grads, node.ctx["needs"]):
            if not need or gi is None:
                continue
            key = id(inp)
            if inp.tape_id is None:
                if key in leaves:
                    leaves[key] = (inp, leaves[key][1] + gi)
                else:
                    leaves[key] = (inp, gi)
            elif key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    for inp, g in leaves.values():
        _accumulate_leaf(inp, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t._grad is None:
        t._grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t._grad = t._grad + g


def _check_axis(t: Tensor, axis: int) -> int:
    nd = t.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} is invalid for shape {t.shape}")
    return axis % nd


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------- matmul


def _matmul_backward(g, ctx):
    a, b = ctx["a"], ctx["b"]
    ga = gb = None
    if ctx["needs"][0]:
        if b.ndim == 1:
            ga = _unbroadcast(np.multiply.outer(g, b), a.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if ctx["needs"][1]:
        if b.ndim == 1:
            gb = (a * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
        else:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions batch as in ``numpy.matmul``.

    A 1-d ``a`` is treated as a single row.
    """
    if a.ndim == 1 and b.ndim >= 2:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from exc
    return _make(out, (a, b), _matmul_backward, a=a.data, b=b.data)


def _transpose_backward(g, ctx):
    return (np.swapaxes(g, -1, -2),)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {t.shape}")
    return _make(np.swapaxes(t.data, -1, -2), (t,), _transpose_backward)


def _reshape_backward(g, ctx):
    return (g.reshape(ctx["shape"]),)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = t.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}") from exc
    return _make(out, (t,), _reshape_backward, shape=t.shape)


# ------------------------------------------------------- concat / split


def _concat_backward(g, ctx):
    return tuple(np.split(g, ctx["offsets"], axis=ctx["axis"]))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ax = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {ref} and {t.shape} are incompatible"
            )
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), _concat_backward, axis=ax, offsets=offsets)


def _slice_backward(g, ctx):
    full = np.zeros(ctx["shape"])
    full[ctx["index"]] = g
    return (full,)


def _slice(t: Tensor, ax: int, start: int, stop: int) -> Tensor:
    index = (slice(None),) * ax + (slice(start, stop),)
    return _make(t.data[index], (t,), _slice_backward, index=index, shape=t.shape)


def split(t: Tensor, axis: int, extents: Sequence[int]) -> list[Tensor]:
    """Cut ``t`` along ``axis`` into consecutive pieces of the given extents."""
    ax = _check_axis(t, axis)
    if builtins.sum(extents) != t.shape[ax] or any(e < 1 for e in extents):
        raise DimensionError(
            f"split extents {list(extents)} do not partition axis {axis} of shape {t.shape}"
        )
    pieces, start = [], 0
    for e in extents:
        pieces.append(_slice(t, ax, start, start + e))
        start += e
    return pieces


def _select_backward(g, ctx):
    full = np.zeros(ctx["shape"])
    full[ctx["index"]] = g
    return (full,)


def unbind(t: Tensor, axis: int) -> list[Tensor]:
    """Split along ``axis`` into unit pieces with that axis removed."""
    ax = _check_axis(t, axis)
    out = []
    for i in range(t.shape[ax]):
        index = (slice(None),) * ax + (i,)
        out.append(_make(t.data[index], (t,), _select_backward, index=index, shape=t.shape))
    return out


def _stack_backward(g, ctx):
    return tuple(np.moveaxis(g, ctx["axis"], 0))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shapes {ref} and {t.shape} differ")
    nd = len(ref) + 1
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} is invalid for stacking shape {ref}")
    ax = axis % nd
    out = np.stack([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), _stack_backward, axis=ax)


# ----------------------------------------------------------- elementwise


def _add_backward(g, ctx):
    return g, g


def _sub_backward(g, ctx):
    return g, -g


def _mul_backward(g, ctx):
    return g * ctx["b"], g * ctx["a"]


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), _add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), _sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), _mul_backward, a=a.data, b=b.data)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def _scale_backward(g, ctx):
    return (g * ctx["s"],)


def scale(t: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(t.data * s, (t,), _scale_backward, s=s)


def _add_bias_backward(g, ctx):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def add_bias(t: Tensor, bias: Tensor) -> Tensor:
    """``t + bias`` with ``bias`` a vector repeated along every leading axis."""
    if bias.ndim != 1 or t.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match last axis of {t.shape}")
    return _make(t.data + bias.data, (t, bias), _add_bias_backward)


# ------------------------------------------------------------ activations


def _tanh_backward(g, ctx):
    y = ctx["y"]
    return (g * (1.0 - y * y),)


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _make(y, (t,), _tanh_backward, y=y)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_backward(g, ctx):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def sigmoid(t: Tensor) -> Tensor:
    y = _sigmoid(t.data)
    return _make(y, (t,), _sigmoid_backward, y=y)


def _relu_backward(g, ctx):
    return (g * ctx["mask"],)


def relu(t: Tensor) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is taken as 0."""
    mask = t.data > 0
    tape = _active_tape.get()
    if tape is not None:
        tape.kinks.append(mask)
    return _make(np.where(mask, t.data, 0.0), (t,), _relu_backward, mask=mask)


def _softmax_backward(g, ctx):
    y, ax = ctx["y"], ctx["axis"]
    return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(t, axis)
    z = t.data - t.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return _make(y, (t,), _softmax_backward, y=y, axis=ax)


def _log_sigmoid_backward(g, ctx):
    return (g * _sigmoid(-ctx["x"]),)


def log_sigmoid(t: Tensor) -> Tensor:
    x = t.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(y, (t,), _log_sigmoid_backward, x=x)


def activation(t: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "tanh":
        return tanh(t)
    if kind == "relu":
        return relu(t)
    if kind == "sigmoid":
        return sigmoid(t)
    if kind == "softmax":
        return softmax(t, axis)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------- reductions


def _sum_backward(g, ctx):
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def sum(t: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(t.data.sum()), (t,), _sum_backward, shape=t.shape)


def _mean_backward(g, ctx):
    shape, ax = ctx["shape"], ctx["axis"]
    if ax is None:
        return (np.full(shape, float(g) / np.prod(shape)),)
    return (np.broadcast_to(np.expand_dims(g, ax) / shape[ax], shape).copy(),)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(t.data.mean()), (t,), _mean_backward, shape=t.shape, axis=None)
    ax = _check_axis(t, axis)
    return _make(t.data.mean(axis=ax), (t,), _mean_backward, shape=t.shape, axis=ax)


def _max_backward(g, ctx):
    full = np.zeros(ctx["shape"])
    idx = np.expand_dims(ctx["arg"], ctx["axis"])
    np.put_along_axis(full, idx, np.expand_dims(g, ctx["axis"]), axis=ctx["axis"])
    return (full,)


def max(t: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties send the gradient to the first maximum."""
    ax = _check_axis(t, axis)
    arg = t.data.argmax(axis=ax)
    out = np.take_along_axis(t.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    return _make(out, (t,), _max_backward, shape=t.shape, axis=ax, arg=arg)


# --------------------------------------------------------- gradient check


@dataclass
class InputCheck:
    name: str
    max_rel_error: float
    checked: int
    excluded: int
    worst_index: tuple[int, ...] | None


@dataclass
class GradCheckReport:
    tol: float
    inputs: list[InputCheck]

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error <= self.tol for c in self.inputs)

    @property
    def max_rel_error(self) -> float:
        return builtins.max((c.max_rel_error for c in self.inputs), default=0.0)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` to central differences.

    The relative error of one coordinate is ``|g - n| / max(|g|, |n|, floor)``.
    Coordinates whose +h / -h evaluations land on different relu activation
    patterns straddle a kink; they are counted as excluded instead of failed.
    ``max_coords`` caps the coordinates probed per input (sampled with ``seed``).
    """
    inputs = list(inputs)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ContractError("grad_check inputs must be finite")
        t.requires_grad = True
        t.zero_grad()

    with Tape() as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        base_sig = tape.kink_signature()
        backward(out, tape)
    analytic = [t.grad.copy() for t in inputs]

    def evaluate() -> tuple[float, bytes]:
        with no_grad(), Tape() as probe:
            val = float(f(*inputs).data)
            return val, probe.kink_signature()

    rng = np.random.default_rng(seed)
    results = []
    for t, g, name in zip(inputs, analytic, names):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, worst_idx, excluded = 0.0, None, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = evaluate()
            flat[i] = orig - h
            fm, sm = evaluate()
            flat[i] = orig
            if sp != sm or sp != base_sig:
                excluded += 1
                continue
            num = (fp - fm) / (2.0 * h)
            ana = g.reshape(-1)[i]
            denom = builtins.max(abs(ana), abs(num), floor)
            err = abs(ana - num) / denom
            if err > worst:
                worst, worst_idx = err, tuple(int(v) for v in np.unravel_index(i, t.shape))
        results.append(InputCheck(name, worst, len(coords) - excluded, excluded, worst_idx))
    return GradCheckReport(tol=tol, inputs=results)
