"""Bidirectional LSTM re-representation with residual embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError

GATES = ("i", "f", "o", "g")
RESIDUAL_MODES = ("input", "output", "off")


@dataclass
class LstmCellParams:
    """Gate blocks ordered input, forget, output, candidate.

    ``input_weights[j]`` is hidden x in_dim, ``hidden_weights[j]`` is
    hidden x hidden and ``biases[j]`` has length hidden.
    """

    input_weights: list[Tensor]
    hidden_weights: list[Tensor]
    biases: list[Tensor]

    @property
    def hidden(self) -> int:
        return self.hidden_weights[0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.input_weights[0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [*self.input_weights, *self.hidden_weights, *self.biases]

    def validate(self) -> None:
        h, n = self.hidden, self.in_dim
        for w in self.input_weights:
            if w.shape != (h, n):
                raise DimensionError(f"input weight block {w.shape} != {(h, n)}")
        for w in self.hidden_weights:
            if w.shape != (h, h):
                raise DimensionError(f"hidden weight block {w.shape} != {(h, h)}")
        for b in self.biases:
            if b.shape != (h,):
                raise DimensionError(f"bias block {b.shape} != {(h,)}")


@dataclass
class BiLstmParams:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams
    # learned map of the raw step feature onto the output, only for residual="output"
    residual_proj: Tensor | None = None

    @property
    def hidden(self) -> int:
        return self.forward_cell.hidden

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden


def cell_shapes(in_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for g in GATES:
        shapes[f"W_{g}"] = (hidden, in_dim)
    for g in GATES:
        shapes[f"U_{g}"] = (hidden, hidden)
    for g in GATES:
        shapes[f"b_{g}"] = (hidden,)
    return shapes


def bilstm_shapes(in_dim: int, hidden: int, residual: str = "off") -> dict[str, tuple[int, ...]]:
    """Parameter block shapes of a Bi-LSTM, keyed ``forward.W_i`` etc.

    With residual="input" each step also receives the adjacent step's
    hidden output, so the cell input width grows by ``hidden``.
    """
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"residual must be one of {RESIDUAL_MODES}, got {residual!r}")
    cell_in = in_dim + hidden if residual == "input" else in_dim
    shapes = {}
    for direction in ("forward", "backward"):
        for name, shape in cell_shapes(cell_in, hidden).items():
            shapes[f"{direction}.{name}"] = shape
    if residual == "output":
        shapes["residual_proj"] = (2 * hidden, in_dim)
    return shapes


def init_block(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(hidden), 1/sqrt(hidden)) weights; forget bias 1, other biases 0."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf.startswith("b_"):
        return np.full(shape, 1.0 if leaf == "b_f" else 0.0)
    bound = 1.0 / np.sqrt(shape[0] if leaf != "residual_proj" else shape[1])
    return rng.uniform(-bound, bound, size=shape)


def cell_from(params: dict[str, Tensor], prefix: str) -> LstmCellParams:
    return LstmCellParams(
        input_weights=[params[f"{prefix}W_{g}"] for g in GATES],
        hidden_weights=[params[f"{prefix}U_{g}"] for g in GATES],
        biases=[params[f"{prefix}b_{g}"] for g in GATES],
    )


def bilstm_from(params: dict[str, Tensor], prefix: str) -> BiLstmParams:
    return BiLstmParams(
        forward_cell=cell_from(params, f"{prefix}forward."),
        backward_cell=cell_from(params, f"{prefix}backward."),
        residual_proj=params.get(f"{prefix}residual_proj"),
    )


def _gates(z: Tensor, hidden: int, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    zi, zf, zo, zg = ag.split(z, -1, [hidden] * 4)
    i, f, o = ag.sigmoid(zi), ag.sigmoid(zf), ag.sigmoid(zo)
    g = ag.tanh(zg)
    c = ag.add(ag.mul(f, c_prev), ag.mul(i, g))
    h = ag.mul(o, ag.tanh(c))
    return h, c


def lstm_cell_step(
    params: LstmCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM update. ``x`` may carry leading batch axes."""
    hid = params.hidden
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"cell input width {x.shape[-1]} != {params.in_dim}")
    if h_prev.shape[-1] != hid or c_prev.shape[-1] != hid:
        raise DimensionError(
            f"state widths {h_prev.shape}, {c_prev.shape} do not match hidden {hid}"
        )
    w = ag.concat(params.input_weights, axis=0)
    u = ag.concat(params.hidden_weights, axis=0)
    b = ag.concat(params.biases, axis=0)
    z = ag.add(ag.matmul(x, ag.transpose(w)), ag.matmul(h_prev, ag.transpose(u)))
    return _gates(ag.add_bias(z, b), hid, c_prev)


def _run_direction(
    cell: LstmCellParams, steps: list[Tensor], residual: bool, reverse: bool
) -> list[Tensor]:
    """Run one direction over per-step inputs, returning hidden outputs in time order.

    With ``residual`` the cell input is ``[h_adjacent; s_t]``; the weight
    columns acting on ``h_adjacent`` are folded into the recurrent matrix,
    which is the same product evaluated once per sequence instead of per step.
    """
    hid = cell.hidden
    w = ag.concat(cell.input_weights, axis=0)
    u = ag.concat(cell.hidden_weights, axis=0)
    b = ag.concat(cell.biases, axis=0)
    if residual:
        w_h, w = ag.split(w, 1, [hid, w.shape[1] - hid])
        u = ag.add(u, w_h)
    if steps[0].shape[-1] != w.shape[1]:
        raise DimensionError(f"step feature width {steps[0].shape[-1]} != {w.shape[1]}")
    seq = ag.stack(steps, axis=-2)
    xproj = ag.unbind(ag.add_bias(ag.matmul(seq, ag.transpose(w)), b), -2)
    ut = ag.transpose(u)

    batch = steps[0].shape[:-1]
    h = Tensor(np.zeros(batch + (hid,)))
    c = Tensor(np.zeros(batch + (hid,)))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    outs: list[Tensor | None] = [None] * len(steps)
    for t in order:
        z = ag.add(xproj[t], ag.matmul(h, ut))
        h, c = _gates(z, hid, c)
        outs[t] = h
    return outs


def bilstm_rerepresent(params: BiLstmParams, seq: Tensor, residual: str = "input") -> Tensor:
    """Re-represent ``seq`` (N x in_dim, optionally batched) as N x 2*hidden.

    Row t is ``concat(backward_t, forward_t)``. ``residual`` selects how the
    raw step feature re-enters: "input" concatenates the adjacent-step output
    with it as the cell input, "output" adds a learned projection of it to
    the Bi-LSTM output, "off" is a plain Bi-LSTM.
    """
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"residual must be one of {RESIDUAL_MODES}, got {residual!r}")
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise ContractError(f"bilstm_rerepresent needs N >= 1 segments, got shape {seq.shape}")
    if params.forward_cell.hidden != params.backward_cell.hidden:
        raise DimensionError("forward and backward cells have different hidden sizes")
    steps = ag.unbind(seq, -2)
    feed_adjacent = residual == "input"
    fwd = _run_direction(params.forward_cell, steps, feed_adjacent, reverse=False)
    bwd = _run_direction(params.backward_cell, steps, feed_adjacent, reverse=True)
    out = ag.stack([ag.concat([b, f], axis=-1) for b, f in zip(bwd, fwd)], axis=-2)
    if residual == "output":
        if params.residual_proj is None:
            raise ContractError('residual="output" needs a residual_proj block')
        out = ag.add(out, ag.matmul(seq, ag.transpose(params.residual_proj)))
    return out
