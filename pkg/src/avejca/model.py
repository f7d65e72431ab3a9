"""Full network: early fusion, uni-modal Bi-LSTMs, JCA stack and prediction head."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import jca, lstm
from .autograd import Tensor
from .config import RunConfig
from .early_fusion import audio_guided_pool, baseline_pool
from .errors import ContractError, DimensionError

MODULES = ("early_fusion", "audio_encoder", "visual_encoder", "jca", "head")


def parameter_shapes(config: RunConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every learnable block of ``config``, in a fixed order, keyed by dotted name."""
    c = config
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if c.early_fusion == "audio_guided":
        shapes["early_fusion.audio_proj"] = (c.visual_channels, c.audio_dim)
    for name, shape in lstm.bilstm_shapes(c.audio_dim, c.d_a // 2, c.residual_embedding).items():
        shapes[f"audio_encoder.{name}"] = shape
    for name, shape in lstm.bilstm_shapes(c.visual_channels, c.d_v // 2, c.residual_embedding).items():
        shapes[f"visual_encoder.{name}"] = shape
    for layer in range(c.depth):
        for name, shape in jca.layer_shapes(
            c.N, c.k, c.d_a, c.d_v, c.strategy, c.coattention_mode
        ).items():
            shapes[f"jca.{layer}.{name}"] = shape
    for name, shape in lstm.bilstm_shapes(c.d_a + c.d_v, c.joint_hidden).items():
        shapes[f"head.bilstm.{name}"] = shape
    widths = [2 * c.joint_hidden, *c.mlp_hidden, c.class_count]
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"head.mlp.{i}.weight"] = (w_out, w_in)
        shapes[f"head.mlp.{i}.bias"] = (w_out,)
    return shapes


def parameter_breakdown(config: RunConfig) -> "OrderedDict[str, int]":
    counts: OrderedDict[str, int] = OrderedDict((m, 0) for m in MODULES)
    for name, shape in parameter_shapes(config).items():
        counts[name.split(".", 1)[0]] += int(np.prod(shape))
    return counts


def count_parameters(config: RunConfig) -> int:
    return sum(parameter_breakdown(config).values())


def _init_block(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.startswith(("audio_encoder.", "visual_encoder.", "head.bilstm.")):
        return lstm.init_block(name, shape, rng)
    if name.startswith("jca."):
        return jca.init_block(name, shape, rng)
    if name.endswith(".bias"):
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: RunConfig, seed: int | None = None) -> "OrderedDict[str, np.ndarray]":
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return OrderedDict(
        (name, _init_block(name, shape, rng)) for name, shape in parameter_shapes(config).items()
    )


@dataclass
class Forward:
    logits: Tensor
    attention: Tensor | None  # early-fusion weights, (..., N, positions)


class JcaModel:
    """Parameters plus the forward computation for one configuration."""

    def __init__(self, config: RunConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config.validate()
        values = init_params(config) if params is None else params
        expected = parameter_shapes(config)
        if list(values) != list(expected):
            missing = set(expected) - set(values)
            extra = set(values) - set(expected)
            raise DimensionError(f"parameter blocks mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in expected.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: shape {arr.shape} != expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def jca_stack(self) -> jca.JcaStack:
        c = self.config
        layers = [jca.layer_from(self.params, f"jca.{i}.") for i in range(c.depth)]
        return jca.JcaStack(layers, c.strategy, c.coattention_mode)

    def _check_inputs(self, audio: Tensor, visual: Tensor) -> None:
        c = self.config
        if audio.shape[-2:] != (c.N, c.audio_dim):
            raise DimensionError(f"audio {audio.shape} does not end in {(c.N, c.audio_dim)}")
        if visual.shape[-3:] != (c.N, c.visual_positions, c.visual_channels):
            raise DimensionError(
                f"visual {visual.shape} does not end in {(c.N, c.visual_positions, c.visual_channels)}"
            )

    def forward(self, audio: Tensor, visual: Tensor) -> Forward:
        """Pre-sigmoid scores for (..., N, audio_dim) audio and (..., N, P, C) visual input."""
        c = self.config
        audio, visual = ag.as_tensor(audio), ag.as_tensor(visual)
        self._check_inputs(audio, visual)
        p = self.params
        weights = None
        if c.early_fusion == "audio_guided":
            pooled, weights = audio_guided_pool(p["early_fusion.audio_proj"], audio, visual)
        else:
            pooled = baseline_pool(visual, c.early_fusion)
        A = lstm.bilstm_rerepresent(lstm.bilstm_from(p, "audio_encoder."), audio, c.residual_embedding)
        V = lstm.bilstm_rerepresent(lstm.bilstm_from(p, "visual_encoder."), pooled, c.residual_embedding)
        A, V = jca.jca_stack_forward(self.jca_stack(), A, V)
        return Forward(self.head(A, V), weights)

    def head(self, A: Tensor, V: Tensor) -> Tensor:
        x = lstm.bilstm_rerepresent(
            lstm.bilstm_from(self.params, "head.bilstm."), ag.concat([A, V], axis=-1), "off"
        )
        n_layers = len(self.config.mlp_hidden) + 1
        for i in range(n_layers):
            w = self.params[f"head.mlp.{i}.weight"]
            b = self.params[f"head.mlp.{i}.bias"]
            x = ag.add_bias(ag.matmul(x, ag.transpose(w)), b)
            if i < n_layers - 1:
                x = ag.relu(x)
        return x

    def predict(self, audio, visual) -> np.ndarray:
        """Per-segment class probabilities in (0, 1)."""
        with ag.no_grad():
            return ag.sigmoid(self.forward(audio, visual).logits).data


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ContractError(f"labels must lie in [0, {class_count})")
    return np.eye(class_count)[labels]


def mlsm_loss(scores: Tensor, targets, strict: bool = False) -> Tensor:
    """Multi-label soft-margin loss on pre-sigmoid ``scores``.

    Averages -(1/C) sum_c [y log s(x) + (1-y) log s(-x)] over every segment
    row (and batch entry) in the stable log-sigmoid form.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != scores.shape:
        raise DimensionError(f"scores {scores.shape} and targets {y.shape} differ")
    if strict and not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractError("targets are not one-hot")
    pos = ag.mul(ag.log_sigmoid(scores), Tensor(y))
    neg = ag.mul(ag.log_sigmoid(ag.scale(scores, -1.0)), Tensor(1.0 - y))
    return ag.scale(ag.mean(ag.add(pos, neg)), -1.0)


def segment_accuracy(predictions, labels) -> float:
    """Fraction of segments whose argmax score matches the label."""
    pred = predictions.data if isinstance(predictions, Tensor) else np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("accuracy over an empty set")
    if pred.shape[:-1] != labels.shape:
        raise DimensionError(f"predictions {pred.shape} do not match labels {labels.shape}")
    return float(np.mean(pred.argmax(axis=-1) == labels))


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(predictions).argmax(axis=-1).reshape(-1)
    true = np.asarray(labels).reshape(-1)
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (true, pred), 1)
    return out
