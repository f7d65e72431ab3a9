"""Joint co-attention layer and its recursive stack.

Shapes (per sequence, a leading batch axis is allowed on A, V, J):

    A: N x d_a    V: N x d_v    J: N x d
    C_a = tanh(A^T W_ja J / sqrt(d))           d_a x d
    H_a = relu(W_a A + W_ca C_a^T)             k x d_a
    A'  = A + W_ha^T H_a                       N x d_a

and the same for the visual side with W_jv, W_v, W_cv, W_hv.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError

COMBINES = ("addition", "multiplication", "concatenation")
COATTENTION_MODES = ("joint", "original")
LAYER_BLOCKS = ("W_ja", "W_jv", "W_a", "W_v", "W_ca", "W_cv", "W_ha", "W_hv")


@dataclass(frozen=True)
class FusionStrategy:
    combine: str = "concatenation"
    fc: bool = True

    def __post_init__(self):
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}, got {self.combine!r}")

    @classmethod
    def parse(cls, text: str) -> "FusionStrategy":
        """Parse names such as ``concatenation+fc`` or ``addition``."""
        parts = [p.strip().lower() for p in text.split("+")]
        fc = len(parts) == 2 and parts[1] == "fc"
        if len(parts) > 2 or (len(parts) == 2 and not fc):
            raise ValueError(f"cannot parse fusion strategy {text!r}")
        return cls(parts[0], fc)

    @property
    def name(self) -> str:
        return self.combine + ("+fc" if self.fc else "")

    def joint_width(self, d_a: int, d_v: int) -> int:
        if self.combine == "concatenation":
            return d_a + d_v
        if d_a != d_v:
            raise DimensionError(f"{self.combine} needs d_a == d_v, got {d_a} and {d_v}")
        return d_a


@dataclass
class JcaLayerParams:
    W_ja: Tensor
    W_jv: Tensor
    W_a: Tensor
    W_v: Tensor
    W_ca: Tensor
    W_cv: Tensor
    W_ha: Tensor
    W_hv: Tensor
    fc_weight: Tensor | None = None
    fc_bias: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [getattr(self, name) for name in LAYER_BLOCKS]
        if self.fc_weight is not None:
            out += [self.fc_weight, self.fc_bias]
        return out


@dataclass
class JcaStack:
    layers: list[JcaLayerParams]
    strategy: FusionStrategy
    mode: str = "joint"


def layer_shapes(
    n: int, k: int, d_a: int, d_v: int, strategy: FusionStrategy, mode: str = "joint"
) -> dict[str, tuple[int, ...]]:
    """Block shapes of one layer. In "original" mode each modality attends to
    the other one directly, so W_ca / W_cv span the opposite modality's width."""
    if mode not in COATTENTION_MODES:
        raise ValueError(f"coattention mode must be one of {COATTENTION_MODES}, got {mode!r}")
    if mode == "joint":
        d = strategy.joint_width(d_a, d_v)
        src_a = src_v = d
    else:
        src_a, src_v = d_v, d_a
    shapes = {
        "W_ja": (n, n),
        "W_jv": (n, n),
        "W_a": (k, n),
        "W_v": (k, n),
        "W_ca": (k, src_a),
        "W_cv": (k, src_v),
        "W_ha": (k, n),
        "W_hv": (k, n),
    }
    if mode == "joint" and strategy.fc:
        shapes["fc.weight"] = (d, d)
        shapes["fc.bias"] = (d,)
    return shapes


def init_block(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in the contracted extent."""
    if name.endswith("fc.bias"):
        return np.zeros(shape)
    fan_in = shape[0] if name.endswith(("W_ha", "W_hv")) else shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def layer_from(params: dict[str, Tensor], prefix: str) -> JcaLayerParams:
    return JcaLayerParams(
        *(params[prefix + name] for name in LAYER_BLOCKS),
        fc_weight=params.get(prefix + "fc.weight"),
        fc_bias=params.get(prefix + "fc.bias"),
    )


def joint_representation(
    strategy: FusionStrategy,
    A: Tensor,
    V: Tensor,
    fc_weight: Tensor | None = None,
    fc_bias: Tensor | None = None,
) -> Tensor:
    if A.shape[:-1] != V.shape[:-1]:
        raise DimensionError(f"A {A.shape} and V {V.shape} disagree on segment axes")
    strategy.joint_width(A.shape[-1], V.shape[-1])
    if strategy.combine == "concatenation":
        J = ag.concat([A, V], axis=-1)
    elif strategy.combine == "addition":
        J = ag.add(A, V)
    else:
        J = ag.mul(A, V)
    if strategy.fc:
        if fc_weight is None or fc_bias is None:
            raise DimensionError(f"strategy {strategy.name} needs fc parameters")
        J = ag.add_bias(ag.matmul(J, ag.transpose(fc_weight)), fc_bias)
    return J


def affinity(X: Tensor, W: Tensor, J: Tensor, d: float) -> Tensor:
    """tanh(X^T W J / sqrt(d)), d_m x d."""
    n = X.shape[-2]
    if W.shape != (n, n) or J.shape[-2] != n:
        raise DimensionError(f"affinity: X {X.shape}, W {W.shape}, J {J.shape} are inconsistent")
    prod = ag.matmul(ag.matmul(ag.transpose(X), W), J)
    return ag.tanh(ag.scale(prod, 1.0 / math.sqrt(d)))


def _attention_map(W_x: Tensor, X: Tensor, W_c: Tensor, C: Tensor) -> Tensor:
    if W_x.shape[1] != X.shape[-2] or W_c.shape[1] != C.shape[-1] or W_x.shape[0] != W_c.shape[0]:
        raise DimensionError(
            f"attention map: W {W_x.shape}, X {X.shape}, W_c {W_c.shape}, C {C.shape} are inconsistent"
        )
    return ag.relu(ag.add(ag.matmul(W_x, X), ag.matmul(W_c, ag.transpose(C))))


def attention_maps(
    params: JcaLayerParams, A: Tensor, V: Tensor, C_a: Tensor, C_v: Tensor
) -> tuple[Tensor, Tensor]:
    H_a = _attention_map(params.W_a, A, params.W_ca, C_a)
    H_v = _attention_map(params.W_v, V, params.W_cv, C_v)
    return H_a, H_v


def jca_layer(
    params: JcaLayerParams,
    strategy: FusionStrategy,
    A: Tensor,
    V: Tensor,
    mode: str = "joint",
) -> tuple[Tensor, Tensor]:
    if mode == "joint":
        J = joint_representation(strategy, A, V, params.fc_weight, params.fc_bias)
        d = J.shape[-1]
        C_a = affinity(A, params.W_ja, J, d)
        C_v = affinity(V, params.W_jv, J, d)
    elif mode == "original":
        C_a = affinity(A, params.W_ja, V, V.shape[-1])
        C_v = affinity(V, params.W_jv, A, A.shape[-1])
    else:
        raise ValueError(f"coattention mode must be one of {COATTENTION_MODES}, got {mode!r}")
    H_a, H_v = attention_maps(params, A, V, C_a, C_v)
    A_out = ag.add(A, ag.matmul(ag.transpose(params.W_ha), H_a))
    V_out = ag.add(V, ag.matmul(ag.transpose(params.W_hv), H_v))
    return A_out, V_out


def jca_stack_forward(stack: JcaStack, A: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    for layer in stack.layers:
        A, V = jca_layer(layer, stack.strategy, A, V, stack.mode)
    return A, V
