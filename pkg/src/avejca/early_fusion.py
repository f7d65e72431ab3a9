"""Per-segment reduction of a spatial visual grid to one vector.

The audio-guided variant scores each grid position against a learned
projection of the segment's audio feature and pools with the softmax
weights. Average and max pooling are the ablation baselines.
"""

from __future__ import annotations

import math

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError

POOL_KINDS = ("audio_guided", "average", "max")


def audio_guided_pool(audio_proj: Tensor, audio: Tensor, grid: Tensor) -> tuple[Tensor, Tensor]:
    """Attend over grid positions using the audio feature as the query.

    Shapes: ``audio_proj`` channels x audio_dim, ``audio`` (..., audio_dim),
    ``grid`` (..., positions, channels). Returns ``pooled`` (..., channels)
    and ``weights`` (..., positions).
    """
    channels = grid.shape[-1]
    if audio_proj.shape != (channels, audio.shape[-1]):
        raise DimensionError(
            f"audio_proj {audio_proj.shape} does not map audio {audio.shape} to {channels} channels"
        )
    if audio.shape[:-1] != grid.shape[:-2]:
        raise DimensionError(f"audio {audio.shape} and grid {grid.shape} disagree on leading axes")
    lead = audio.shape[:-1]
    q = ag.matmul(audio, ag.transpose(audio_proj))
    scores = ag.matmul(grid, ag.reshape(q, lead + (channels, 1)))
    scores = ag.scale(ag.reshape(scores, lead + (grid.shape[-2],)), 1.0 / math.sqrt(channels))
    weights = ag.softmax(scores, axis=-1)
    pooled = ag.matmul(ag.reshape(weights, lead + (1, grid.shape[-2])), grid)
    return ag.reshape(pooled, lead + (channels,)), weights


def baseline_pool(grid: Tensor, kind: str) -> Tensor:
    """Per-channel mean or max over the grid positions."""
    if grid.ndim < 2:
        raise DimensionError(f"grid needs positions x channels, got {grid.shape}")
    if kind == "average":
        return ag.mean(grid, axis=-2)
    if kind == "max":
        return ag.max(grid, axis=-2)
    raise ValueError(f"unknown pooling kind {kind!r}")
