"""Feature files, checkpoints, synthetic data and batching.

Feature file layout (all little-endian)::

    offset  size  field
    0       4     magic b"AVEF"
    4       2     version (u16, = 1)
    6       4     sequence_count (u32)
    10      2     segments_per_sequence N (u16)
    12      2     audio_dim (u16)
    14      2     visual_positions (u16)
    16      2     visual_channels (u16)
    18      ...   per sequence: N*audio_dim f32 audio, N*positions*channels f32
                  visual (position-major), N u8 labels

Label 255 is reserved as invalid. Checkpoints (magic b"AVEC") hold a JSON
config echo and named float64 blocks, followed by a CRC-32 of every
preceding byte.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .config import RunConfig
from .errors import ContractError, FormatError

FEATURE_MAGIC = b"AVEF"
CHECKPOINT_MAGIC = b"AVEC"
FORMAT_VERSION = 1
INVALID_LABEL = 255
_HEADER = struct.Struct("<4sHIHHHH")


@dataclass
class FeatureSet:
    audio: np.ndarray  # (S, N, audio_dim)
    visual: np.ndarray  # (S, N, positions, channels)
    labels: np.ndarray  # (S, N) int64

    def __post_init__(self):
        s, n = self.labels.shape
        if self.audio.shape[:2] != (s, n) or self.visual.shape[:2] != (s, n):
            raise ContractError(
                f"audio {self.audio.shape}, visual {self.visual.shape} and labels "
                f"{self.labels.shape} disagree on (sequences, segments)"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, idx) -> "FeatureSet":
        idx = np.atleast_1d(np.asarray(idx)) if not isinstance(idx, slice) else idx
        return FeatureSet(self.audio[idx], self.visual[idx], self.labels[idx])

    @property
    def segments(self) -> int:
        return self.labels.shape[1]

    @property
    def audio_dim(self) -> int:
        return self.audio.shape[2]

    @property
    def visual_positions(self) -> int:
        return self.visual.shape[2]

    @property
    def visual_channels(self) -> int:
        return self.visual.shape[3]


# ---------------------------------------------------------- feature files


def write_feature_file(path: str | os.PathLike, data: FeatureSet) -> None:
    s, n = data.labels.shape
    dims = (n, data.audio_dim, data.visual_positions, data.visual_channels)
    if any(d > 0xFFFF for d in dims):
        raise ContractError(f"dimensions {dims} do not fit u16 header fields")
    labels = np.asarray(data.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= INVALID_LABEL):
        raise ContractError("labels must lie in [0, 255)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, s, *dims))
        for i in range(s):
            fh.write(np.ascontiguousarray(data.audio[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(data.visual[i], dtype="<f4").tobytes())
            fh.write(labels[i].astype(np.uint8).tobytes())


def _read_exact(fh: BinaryIO, size: int, offset: int, expected_total: int | None, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        actual = offset + len(buf)
        if expected_total is None:
            expected_total = offset + size
        raise FormatError(
            f"truncated {what}: expected {expected_total} bytes, file has {actual}",
            offset=actual,
            kind="truncated",
        )
    return buf


def read_feature_header(fh: BinaryIO) -> tuple[int, int, int, int, int]:
    """Parse the header; returns (sequences, N, audio_dim, positions, channels)."""
    raw = fh.read(_HEADER.size)
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}", offset=0, kind="bad_magic")
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, file has {len(raw)}",
            offset=len(raw),
            kind="truncated",
        )
    _, version, count, n, a_dim, positions, channels = _HEADER.unpack(raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, kind="bad_version")
    for field_offset, name, value in ((10, "N", n), (12, "audio_dim", a_dim),
                                      (14, "visual_positions", positions),
                                      (16, "visual_channels", channels)):
        if value == 0:
            raise FormatError(f"header field {name} is zero", offset=field_offset, kind="bad_header")
    return count, n, a_dim, positions, channels


def iter_feature_file(
    path: str | os.PathLike, class_count: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stream ``(audio, visual, labels)`` per sequence, widened to float64."""
    with open(path, "rb") as fh:
        yield from _iter_stream(fh, class_count)


def _iter_stream(fh: BinaryIO, class_count: int | None):
    count, n, a_dim, positions, channels = read_feature_header(fh)
    a_bytes, v_bytes = 4 * n * a_dim, 4 * n * positions * channels
    per_seq = a_bytes + v_bytes + n
    total = _HEADER.size + count * per_seq
    offset = _HEADER.size
    for _ in range(count):
        audio = np.frombuffer(_read_exact(fh, a_bytes, offset, total, "audio payload"), dtype="<f4")
        offset += a_bytes
        visual = np.frombuffer(_read_exact(fh, v_bytes, offset, total, "visual payload"), dtype="<f4")
        offset += v_bytes
        labels = np.frombuffer(_read_exact(fh, n, offset, total, "labels"), dtype=np.uint8)
        limit = INVALID_LABEL if class_count is None else min(class_count, INVALID_LABEL)
        bad = np.flatnonzero(labels >= limit)
        if bad.size:
            raise FormatError(
                f"label {labels[bad[0]]} out of range (must be < {limit})",
                offset=offset + int(bad[0]),
                kind="label_out_of_range",
            )
        offset += n
        yield (
            audio.astype(np.float64).reshape(n, a_dim),
            visual.astype(np.float64).reshape(n, positions, channels),
            labels.astype(np.int64),
        )
    if fh.read(1):
        raise FormatError(
            f"trailing bytes after declared payload of {total} bytes",
            offset=total,
            kind="trailing_bytes",
        )


def read_feature_file(path: str | os.PathLike, class_count: int | None = None) -> FeatureSet:
    with open(path, "rb") as fh:
        count, n, a_dim, positions, channels = read_feature_header(fh)
        expected = _HEADER.size + count * n * (4 * a_dim + 4 * positions * channels + 1)
        actual = os.fstat(fh.fileno()).st_size
        if actual < expected:
            # fail before allocating buffers sized from a possibly corrupt header
            raise FormatError(
                f"truncated payload: expected {expected} bytes, file has {actual}",
                offset=actual,
                kind="truncated",
            )
        fh.seek(0)
        audio = np.empty((count, n, a_dim))
        visual = np.empty((count, n, positions, channels))
        labels = np.empty((count, n), dtype=np.int64)
        for i, (a, v, y) in enumerate(_iter_stream(fh, class_count)):
            audio[i], visual[i], labels[i] = a, v, y
    return FeatureSet(audio, visual, labels)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | os.PathLike, config: RunConfig, params: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | os.PathLike) -> tuple[RunConfig, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0, kind="bad_magic")
    if len(raw) < 14:
        raise FormatError(f"truncated header: file has {len(raw)} bytes", offset=len(raw), kind="truncated")
    _, version, cfg_len = struct.unpack_from("<4sHI", raw, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, kind="bad_version")
    body, (stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored:
        raise FormatError("checksum mismatch", offset=len(body), kind="checksum")
    pos = 10

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(body):
            raise FormatError(
                f"truncated {what}: expected {pos + size} bytes, body has {len(body)}",
                offset=len(body),
                kind="truncated",
            )
        chunk = body[pos : pos + size]
        pos += size
        return chunk

    config = RunConfig.from_dict(json.loads(take(cfg_len, "config").decode()))
    (count,) = struct.unpack("<I", take(4, "block count"))
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "block name length"))
        name = take(name_len, "block name").decode()
        (ndim,) = struct.unpack("<B", take(1, "block rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "block shape"))
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(take(size, f"block {name}"), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(body):
        raise FormatError("trailing bytes before checksum", offset=pos, kind="trailing_bytes")
    return config, params


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic stand-in for an event-localization dataset.

    ``class_count`` counts event classes; labels ``0..class_count-1`` are
    events and ``class_count`` is background, so files carry
    ``class_count + 1`` label values.
    """

    class_count: int = 5
    sequences_per_class: int = 64
    N: int = 10
    background_rate: float = 0.2
    noise_sigma: float = 0.1
    seed: int = 7
    audio_dim: int = 128
    visual_positions: int = 49
    visual_channels: int = 512

    def __post_init__(self):
        if not 0 <= self.background_rate < 1:
            raise ContractError(f"background_rate must be in [0, 1), got {self.background_rate}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if min(self.class_count, self.sequences_per_class, self.N) < 1:
            raise ContractError("class_count, sequences_per_class and N must be positive")
        if self.class_count + 1 >= INVALID_LABEL:
            raise ContractError("too many classes for a label byte")

    @property
    def label_count(self) -> int:
        return self.class_count + 1


SPLITS = ("train", "val", "test")


def class_prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class audio prototypes, visual prototype grids and hot positions.

    Each visual prototype is zero except for one class-specific position.
    """
    rng = np.random.default_rng([spec.seed, 0])
    audio = rng.standard_normal((spec.class_count, spec.audio_dim))
    pattern = rng.standard_normal((spec.class_count, spec.visual_channels))
    positions = rng.permutation(spec.visual_positions)
    positions = positions[np.arange(spec.class_count) % spec.visual_positions]
    visual = np.zeros((spec.class_count, spec.visual_positions, spec.visual_channels))
    visual[np.arange(spec.class_count), positions] = pattern
    return audio, visual, positions


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> FeatureSet:
    """Draw sequences, ordered by class; pure function of ``(spec, split)``.

    Splits share the class prototypes and differ only in the sampled
    segment labels and noise.
    """
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}, got {split!r}")
    audio_proto, visual_proto, _ = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1 + SPLITS.index(split)])
    s = spec.class_count * spec.sequences_per_class
    seq_class = np.repeat(np.arange(spec.class_count), spec.sequences_per_class)
    background = rng.random((s, spec.N)) < spec.background_rate
    labels = np.where(background, spec.class_count, seq_class[:, None])

    event = ~background
    audio = rng.standard_normal((s, spec.N, spec.audio_dim))
    audio *= spec.noise_sigma
    audio += np.where(event[..., None], audio_proto[seq_class][:, None, :], 0.0)

    visual = np.empty((s, spec.N, spec.visual_positions, spec.visual_channels))
    for i in range(s):
        visual[i] = rng.standard_normal(visual.shape[1:])
        visual[i] *= spec.noise_sigma
        visual[i][event[i]] += visual_proto[seq_class[i]]
    return FeatureSet(audio, visual, labels.astype(np.int64))


# ----------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if n == 0:
        raise ContractError("cannot batch an empty dataset")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(data: FeatureSet | Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator:
    """Yield consecutive batches covering every item exactly once."""
    for idx in batch_indices(len(data), batch_size, shuffle_seed):
        if isinstance(data, FeatureSet):
            yield data[idx]
        else:
            yield [data[i] for i in idx]
