"""Synthetic bouncing-shapes sequences and the ``PGSQ`` sequence container.

The generator is a small stand-in for Moving MNIST: a few binary shapes
move with constant integer velocity on a dark canvas and bounce off the
walls.

Container layout (all little-endian)::

    b"PGSQ"  u16 version  u16 reserved
    u32 count  u32 frames  u32 height  u32 width  u32 channels
    f32 pixels in (sequence, frame, row, column, channel) order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, TruncatedFileError, VersionMismatchError

SEQ_MAGIC = b"PGSQ"
SEQ_VERSION = 1
HEADER = struct.Struct("<4sHH5I")
SHAPE_KINDS = ("square", "cross")


@dataclass(frozen=True)
class SequenceSet:
    """Pixel data of shape ``(count, T, height, width, channels)`` in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 5 or min(d.shape) < 1:
            raise ConfigError(f"sequence data must be (count, T, H, W, C), got {d.shape}")
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise ConfigError("sequence pixels must lie in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def channels(self) -> int:
        return self.data.shape[4]

    def __len__(self):
        return self.count

    def split(self, n_tail: int) -> tuple["SequenceSet", "SequenceSet"]:
        """Split off the last ``n_tail`` sequences (e.g. as a held-out set)."""
        if not 0 < n_tail < self.count:
            raise ConfigError(f"cannot hold out {n_tail} of {self.count} sequences")
        return SequenceSet(self.data[:-n_tail]), SequenceSet(self.data[-n_tail:])


@dataclass(frozen=True)
class ShapeGenConfig:
    canvas: int = 16
    shapes: int = 2
    kind: str = "square"
    side: int = 3
    max_speed: int = 2
    frames: int = 10
    seed: int = 0
    bounce: bool = True

    def __post_init__(self):
        if self.side >= self.canvas:
            raise ConfigError(f"shape side {self.side} must be smaller than canvas {self.canvas}")
        if self.side < 1 or self.shapes < 1 or self.frames < 1:
            raise ConfigError("shape side, shape count and frame count must be positive")
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"shape kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if self.max_speed < 0:
            raise ConfigError("max_speed must be nonnegative")


def shape_mask(kind: str, side: int) -> np.ndarray:
    if kind == "square":
        return np.ones((side, side))
    mask = np.zeros((side, side))
    mid = side // 2
    mask[mid, :] = 1.0
    mask[:, mid] = 1.0
    return mask


def _advance(pos: int, vel: int, limit: int, bounce: bool) -> tuple[int, int]:
    pos += vel
    if not bounce:
        return pos, vel
    # Reflect until back in range; only matters when |vel| > limit.
    while pos < 0 or pos > limit:
        if pos < 0:
            pos = -pos
        else:
            pos = 2 * limit - pos
        vel = -vel
    return pos, vel


def render(positions, cfg: ShapeGenConfig) -> np.ndarray:
    frame = np.zeros((cfg.canvas, cfg.canvas))
    mask = shape_mask(cfg.kind, cfg.side)
    for r, c in positions:
        r0, c0 = max(r, 0), max(c, 0)
        r1, c1 = min(r + cfg.side, cfg.canvas), min(c + cfg.side, cfg.canvas)
        if r0 >= r1 or c0 >= c1:
            continue
        patch = mask[r0 - r:r1 - r, c0 - c:c1 - c]
        frame[r0:r1, c0:c1] = np.maximum(frame[r0:r1, c0:c1], patch)
    return frame


def trajectory(start, velocity, cfg: ShapeGenConfig) -> list[tuple[int, int]]:
    """Top-left corner of one shape at each frame."""
    limit = cfg.canvas - cfg.side
    (r, c), (vr, vc) = start, velocity
    out = []
    for _ in range(cfg.frames):
        out.append((r, c))
        r, vr = _advance(r, vr, limit, cfg.bounce)
        c, vc = _advance(c, vc, limit, cfg.bounce)
    return out


def _random_velocity(rng: np.random.Generator, max_speed: int) -> tuple[int, int]:
    if max_speed == 0:
        return (0, 0)
    while True:
        v = tuple(int(x) for x in rng.integers(-max_speed, max_speed + 1, size=2))
        if v != (0, 0):
            return v


def gen_sequences(cfg: ShapeGenConfig, n: int) -> SequenceSet:
    if n < 1:
        raise ConfigError(f"need at least one sequence, got {n}")
    rng = np.random.default_rng(cfg.seed)
    limit = cfg.canvas - cfg.side
    data = np.zeros((n, cfg.frames, cfg.canvas, cfg.canvas, 1))
    for s in range(n):
        paths = []
        for _ in range(cfg.shapes):
            start = tuple(int(x) for x in rng.integers(0, limit + 1, size=2))
            paths.append(trajectory(start, _random_velocity(rng, cfg.max_speed), cfg))
        for t in range(cfg.frames):
            data[s, t, :, :, 0] = render([p[t] for p in paths], cfg)
    return SequenceSet(data)


def sequences_to_bytes(seqs: SequenceSet) -> bytes:
    header = HEADER.pack(SEQ_MAGIC, SEQ_VERSION, 0, *seqs.data.shape)
    return header + np.ascontiguousarray(seqs.data, dtype="<f4").tobytes()


def sequences_from_bytes(raw: bytes) -> SequenceSet:
    if len(raw) < 4:
        raise TruncatedFileError(f"sequence file: truncated header ({len(raw)} bytes)")
    if raw[:4] != SEQ_MAGIC:
        raise BadMagicError(f"sequence file: bad magic {raw[:4]!r}, expected {SEQ_MAGIC!r}")
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"sequence file: truncated header ({len(raw)} of {HEADER.size} bytes)")
    _, version, _, *dims = HEADER.unpack_from(raw)
    if version != SEQ_VERSION:
        raise VersionMismatchError(f"sequence file: version {version} not supported (expected {SEQ_VERSION})")
    need = HEADER.size + 4 * int(np.prod(dims))
    if len(raw) < need:
        raise TruncatedFileError(f"sequence file: truncated pixel data ({len(raw)} of {need} bytes)")
    if len(raw) > need:
        raise ConfigError(f"sequence file: {len(raw) - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).astype(np.float64).reshape(dims)
    return SequenceSet(data)


def write_sequences(seqs: SequenceSet, path) -> None:
    Path(path).write_bytes(sequences_to_bytes(seqs))


def read_sequences(path) -> SequenceSet:
    return sequences_from_bytes(Path(path).read_bytes())
