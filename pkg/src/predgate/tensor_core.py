"""Dense multi-channel image arithmetic.

Images are float64 numpy arrays laid out as ``(height, width, channels)``
(row-major, channel last). Every function here also accepts leading batch
axes, ``(..., height, width, channels)``, which is how the trainer pushes
several sequences through one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError

ACTIVATIONS = ("sigmoid", "hard_sig", "tanh", "relu", "sat01")


def as_image(values, dtype=np.float64) -> np.ndarray:
    """Return ``values`` as a float64 array with at least 3 axes (H, W, C)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim < 3:
        raise ConfigError(f"image needs (height, width, channels) axes, got shape {arr.shape}")
    if min(arr.shape[-3:]) < 1:
        raise ConfigError(f"image dimensions must be positive, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class KernelStack:
    """An ``m x m x Cin x Cout`` convolution weight block plus a bias per output channel."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[0] != w.shape[1]:
            raise ConfigError(f"kernel weights must be (m, m, Cin, Cout), got {w.shape}")
        if w.shape[0] % 2 == 0:
            raise ConfigError(f"kernel side must be odd, got {w.shape[0]}")
        if b.shape != (w.shape[3],):
            raise ConfigError(f"bias must have {w.shape[3]} entries, got shape {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def size_m(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.weights.shape)

    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def im2col(x: np.ndarray, m: int) -> np.ndarray:
    """Zero-padded patches of ``x``: shape ``(..., H, W, m*m*C)``.

    The last axis is ordered (row offset, column offset, channel), which is
    the flattening order of an ``(m, m, C, Cout)`` weight block.
    """
    pad = m // 2
    h, w = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    cols = [xp[..., dr:dr + h, dc:dc + w, :] for dr in range(m) for dc in range(m)]
    return np.concatenate(cols, axis=-1)


def col2im(cols: np.ndarray, m: int, channels: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the image."""
    pad = m // 2
    h, w = cols.shape[-3], cols.shape[-2]
    lead = cols.shape[:-3]
    out = np.zeros(lead + (h + 2 * pad, w + 2 * pad, channels))
    k = 0
    for dr in range(m):
        for dc in range(m):
            out[..., dr:dr + h, dc:dc + w, :] += cols[..., k * channels:(k + 1) * channels]
            k += 1
    return out[..., pad:pad + h, pad:pad + w, :]


def conv_same_arrays(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    m, _, cin, cout = weights.shape
    if x.shape[-1] != cin:
        raise ConfigError(f"conv_same: input has {x.shape[-1]} channels, kernel expects {cin}")
    if m % 2 == 0:
        raise ConfigError(f"conv_same: kernel side must be odd, got {m}")
    cols = im2col(x, m)
    return cols @ weights.reshape(m * m * cin, cout) + bias


def conv_same(x: np.ndarray, k: KernelStack) -> np.ndarray:
    """Stride-1 zero-padded convolution preserving height and width.

    ``out[r, c, o] = sum_{dr, dc, i} x[r+dr, c+dc, i] * w[dr, dc, i, o] + b[o]``
    with offsets centred on the kernel.
    """
    return conv_same_arrays(as_image(x), k.weights, k.bias)


def stack_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ConfigError("stack_channels needs at least one part")
    spatial = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != spatial:
            raise ConfigError(f"stack_channels: spatial mismatch {p.shape[:-1]} vs {spatial}")
    if len(parts) == 1:
        return np.array(parts[0], dtype=np.float64)
    return np.concatenate(parts, axis=-1)


def channel_offsets(parts: Sequence[np.ndarray]) -> list[int]:
    """Start offset of each part inside the stacked tensor (plus the end)."""
    offsets = [0]
    for p in parts:
        offsets.append(offsets[-1] + p.shape[-1])
    return offsets


def ew_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "ew_mul")
    return a * b


def ew_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "ew_add")
    return a + b


def ew_sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "ew_sub")
    return a - b


def hard_sig(x: np.ndarray) -> np.ndarray:
    return np.clip(0.25 * x + 0.5, 0.0, 1.0)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return expit(x)
    if kind == "hard_sig":
        return hard_sig(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sat01":
        return np.clip(x, 0.0, 1.0)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of ``activation(x, kind)`` given input ``x`` and output ``y``."""
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "hard_sig":
        return np.where((x > -2.0) & (x < 2.0), 0.25, 0.0)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    if kind == "sat01":
        return ((x > 0.0) & (x < 1.0)).astype(np.float64)
    raise ConfigError(f"unknown activation {kind!r}")


def _blocks(x: np.ndarray) -> np.ndarray:
    """View ``(..., H, W, C)`` as ``(..., H/2, W/2, C, 4)`` with row-major block order."""
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    b = x.reshape(lead + (h // 2, 2, w // 2, 2, c))
    nd = len(lead)
    b = np.moveaxis(b, (nd + 1, nd + 3), (nd + 3, nd + 4))
    return b.reshape(lead + (h // 2, w // 2, c, 4))


def maxpool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even height and width, got {h}x{w}")
    return _blocks(x).max(axis=-1)


def maxpool2_argmax(x: np.ndarray) -> np.ndarray:
    """Index (0..3, row-major within the 2x2 block) of the first maximum."""
    return _blocks(x).argmax(axis=-1)


def maxpool2_backward(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    idx = maxpool2_argmax(x)
    onehot = (np.arange(4) == idx[..., None]) * gout[..., None]
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    nd = len(lead)
    g = onehot.reshape(lead + (h // 2, w // 2, c, 2, 2))
    g = np.moveaxis(g, (nd + 3, nd + 4), (nd + 1, nd + 3))
    return g.reshape(x.shape)


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-3), 2, axis=-2)


def upsample2_backward(gout: np.ndarray) -> np.ndarray:
    h, w, c = gout.shape[-3:]
    lead = gout.shape[:-3]
    return gout.reshape(lead + (h // 2, 2, w // 2, 2, c)).sum(axis=(-4, -2))
