"""Hierarchical predictive-coding stack built from zoo cells.

Each layer ``l`` owns a recurrent cell ``R_l``, a prediction convolution
``Â_l = relu(conv(h_l))`` and an error module ``e_l = [relu(Â_l - A_l),
relu(A_l - Â_l)]``. Within one time step the representation cells are
updated top-down from the previous step's errors (plus the upsampled state
of the layer above), then errors are computed bottom-up, with
``A_{l+1} = maxpool2(relu(conv(e_l)))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import cell_zoo as cz
from .autodiff import Node, Tape
from .errors import BadMagicError, ConfigError, TruncatedFileError, UsageError, VersionMismatchError

LOSS_KINDS = ("e_mean", "mse")


@dataclass(frozen=True)
class StackConfig:
    height: int
    width: int
    a_channels: tuple[int, ...] = (1, 16)
    r_channels: tuple[int, ...] = (1, 16)
    model: str = "M18"
    peephole_mode: str = "stacked_conv"
    gate_activation: str = "hard_sig"
    layer_weights: tuple[float, ...] | None = None
    loss: str = "e_mean"
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "a_channels", tuple(int(a) for a in self.a_channels))
        object.__setattr__(self, "r_channels", tuple(int(r) for r in self.r_channels))
        object.__setattr__(self, "model", cz.resolve_model_id(self.model))
        n = len(self.a_channels)
        if n < 1 or len(self.r_channels) != n:
            raise ConfigError(
                f"a_channels {self.a_channels} and r_channels {self.r_channels} must be equal-length and nonempty")
        if self.layer_weights is None:
            object.__setattr__(self, "layer_weights", (1.0,) + (0.0,) * (n - 1))
        lw = tuple(float(w) for w in self.layer_weights)
        object.__setattr__(self, "layer_weights", lw)
        if len(lw) != n:
            raise ConfigError(f"need {n} layer weights, got {len(lw)}")
        if any(w < 0 for w in lw):
            raise ConfigError(f"layer weights must be nonnegative, got {lw}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.gate_activation not in cz.GATE_ACTIVATIONS:
            raise ConfigError(f"gate activation must be one of {cz.GATE_ACTIVATIONS}")
        scale = 2 ** (n - 1)
        if self.height % scale or self.width % scale:
            raise ConfigError(
                f"input {self.height}x{self.width} is not divisible by 2^{n - 1} for {n} layers")
        if min(self.a_channels + self.r_channels) < 1:
            raise ConfigError("channel counts must be positive")
        cz.model_spec(self.model, self.peephole_mode)

    @property
    def n_layers(self) -> int:
        return len(self.a_channels)

    @property
    def input_channels(self) -> int:
        return self.a_channels[0]

    @property
    def spec(self) -> cz.ModelSpec:
        return cz.model_spec(self.model, self.peephole_mode)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StackConfig":
        known = {f.name for f in fields(cls)}
        raw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in known:
                raise ConfigError(f"unknown stack config key {key!r}")
            raw[key] = value
        kw = {}
        for key, value in raw.items():
            if key in ("height", "width", "kernel_size"):
                kw[key] = int(value)
            elif key in ("a_channels", "r_channels"):
                kw[key] = tuple(int(v) for v in value.split(","))
            elif key == "layer_weights":
                kw[key] = tuple(float(v) for v in value.split(","))
            else:
                kw[key] = value
        return cls(**kw)


@dataclass(frozen=True)
class LayerPlan:
    index: int
    height: int
    width: int
    a_channels: int
    r_channels: int
    has_upper: bool
    upper_r_channels: int
    peephole: str

    @property
    def e_channels(self) -> int:
        return 2 * self.a_channels

    @property
    def gamma(self) -> int:
        """Channels of the cell input x = [e_l, upsampled h_{l+1}]."""
        return self.e_channels + (self.upper_r_channels if self.has_upper else 0)

    @property
    def gate_stack_channels(self) -> int:
        peep = self.r_channels if self.peephole == "stacked_conv" else 0
        return self.gamma + self.r_channels + peep

    @property
    def update_stack_channels(self) -> int:
        return self.gamma + self.r_channels

    def cell_dims(self, m: int) -> cz.CellDims:
        return cz.CellDims(self.height, self.width, self.gamma, self.r_channels, self.r_channels, m)


def layer_plans(config: StackConfig) -> list[LayerPlan]:
    plans = []
    spec = config.spec
    for l in range(config.n_layers):
        upper = l < config.n_layers - 1
        plans.append(LayerPlan(
            index=l,
            height=config.height >> l,
            width=config.width >> l,
            a_channels=config.a_channels[l],
            r_channels=config.r_channels[l],
            has_upper=upper,
            upper_r_channels=config.r_channels[l + 1] if upper else 0,
            peephole=spec.peephole,
        ))
    return plans


def stack_kernel_shapes(config: StackConfig) -> dict[str, tuple[int, ...]]:
    """Every weight block of the stack keyed ``l{layer}.{kernel}``, derived from the plan alone."""
    spec = config.spec
    m = config.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}
    plans = layer_plans(config)
    for plan in plans:
        for name, shape in cz.kernel_shapes(spec, plan.cell_dims(m)).items():
            shapes[f"l{plan.index}.{name}"] = shape
        shapes[f"l{plan.index}.ahat"] = (m, m, plan.r_channels, plan.a_channels)
        if plan.has_upper:
            shapes[f"l{plan.index}.down"] = (m, m, plan.e_channels, plans[plan.index + 1].a_channels)
    return shapes


@dataclass
class Stack:
    config: StackConfig
    params: dict[str, np.ndarray]

    @property
    def plans(self) -> list[LayerPlan]:
        return layer_plans(self.config)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Stack":
        return Stack(self.config, {k: v.copy() for k, v in self.params.items()})


def build_stack(config: StackConfig, seed=0) -> Stack:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in stack_kernel_shapes(config).items():
        if len(shape) == 3:
            params[name] = np.zeros(shape)
            continue
        lim = cz.glorot_limit(shape)
        params[f"{name}.w"] = rng.uniform(-lim, lim, size=shape)
        params[f"{name}.b"] = np.zeros(shape[3])
    return Stack(config, params)


# ---------------------------------------------------------------- error module


def error_module(A: np.ndarray, A_hat: np.ndarray) -> np.ndarray:
    if A.shape != A_hat.shape:
        raise ConfigError(f"error_module: shape mismatch {A.shape} vs {A_hat.shape}")
    return np.concatenate([np.maximum(A_hat - A, 0.0), np.maximum(A - A_hat, 0.0)], axis=-1)


def error_nodes(tape: Tape, A: Node, A_hat: Node) -> Node:
    return tape.stack(tape.act(A_hat - A, "relu"), tape.act(A - A_hat, "relu"))


# ---------------------------------------------------------------- stepping


@dataclass
class StackState:
    """Per-layer ``h``, ``c``, previous-step errors and predictions (arrays or nodes)."""

    h: list
    c: list
    e: list
    predictions: list = field(default_factory=list)


def zero_state(config: StackConfig, batch: tuple[int, ...] = ()) -> StackState:
    h, c, e, preds = [], [], [], []
    for plan in layer_plans(config):
        hw = batch + (plan.height, plan.width)
        h.append(np.zeros(hw + (plan.r_channels,)))
        c.append(np.zeros(hw + (plan.r_channels,)))
        e.append(np.zeros(hw + (plan.e_channels,)))
        preds.append(np.zeros(hw + (plan.a_channels,)))
    return StackState(h, c, e, preds)


def _state_to_nodes(tape: Tape, state: StackState) -> StackState:
    leaf = tape.leaf
    return StackState([leaf(v) for v in state.h], [leaf(v) for v in state.c],
                      [leaf(v) for v in state.e], [leaf(v) for v in state.predictions])


def step_nodes(
    tape: Tape,
    config: StackConfig,
    p: Mapping[str, Node],
    state: StackState,
    frame: Node | None,
) -> tuple[StackState, list[Node], list[Node]]:
    """One time step on ``tape``. ``frame=None`` feeds the layer-0 prediction back as input."""
    spec = config.spec
    n = config.n_layers
    new_h: list = [None] * n
    new_c: list = [None] * n
    preds: list = [None] * n
    for l in reversed(range(n)):
        parts = [state.e[l]]
        if l < n - 1:
            parts.append(tape.upsample2(new_h[l + 1]))
        x = tape.stack(*parts)
        new_h[l], new_c[l] = cz.cell_forward(tape, spec, p, state.h[l], state.c[l], x,
                                             config.gate_activation, prefix=f"l{l}.")
        net = tape.conv(new_h[l], p[f"l{l}.ahat.w"], p[f"l{l}.ahat.b"])
        # sat01 subsumes the relu at layer 0: clip(x, 0, 1) == clip(relu(x), 0, 1)
        preds[l] = tape.act(net, "sat01" if l == 0 else "relu")

    A = preds[0] if frame is None else frame
    errors = []
    for l in range(n):
        e = error_nodes(tape, A, preds[l])
        errors.append(e)
        if l < n - 1:
            A = tape.maxpool2(tape.act(tape.conv(e, p[f"l{l}.down.w"], p[f"l{l}.down.b"]), "relu"))
    return StackState(new_h, new_c, errors, preds), errors, preds


def _check_frame(config: StackConfig, frame: np.ndarray):
    want = (config.height, config.width, config.input_channels)
    if frame.shape[-3:] != want:
        raise ConfigError(f"frame shape {frame.shape[-3:]} does not match stack input {want}")


def stack_step(stack: Stack, state: StackState | None, frame: np.ndarray | None):
    """Advance one step on plain arrays; returns ``(state, errors, Â_0)``."""
    if state is None:
        raise UsageError("stack_step needs an initialized state; use zero_state(config)")
    if frame is not None:
        frame = np.asarray(frame, dtype=np.float64)
        _check_frame(stack.config, frame)
    tape = Tape(grad=False)
    p = {k: tape.leaf(v) for k, v in stack.params.items()}
    s = _state_to_nodes(tape, state)
    new, errors, preds = step_nodes(tape, stack.config, p, s, None if frame is None else tape.leaf(frame))
    out = StackState([v.value for v in new.h], [v.value for v in new.c],
                     [v.value for v in new.e], [v.value for v in new.predictions])
    return out, [e.value for e in errors], preds[0].value


def time_weights(T: int) -> np.ndarray:
    if T < 2:
        raise ConfigError(f"sequences need at least 2 frames, got {T}")
    w = np.full(T, 1.0 / (T - 1))
    w[0] = 0.0
    return w


def loss_nodes(tape: Tape, config: StackConfig, errors_per_step: Sequence[Sequence[Node]]) -> Node:
    """``sum_t w_t sum_l lambda_l mean(e_l^t)`` (or mean of squared errors)."""
    tw = time_weights(len(errors_per_step))
    total = None
    for t, errors in enumerate(errors_per_step):
        if tw[t] == 0.0:
            continue
        for lam, e in zip(config.layer_weights, errors):
            if lam == 0.0:
                continue
            if config.loss == "mse":
                e = tape.record("square", e)
            term = tape.scale(tape.mean(e), tw[t] * lam)
            total = term if total is None else total + term
    if total is None:
        total = tape.leaf(np.zeros((1, 1, 1)))
    return total


@dataclass
class RolloutResult:
    loss: float
    errors: list[list[np.ndarray]]
    predictions: list[np.ndarray]
    tape: Tape | None = None
    loss_node: Node | None = None
    param_nodes: dict[str, Node] | None = None


def rollout_nodes(tape: Tape, config: StackConfig, p: Mapping[str, Node], frames: Sequence[Node]):
    """Unroll over ``frames`` on ``tape``; returns (loss node, errors per step, Â_0 per step)."""
    if len(frames) == 0:
        raise ConfigError("rollout needs a nonempty sequence")
    batch = frames[0].shape[:-3]
    state = _state_to_nodes(tape, zero_state(config, batch))
    all_errors, preds0 = [], []
    for frame in frames:
        state, errors, preds = step_nodes(tape, config, p, state, frame)
        all_errors.append(errors)
        preds0.append(preds[0])
    return loss_nodes(tape, config, all_errors), all_errors, preds0


def rollout(stack: Stack, sequence, train_mode: bool = False, keep_errors: bool = True) -> RolloutResult:
    """Run the stack over ``sequence`` of shape ``(T, H, W, C)`` or ``(B, T, H, W, C)``.

    With ``train_mode`` the whole unrollment stays on the returned tape, with
    the parameters as trainable leaves, ready for :func:`autodiff.backward`.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim < 4 or seq.shape[-4] == 0:
        raise ConfigError("rollout needs a nonempty (T, H, W, C) sequence")
    _check_frame(stack.config, seq[..., 0, :, :, :])
    if seq.shape[-4] < 2:
        raise ConfigError(f"rollout needs T >= 2, got {seq.shape[-4]}")
    tape = Tape(grad=train_mode)
    p = {k: tape.leaf(v, trainable=train_mode, name=k) for k, v in stack.params.items()}
    frames = [tape.leaf(seq[..., t, :, :, :]) for t in range(seq.shape[-4])]
    loss, errors, preds = rollout_nodes(tape, stack.config, p, frames)
    errs = [[e.value for e in step] for step in errors] if keep_errors else []
    return RolloutResult(
        float(loss.value.reshape(())), errs, [q.value for q in preds],
        tape if train_mode else None, loss if train_mode else None, p if train_mode else None)


def predict_future(stack: Stack, seed_frames, k: int) -> np.ndarray:
    """Consume ``seed_frames`` then extrapolate ``k`` frames by feeding Â_0 back in.

    Returns an array of shape ``(..., k, H, W, C)`` with values in [0, 1].
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    seq = np.asarray(seed_frames, dtype=np.float64)
    _check_frame(stack.config, seq[..., 0, :, :, :])
    state = zero_state(stack.config, seq.shape[:-4])
    for t in range(seq.shape[-4]):
        state, _, _ = stack_step(stack, state, seq[..., t, :, :, :])
    out = []
    for _ in range(k):
        state, _, pred = stack_step(stack, state, None)
        out.append(np.clip(pred, 0.0, 1.0))
    return np.stack(out, axis=-4)


def next_frame_predictions(stack: Stack, sequences) -> np.ndarray:
    """Â_0 at every step of a rollout: entry ``t`` predicts frame ``t`` from frames ``< t``."""
    res = rollout(stack, sequences, keep_errors=False)
    return np.stack(res.predictions, axis=-4)


# ---------------------------------------------------------------- audit

_DISPLAY = {"ahat": "Â", "down": "downsample"}


@dataclass
class AuditRow:
    layer: int
    kernel: str
    shape: tuple[int, ...]
    bias: int

    @property
    def n_params(self) -> int:
        return int(np.prod(self.shape)) + self.bias


@dataclass
class AuditReport:
    model: str
    peephole_mode: str
    rows: list[AuditRow]

    @property
    def total(self) -> int:
        return sum(r.n_params for r in self.rows)

    def layer_biases(self) -> list[int]:
        n = max(r.layer for r in self.rows) + 1
        return [sum(r.bias for r in self.rows if r.layer == l) for l in range(n)]

    def shape_of(self, kernel: str, layer: int) -> tuple[int, ...] | None:
        for r in self.rows:
            if r.layer == layer and r.kernel == kernel:
                return r.shape
        return None


def audit_config(config: StackConfig) -> AuditReport:
    rows = []
    for key, shape in stack_kernel_shapes(config).items():
        layer_s, name = key.split(".", 1)
        layer = int(layer_s[1:])
        if name.endswith(".peep"):
            rows.append(AuditRow(layer, f"{name[:-5]}_peep", shape, 0))
        else:
            rows.append(AuditRow(layer, _DISPLAY.get(name, name), shape, shape[3]))
    return AuditReport(config.model, config.peephole_mode, rows)


def audit_stack(stack: Stack) -> AuditReport:
    """Kernel shape table and total, computed from the layer plan (weights are not read)."""
    return audit_config(stack.config)


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1


def _kernel_entries(stack: Stack):
    for name, shape in stack_kernel_shapes(stack.config).items():
        if len(shape) == 3:
            yield name, shape + (0,), stack.params[name], None
        else:
            yield name, shape, stack.params[f"{name}.w"], stack.params[f"{name}.b"]


def checkpoint_bytes(stack: Stack) -> bytes:
    cfg = stack.config.to_text().encode("utf-8")
    entries = list(_kernel_entries(stack))
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<I", len(entries))]
    for name, dims, w, b in entries:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<4I", *dims))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        if b is not None:
            out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(stack: Stack, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(stack))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: truncated file (need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def stack_from_bytes(data: bytes) -> Stack:
    r = _Reader(data, "checkpoint")
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"checkpoint: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint: version {version} not supported (expected {CKPT_VERSION})")
    (cfg_len,) = r.unpack("<I")
    config = StackConfig.from_text(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    expected = stack_kernel_shapes(config)
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        dims = r.unpack("<4I")
        want = expected.get(name)
        got = dims[:3] if dims[3] == 0 else dims
        if want is None or tuple(want) != tuple(got):
            raise ConfigError(f"checkpoint kernel {name!r} has shape {got}, config implies {want}")
        size = int(np.prod(got))
        w = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(got)
        if dims[3] == 0:
            params[name] = w
        else:
            params[f"{name}.w"] = w
            params[f"{name}.b"] = np.frombuffer(r.take(8 * dims[3]), dtype="<f8").astype(np.float64)
    missing = set(expected) - {k.rsplit(".", 1)[0] if not k.endswith(".peep") else k for k in params}
    if missing:
        raise ConfigError(f"checkpoint missing kernels {sorted(missing)}")
    if r.pos != len(data):
        raise ConfigError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    return Stack(config, params)


def load_checkpoint(path) -> Stack:
    return stack_from_bytes(Path(path).read_bytes())
