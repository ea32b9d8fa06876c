"""The twenty gated convolutional cells M1-M20.

Each model is described by which gates physically exist, how the cell
state sees those gates (peephole mode), and which gate, or the constant
one, scales each of the three terms of the state update::

    c_new = cell_scale * c + input_scale * g
    h_new = output_scale * tanh(c_new)

M18 (rgcLSTM) has a single gate with a convolutional peephole that plays
all three roles; M1 is the peephole-free three-gate cLSTM.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .autodiff import Node, Tape
from .errors import ConfigError

GATES = ("f", "i", "o")
PEEPHOLE_MODES = ("none", "stacked_conv", "elementwise")
GATE_ACTIVATIONS = ("sigmoid", "hard_sig")

ALIASES = {"rgcLSTM": "M18", "cLSTM": "M1", "convLSTM": "M8", "np-rgcLSTM": "M15"}


@dataclass(frozen=True)
class ModelSpec:
    id: str
    gates: tuple[str, ...]
    peephole: str
    cell_scale: str
    input_scale: str
    output_scale: str

    def __post_init__(self):
        if self.peephole not in PEEPHOLE_MODES:
            raise ConfigError(f"{self.id}: unknown peephole mode {self.peephole!r}")
        for role in self.roles:
            if role != "one" and role not in self.gates:
                raise ConfigError(f"{self.id}: role bound to absent gate {role!r}")

    @property
    def roles(self) -> tuple[str, str, str]:
        return (self.cell_scale, self.input_scale, self.output_scale)

    def peepholed(self, gate: str) -> bool:
        return self.peephole != "none" and gate in self.gates

    def with_peephole(self, mode: str) -> "ModelSpec":
        return replace(self, peephole=mode)


# gate roster and (cell, input, output) bindings of the peephole-free models
_SINGLE_FUNCTION = {
    1: (("f", "i", "o"), ("f", "i", "o")),
    2: (("f",), ("f", "one", "one")),
    3: (("f", "i"), ("f", "i", "one")),
    4: (("f", "o"), ("f", "one", "o")),
    5: (("i",), ("one", "i", "one")),
    6: (("i", "o"), ("one", "i", "o")),
    7: (("o",), ("one", "one", "o")),
}
_MULTI_FUNCTION = {
    15: ("f", "f", "f"),
    16: ("f", "f", "one"),
    17: ("f", "one", "f"),
}


def _build_table() -> dict[str, ModelSpec]:
    table = {}
    for k, (gates, roles) in _SINGLE_FUNCTION.items():
        table[f"M{k}"] = ModelSpec(f"M{k}", gates, "none", *roles)
        table[f"M{k + 7}"] = ModelSpec(f"M{k + 7}", gates, "stacked_conv", *roles)
    for k, roles in _MULTI_FUNCTION.items():
        table[f"M{k}"] = ModelSpec(f"M{k}", ("f",), "none", *roles)
        table[f"M{k + 3}"] = ModelSpec(f"M{k + 3}", ("f",), "stacked_conv", *roles)
    return table


MODEL_TABLE = _build_table()
MODEL_IDS = tuple(f"M{k}" for k in range(1, 21))


def resolve_model_id(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in MODEL_TABLE:
        raise ConfigError(f"unknown model id {name!r}; expected M1..M20 or one of {sorted(ALIASES)}")
    return name


def model_spec(model_id: str, peephole_mode: str = "stacked_conv") -> ModelSpec:
    """Look up a model by id or alias.

    ``peephole_mode="elementwise"`` swaps the stacked-convolution peephole of
    a peepholed model for per-pixel weight tensors multiplying ``c``.
    """
    spec = MODEL_TABLE[resolve_model_id(model_id)]
    if peephole_mode not in ("stacked_conv", "elementwise"):
        raise ConfigError(f"peephole mode must be stacked_conv or elementwise, got {peephole_mode!r}")
    if spec.peephole != "none" and peephole_mode == "elementwise":
        spec = spec.with_peephole("elementwise")
    return spec


@dataclass(frozen=True)
class CellDims:
    height: int
    width: int
    gamma: int
    kappa: int
    n: int
    m: int = 3

    def __post_init__(self):
        if self.kappa != self.n:
            raise ConfigError(f"kappa ({self.kappa}) must equal n ({self.n})")
        if min(self.height, self.width, self.gamma, self.n, self.m) < 1:
            raise ConfigError(f"cell dimensions must be positive: {self}")
        if self.m % 2 == 0:
            raise ConfigError(f"kernel side must be odd, got {self.m}")

    def gate_stack_channels(self, spec: ModelSpec, gate: str) -> int:
        extra = self.kappa if spec.peephole == "stacked_conv" and gate in spec.gates else 0
        return self.gamma + self.kappa + extra

    @property
    def update_stack_channels(self) -> int:
        return self.gamma + self.kappa


def kernel_shapes(spec: ModelSpec, dims: CellDims) -> dict[str, tuple[int, ...]]:
    """Shape of every weight block of one cell, in allocation order.

    Convolution blocks are ``(m, m, Cin, Cout)`` and carry a bias of length
    ``Cout``; elementwise peephole tensors are ``(H, W, n)`` with no bias.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    m = dims.m
    for q in GATES:
        if q in spec.gates:
            shapes[q] = (m, m, dims.gate_stack_channels(spec, q), dims.n)
    shapes["g"] = (m, m, dims.update_stack_channels, dims.n)
    if spec.peephole == "elementwise":
        for q in GATES:
            if q in spec.gates:
                shapes[f"{q}.peep"] = (dims.height, dims.width, dims.n)
    return shapes


def count_params(spec: ModelSpec, dims: CellDims) -> int:
    total = 0
    m2 = dims.m * dims.m
    for q in spec.gates:
        total += (m2 * dims.gate_stack_channels(spec, q) + 1) * dims.n
        if spec.peephole == "elementwise":
            total += dims.height * dims.width * dims.n
    total += (m2 * dims.update_stack_channels + 1) * dims.n
    return total


@dataclass
class CellParams:
    kernels: dict[str, tc.KernelStack]
    peepholes: dict[str, np.ndarray] = field(default_factory=dict)

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for name, k in self.kernels.items():
            out[f"{name}.w"] = k.weights
            out[f"{name}.b"] = k.bias
        for name, p in self.peepholes.items():
            out[f"{name}.peep"] = p
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, np.ndarray]) -> "CellParams":
        kernels, peeps = {}, {}
        for key, value in flat.items():
            name, kind = key.rsplit(".", 1)
            if kind == "w":
                kernels[name] = tc.KernelStack(value, flat[f"{name}.b"])
            elif kind == "peep":
                peeps[name] = np.asarray(value, dtype=np.float64)
        return cls(kernels, peeps)

    def n_params(self) -> int:
        return sum(v.size for v in self.flat().values())


def glorot_limit(shape: tuple[int, int, int, int]) -> float:
    m, _, cin, cout = shape
    return float(np.sqrt(6.0 / (m * m * cin + m * m * cout)))


def init_params(spec: ModelSpec, dims: CellDims, seed=0) -> CellParams:
    """Glorot-uniform kernels, zero biases, zero elementwise peepholes.

    ``seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kernels, peeps = {}, {}
    for name, shape in kernel_shapes(spec, dims).items():
        if name.endswith(".peep"):
            peeps[name[:-5]] = np.zeros(shape)
        else:
            lim = glorot_limit(shape)
            kernels[name] = tc.KernelStack(rng.uniform(-lim, lim, size=shape), np.zeros(shape[3]))
    return CellParams(kernels, peeps)


@dataclass(frozen=True)
class CellState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, dims: CellDims, batch: tuple[int, ...] = ()) -> "CellState":
        shape = batch + (dims.height, dims.width, dims.n)
        return cls(np.zeros(shape), np.zeros(shape))


def cell_forward(
    tape: Tape,
    spec: ModelSpec,
    p: Mapping[str, Node],
    h: Node,
    c: Node,
    x: Node,
    gate_activation: str = "hard_sig",
    prefix: str = "",
) -> tuple[Node, Node]:
    """One cell step on ``tape``; ``p`` maps ``prefix + 'f.w'`` etc. to leaves."""
    if gate_activation not in GATE_ACTIVATIONS:
        raise ConfigError(f"gate activation must be one of {GATE_ACTIVATIONS}, got {gate_activation!r}")
    gate_values: dict[str, Node] = {}
    xh = tape.stack(x, h)
    for q in GATES:
        if q not in spec.gates:
            continue
        w, b = p[f"{prefix}{q}.w"], p[f"{prefix}{q}.b"]
        if spec.peephole == "stacked_conv":
            net = tape.conv(tape.stack(x, h, c), w, b)
        else:
            net = tape.conv(xh, w, b)
            if spec.peephole == "elementwise":
                net = net + p[f"{prefix}{q}.peep"] * c
        gate_values[q] = tape.act(net, gate_activation)
    g = tape.act(tape.conv(xh, p[f"{prefix}g.w"], p[f"{prefix}g.b"]), "tanh")

    def scaled(role: str, value: Node) -> Node:
        return value if role == "one" else gate_values[role] * value

    c_new = scaled(spec.cell_scale, c) + scaled(spec.input_scale, g)
    h_new = scaled(spec.output_scale, tape.act(c_new, "tanh"))
    return h_new, c_new


def _check_cell_shapes(spec: ModelSpec, params: CellParams, state: CellState, x: np.ndarray):
    n = state.h.shape[-1]
    if state.h.shape != state.c.shape:
        raise ConfigError(f"h {state.h.shape} and c {state.c.shape} differ")
    if x.shape[:-1] != state.h.shape[:-1]:
        raise ConfigError(f"x spatial shape {x.shape[:-1]} does not match state {state.h.shape[:-1]}")
    dims = CellDims(state.h.shape[-3], state.h.shape[-2], x.shape[-1], n, n,
                    params.kernels["g"].size_m)
    expected = kernel_shapes(spec, dims)
    got = {k: v.shape for k, v in params.kernels.items()}
    got.update({f"{k}.peep": v.shape for k, v in params.peepholes.items()})
    if got != expected:
        raise ConfigError(f"{spec.id}: parameter shapes {got} do not match dims {expected}")


def cell_step(
    spec: ModelSpec,
    params: CellParams,
    state: CellState,
    x: np.ndarray,
    gate_activation: str = "hard_sig",
) -> tuple[np.ndarray, CellState]:
    """Pure single step on plain arrays; returns ``(h_new, new_state)``."""
    x = tc.as_image(x)
    _check_cell_shapes(spec, params, state, x)
    tape = Tape(grad=False)
    p = {k: tape.leaf(v) for k, v in params.flat().items()}
    h, c = cell_forward(tape, spec, p, tape.leaf(state.h), tape.leaf(state.c), tape.leaf(x),
                        gate_activation)
    return h.value, CellState(h.value, c.value)
