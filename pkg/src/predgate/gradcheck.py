"""Finite-difference verification of every op kind, every zoo cell and a stack rollout."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import cell_zoo as cz
from .predcode_stack import StackConfig, build_stack, rollout_nodes

DEFAULT_H = 1e-5
OP_TOL = 1e-6
MODEL_TOL = 1e-4
MAX_TRIES = 20


@dataclass
class GradcheckRow:
    name: str
    report: ad.GradCheckReport
    tries: int

    @property
    def passed(self) -> bool:
        return self.report.passed and self.report.kink_margin >= 10 * DEFAULT_H


def _weighted_sum(tape, out, rng):
    r = tape.leaf(rng.uniform(0.5, 1.5, size=out.shape))
    return tape.sum(out * r)


# op kind -> (builder(tape, leaves, rng) -> loss, sampler(rng) -> params)
def _op_cases():
    def unary(kind, lo, hi, shape=(4, 4, 2)):
        def build(tape, p, rng):
            return _weighted_sum(tape, tape.record(kind, p["x"]), rng)
        return build, lambda rng: {"x": rng.uniform(lo, hi, size=shape)}

    def binary(kind):
        def build(tape, p, rng):
            return _weighted_sum(tape, tape.record(kind, p["a"], p["b"]), rng)
        return build, lambda rng: {"a": rng.normal(size=(3, 3, 2)), "b": rng.normal(size=(3, 3, 2))}

    cases = {k: binary(k) for k in ("add", "sub", "mul")}
    for kind, lo, hi in [("sigmoid", -4, 4), ("hard_sig", -3, 3), ("tanh", -2, 2),
                         ("relu", -1, 1), ("sat01", -0.5, 1.5), ("square", -2, 2),
                         ("maxpool2", -1, 1), ("upsample2", -1, 1)]:
        cases[kind] = unary(kind, lo, hi)

    def conv_build(tape, p, rng):
        return _weighted_sum(tape, tape.conv(p["x"], p["w"], p["b"]), rng)

    cases["conv_same"] = (conv_build, lambda rng: {
        "x": rng.normal(size=(5, 5, 3)), "w": rng.normal(size=(3, 3, 3, 2)), "b": rng.normal(size=2)})

    def stack_build(tape, p, rng):
        return _weighted_sum(tape, tape.stack(p["a"], p["b"], p["c"]), rng)

    cases["stack"] = (stack_build, lambda rng: {
        "a": rng.normal(size=(3, 3, 1)), "b": rng.normal(size=(3, 3, 2)), "c": rng.normal(size=(3, 3, 1))})

    def scale_build(tape, p, rng):
        return _weighted_sum(tape, tape.scale(p["x"], -1.75), rng)

    cases["scale"] = (scale_build, lambda rng: {"x": rng.normal(size=(3, 3, 2))})
    cases["sum"] = (lambda tape, p, rng: tape.scale(tape.sum(p["x"]), 1.0),
                    lambda rng: {"x": rng.normal(size=(3, 3, 2))})
    cases["mean"] = (lambda tape, p, rng: tape.sum(tape.mean(p["x"] * p["x"])),
                     lambda rng: {"x": rng.normal(size=(3, 3, 2))})
    return cases


def _check_resampled(build, sample, seed, h, tol, max_components=None) -> GradcheckRow:
    """Resample inputs until no kinked op sits within 10*h of its kink."""
    report = None
    for attempt in range(MAX_TRIES):
        rng = np.random.default_rng([seed, attempt])
        params = sample(rng)
        wseed = int(rng.integers(2 ** 31))

        def f(tape, leaves):
            return build(tape, leaves, np.random.default_rng(wseed))

        report = ad.finite_diff_check(f, params, h=h, tol=tol, max_components=max_components, seed=seed)
        if report.kink_margin >= 10 * h:
            return GradcheckRow("", report, attempt + 1)
    return GradcheckRow("", report, MAX_TRIES)


def check_ops(h=DEFAULT_H, tol=OP_TOL, seed=0, kinds=None) -> list[GradcheckRow]:
    rows = []
    for kind, (build, sample) in _op_cases().items():
        if kinds is not None and kind not in kinds:
            continue
        row = _check_resampled(build, sample, seed, h, tol)
        rows.append(replace(row, name=f"op:{kind}"))
    return rows


def _cell_case(spec: cz.ModelSpec, dims: cz.CellDims, gate_activation: str):
    def sample(rng):
        params = {}
        for name, shape in cz.kernel_shapes(spec, dims).items():
            if name.endswith(".peep"):
                params[name] = rng.uniform(-0.5, 0.5, size=shape)
            else:
                params[f"{name}.w"] = rng.uniform(-0.5, 0.5, size=shape)
                params[f"{name}.b"] = rng.uniform(-0.5, 0.5, size=shape[3])
        shape = (dims.height, dims.width)
        params["x"] = rng.uniform(0.0, 1.0, size=shape + (dims.gamma,))
        params["h"] = rng.uniform(-0.9, 0.9, size=shape + (dims.n,))
        params["c"] = rng.uniform(-0.9, 0.9, size=shape + (dims.n,))
        return params

    def build(tape, p, rng):
        h, c = cz.cell_forward(tape, spec, p, p["h"], p["c"], p["x"], gate_activation)
        return tape.sum(h) + tape.sum(c)

    return build, sample


GRAD_DIMS = cz.CellDims(8, 8, 2, 2, 2)


def check_models(models=cz.MODEL_IDS, h=DEFAULT_H, tol=MODEL_TOL, seed=0, peephole_mode="stacked_conv",
                 gate_activation="hard_sig", max_components=300) -> list[GradcheckRow]:
    rows = []
    for mid in models:
        spec = cz.model_spec(mid, peephole_mode)
        build, sample = _cell_case(spec, GRAD_DIMS, gate_activation)
        row = _check_resampled(build, sample, seed, h, tol, max_components)
        label = mid if spec.peephole != "elementwise" else f"{mid}/elementwise"
        rows.append(replace(row, name=label))
    return rows


GRAD_STACK = StackConfig(8, 8, a_channels=(1, 2), r_channels=(2, 2), model="M18", layer_weights=(1.0, 0.5))


def check_stack(config: StackConfig = GRAD_STACK, T=3, h=DEFAULT_H, tol=MODEL_TOL, seed=0,
                max_components=400) -> GradcheckRow:
    template = build_stack(config, 0).params

    def sample(rng):
        params = {}
        for name, v in template.items():
            if name.endswith(".b") and (".ahat." in name or ".down." in name):
                # keep rectifier inputs away from zero so targets are not clipped
                params[name] = rng.uniform(0.3, 0.6, size=v.shape)
            elif name.endswith(".b"):
                params[name] = rng.uniform(-0.5, 0.5, size=v.shape)
            else:
                params[name] = rng.uniform(-0.3, 0.3, size=v.shape)
        params["frames"] = rng.uniform(0.05, 0.95, size=(T, config.height, config.width, config.input_channels))
        return params

    def build(tape, p, rng):
        frames = [_frame(tape, p["frames"], t) for t in range(T)]
        loss, _, _ = rollout_nodes(tape, config, p, frames)
        return loss

    row = _check_resampled(build, sample, seed, h, tol, max_components)
    return replace(row, name=f"stack:{config.n_layers}-layer {config.model} T={T}")


def _frame(tape, frames_node, t):
    # frames are one leaf so their gradients are checked too; slice via a mask product
    sel = np.zeros(frames_node.shape[0])
    sel[t] = 1.0
    mask = tape.leaf(np.broadcast_to(sel[:, None, None, None], frames_node.shape).copy())
    picked = frames_node * mask
    return tape.record("select_frame", picked, index=t)


def _select_forward(x, index):
    return x[index]


def _select_backward(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    full[attrs["index"]] = g
    return (full,)


ad.OPS.setdefault("select_frame", ad.OpDef(_select_forward, _select_backward))


@contextmanager
def corrupted_backward(kind: str, factor: float = 1.5):
    """Temporarily scale the backward pass of one op kind (negative-control hook)."""
    original = ad.OPS[kind]

    def bad(g, vals, out, attrs):
        return tuple(None if x is None else factor * x for x in original.backward(g, vals, out, attrs))

    ad.OPS[kind] = ad.OpDef(original.forward, bad, original.kink_margin)
    try:
        yield
    finally:
        ad.OPS[kind] = original
