import numpy as np
import pytest
from scipy.signal import correlate2d

from predgate import cell_zoo as cz
from predgate import tensor_core as tc
from predgate.errors import ConfigError

DIMS = cz.CellDims(8, 8, 2, 2, 2)
LAYER0 = cz.CellDims(64, 64, 50, 1, 1)


def conv_ref(x, w, b):
    """Zero-padded 'same' correlation, one channel pair at a time."""
    out = np.empty(x.shape[:2] + (w.shape[3],))
    for o in range(w.shape[3]):
        out[..., o] = b[o] + sum(correlate2d(x[..., i], w[:, :, i, o], mode="same")
                                 for i in range(x.shape[2]))
    return out


def hsig(z):
    return np.maximum(np.minimum(0.25 * z + 0.5, 1.0), 0.0)


def random_case(spec, seed):
    rng = np.random.default_rng(seed)
    flat = {}
    for name, shape in cz.kernel_shapes(spec, DIMS).items():
        if name.endswith(".peep"):
            flat[name] = np.zeros(shape)
            continue
        flat[f"{name}.w"] = rng.uniform(-0.5, 0.5, size=shape)
        flat[f"{name}.b"] = rng.uniform(-0.5, 0.5, size=shape[3])
    x = rng.uniform(0, 1, size=(8, 8, 2))
    state = cz.CellState(rng.uniform(-0.9, 0.9, size=(8, 8, 2)), rng.uniform(-1, 1, size=(8, 8, 2)))
    return cz.CellParams.from_flat(flat), flat, state, x


def test_model_table():
    m18 = cz.model_spec("M18")
    assert (m18.gates, m18.peephole, m18.roles) == (("f",), "stacked_conv", ("f", "f", "f"))
    m1 = cz.model_spec("M1")
    assert (m1.gates, m1.peephole, m1.roles) == (("f", "i", "o"), "none", ("f", "i", "o"))
    assert cz.model_spec("M2").roles == ("f", "one", "one")
    m8 = cz.model_spec("M8")
    assert (m8.gates, m8.peephole, m8.roles) == (("f", "i", "o"), "stacked_conv", ("f", "i", "o"))
    for k in range(1, 8):
        a, b = cz.model_spec(f"M{k}"), cz.model_spec(f"M{k + 7}")
        assert (a.gates, a.roles) == (b.gates, b.roles)
        assert a.peephole == "none" and b.peephole == "stacked_conv"
    for k in range(15, 21):
        spec = cz.model_spec(f"M{k}")
        assert spec.gates == ("f",) and spec.roles.count("f") >= 2
    assert cz.model_spec("rgcLSTM") == m18
    assert cz.model_spec("convLSTM").id == "M8"
    assert cz.model_spec("M18", "elementwise").peephole == "elementwise"
    assert cz.model_spec("M15", "elementwise").peephole == "none"
    with pytest.raises(ConfigError):
        cz.model_spec("M21")


@pytest.mark.parametrize("mid,expected", [("M18", 929), ("M1", 1840), ("M15", 920)])
def test_count_params_layer0(mid, expected):
    spec = cz.model_spec(mid)
    assert cz.count_params(spec, LAYER0) == expected
    assert cz.init_params(spec, LAYER0, 0).n_params() == expected


@pytest.mark.parametrize("mid", cz.MODEL_IDS)
@pytest.mark.parametrize("mode", ["stacked_conv", "elementwise"])
def test_init_scalar_count_equals_count_params(mid, mode):
    spec = cz.model_spec(mid, mode)
    p = cz.init_params(spec, DIMS, 3)
    assert p.n_params() == cz.count_params(spec, DIMS)
    assert all(np.all(k.bias == 0) for k in p.kernels.values())


def test_init_is_seeded_and_within_glorot_limit():
    spec = cz.model_spec("M1")
    a, b = cz.init_params(spec, LAYER0, 5), cz.init_params(spec, LAYER0, 5)
    for name in a.kernels:
        assert a.kernels[name].weights.tobytes() == b.kernels[name].weights.tobytes()
        lim = cz.glorot_limit(a.kernels[name].shape)
        assert np.abs(a.kernels[name].weights).max() <= lim


def test_g_kernel_never_sees_c():
    for mid in cz.MODEL_IDS:
        shapes = cz.kernel_shapes(cz.model_spec(mid), LAYER0)
        assert shapes["g"] == (3, 3, 51, 1)


def test_m18_matches_straight_line_oracle():
    spec = cz.model_spec("M18")
    params, w, state, x = random_case(spec, 11)
    h_prev, c_prev = state.h, state.c
    f = hsig(conv_ref(np.concatenate([x, h_prev, c_prev], axis=2), w["f.w"], w["f.b"]))
    g = np.tanh(conv_ref(np.concatenate([x, h_prev], axis=2), w["g.w"], w["g.b"]))
    c = f * c_prev + f * g
    h = f * np.tanh(c)
    h_new, new = cz.cell_step(spec, params, state, x)
    np.testing.assert_allclose(new.c, c, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(h_new, h, rtol=1e-12, atol=1e-15)


def test_m1_matches_straight_line_oracle():
    spec = cz.model_spec("M1")
    params, w, state, x = random_case(spec, 12)
    xh = np.concatenate([x, state.h], axis=2)
    f = hsig(conv_ref(xh, w["f.w"], w["f.b"]))
    i = hsig(conv_ref(xh, w["i.w"], w["i.b"]))
    o = hsig(conv_ref(xh, w["o.w"], w["o.b"]))
    g = np.tanh(conv_ref(xh, w["g.w"], w["g.b"]))
    c = f * state.c + i * g
    h = o * np.tanh(c)
    h_new, new = cz.cell_step(spec, params, state, x)
    np.testing.assert_allclose(new.c, c, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(h_new, h, rtol=1e-12, atol=1e-15)


def test_elementwise_peephole_adds_weighted_c():
    spec = cz.model_spec("M18", "elementwise")
    params, w, state, x = random_case(spec, 13)
    peep = np.random.default_rng(0).normal(size=(8, 8, 2))
    params = cz.CellParams(params.kernels, {"f": peep})
    xh = np.concatenate([x, state.h], axis=2)
    f = hsig(conv_ref(xh, w["f.w"], w["f.b"]) + peep * state.c)
    g = np.tanh(conv_ref(xh, w["g.w"], w["g.b"]))
    c = f * state.c + f * g
    h_new, _ = cz.cell_step(spec, params, state, x)
    np.testing.assert_allclose(h_new, f * np.tanh(c), rtol=1e-12, atol=1e-15)


def test_zero_weights_give_zero_state():
    spec = cz.model_spec("M18")
    zero = {k: np.zeros_like(v) for k, v in cz.init_params(spec, DIMS, 0).flat().items()}
    state = cz.CellState.zeros(DIMS)
    x = np.random.default_rng(0).normal(size=(8, 8, 2))
    h, new = cz.cell_step(spec, cz.CellParams.from_flat(zero), state, x, gate_activation="sigmoid")
    assert np.all(h == 0) and np.all(new.c == 0)


def test_saturated_m2_exposes_cec():
    spec = cz.model_spec("M2")
    params, _, state, x = random_case(spec, 14)
    kernels = dict(params.kernels)
    kernels["f"] = tc.KernelStack(np.zeros_like(kernels["f"].weights), np.full(2, 100.0))
    params = cz.CellParams(kernels)
    g = np.tanh(conv_ref(np.concatenate([x, state.h], axis=2), kernels["g"].weights, kernels["g"].bias))
    h, new = cz.cell_step(spec, params, state, x)
    np.testing.assert_allclose(new.c, state.c + g, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(h, np.tanh(new.c), rtol=1e-14)


def test_cec_accumulates_over_twenty_steps():
    spec = cz.model_spec("M15")
    params, _, state, _ = random_case(spec, 15)
    kernels = dict(params.kernels)
    kernels["f"] = tc.KernelStack(kernels["f"].weights, np.full(2, 50.0))
    params = cz.CellParams(kernels)
    rng = np.random.default_rng(16)
    c0, total = state.c.copy(), np.zeros_like(state.c)
    for _ in range(20):
        x = rng.uniform(0, 1, size=(8, 8, 2))
        xh = np.concatenate([x, state.h], axis=2)
        assert np.all(hsig(conv_ref(xh, kernels["f"].weights, kernels["f"].bias)) == 1.0)
        total += np.tanh(conv_ref(xh, kernels["g"].weights, kernels["g"].bias))
        _, state = cz.cell_step(spec, params, state, x)
    np.testing.assert_allclose(state.c, c0 + total, rtol=1e-10, atol=1e-12)


def test_m16_with_open_gate_equals_m2():
    m16, m2 = cz.model_spec("M16"), cz.model_spec("M2")
    params, _, state, x = random_case(m16, 17)
    kernels = dict(params.kernels)
    kernels["f"] = tc.KernelStack(np.zeros_like(kernels["f"].weights), np.full(2, 10.0))
    params = cz.CellParams(kernels)
    a, _ = cz.cell_step(m16, params, state, x)
    b, _ = cz.cell_step(m2, params, state, x)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("mid", cz.MODEL_IDS)
def test_gate_range_and_bounded_h(mid):
    spec = cz.model_spec(mid)
    params, _, state, x = random_case(spec, 18)
    h, new = cz.cell_step(spec, params, state, 5 * x)
    assert np.all(np.abs(h) < 1)
    assert np.all(np.isfinite(new.c))


def test_shape_mismatch_is_rejected():
    spec = cz.model_spec("M18")
    params = cz.init_params(spec, DIMS, 0)
    with pytest.raises(ConfigError):
        cz.cell_step(spec, params, cz.CellState.zeros(DIMS), np.zeros((8, 8, 3)))
    with pytest.raises(ConfigError):
        cz.CellDims(8, 8, 2, 2, 3)
