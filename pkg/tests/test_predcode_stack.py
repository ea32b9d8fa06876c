import numpy as np
import pytest
from scipy.signal import correlate2d

from predgate import predcode_stack as ps
from predgate.errors import BadMagicError, ConfigError, TruncatedFileError, UsageError, VersionMismatchError
from predgate.presets import PUBLISHED, compare_published, preset_config

SMALL = ps.StackConfig(8, 8, a_channels=(1, 2), r_channels=(2, 2))


def random_stack(config, seed=0, scale=0.4):
    rng = np.random.default_rng(seed)
    params = {k: rng.uniform(-scale, scale, size=v.shape) for k, v in ps.build_stack(config).params.items()}
    return ps.Stack(config, params)


def frames(n, T=4, hw=8, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, T, hw, hw, 1))


def test_mnist_layer0_shapes():
    m18 = ps.audit_config(preset_config("mnist-paper", "M18"))
    assert m18.shape_of("f", 0) == (3, 3, 52, 1)
    assert m18.shape_of("Â", 0) == (3, 3, 1, 1)
    assert m18.shape_of("downsample", 0) == (3, 3, 2, 48)
    m1 = ps.audit_config(preset_config("mnist-paper", "M1"))
    for k in "figo":
        assert m1.shape_of(k, 0) == (3, 3, 51, 1)
    assert m1.shape_of("downsample", 3) is None


@pytest.mark.parametrize("model", ["M18", "M1"])
def test_mnist_shapes_match_every_published_row(model):
    report = ps.audit_config(preset_config("mnist-paper", model))
    mismatched, _ = compare_published("mnist-paper", report)
    assert mismatched == []
    for (kernel, layer), shape in PUBLISHED[("mnist-paper", model)]["shapes"].items():
        assert report.shape_of(kernel, layer) == shape


def test_audit_totals_are_kernel_sums():
    m18 = ps.audit_config(preset_config("mnist-paper", "M18"))
    assert m18.total == 4_316_235
    assert m18.layer_biases() == [51, 240, 480, 576]
    assert ps.audit_config(preset_config("kitti-paper", "M18")).total == 4_320_273
    assert ps.audit_config(preset_config("kitti-paper", "M1")).total == 6_915_948
    # the kernel rows of the published M1 table sum to 16 less than its printed total
    m1 = ps.audit_config(preset_config("mnist-paper", "M1"))
    assert m1.total == 6_909_818
    _, notes = compare_published("mnist-paper", m1)
    assert any("6909834" in n.replace(",", "") for n in notes)


def test_model_swap_changes_only_cell_kernels():
    a = ps.audit_config(preset_config("mnist-paper", "M18"))
    b = ps.audit_config(preset_config("mnist-paper", "M1"))
    for kernel in ("Â", "downsample"):
        for layer in range(4):
            assert a.shape_of(kernel, layer) == b.shape_of(kernel, layer)


def test_one_layer_stack_has_no_pathways():
    shapes = ps.stack_kernel_shapes(ps.StackConfig(8, 8, (1,), (4,)))
    assert not any("down" in k for k in shapes)
    assert shapes["l0.f"] == (3, 3, 2 + 4 + 4, 4)


def test_audit_independent_of_weights():
    s = ps.build_stack(SMALL, 3)
    assert ps.audit_stack(s).total == s.n_params() == ps.audit_stack(random_stack(SMALL)).total


def test_error_module():
    A = np.full((1, 1, 1), 0.3)
    np.testing.assert_allclose(ps.error_module(A, np.full((1, 1, 1), 0.5)).ravel(), [0.2, 0.0])
    x = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert np.all(ps.error_module(x, x) == 0)
    rng = np.random.default_rng(1)
    for _ in range(1000):
        A, Ah = rng.uniform(-1, 2, size=(2, 3, 3, 2))
        e = ps.error_module(A, Ah)
        assert np.all(e >= 0)
        np.testing.assert_allclose(e[..., :2] + e[..., 2:], np.abs(Ah - A), rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        ps.error_module(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))


def test_first_step_with_zero_weights_predicts_black():
    zero = ps.Stack(SMALL, {k: np.zeros_like(v) for k, v in ps.build_stack(SMALL).params.items()})
    frame = frames(1)[0, 0]
    state, errors, pred = ps.stack_step(zero, ps.zero_state(SMALL), frame)
    assert np.all(pred == 0)
    np.testing.assert_array_equal(errors[0], np.concatenate([np.zeros_like(frame), frame], axis=-1))
    with pytest.raises(UsageError):
        ps.stack_step(zero, None, frame)


def test_constant_black_sequence_has_zero_loss():
    zero = ps.Stack(SMALL, {k: np.zeros_like(v) for k, v in ps.build_stack(SMALL).params.items()})
    assert ps.rollout(zero, np.zeros((5, 8, 8, 1))).loss == 0.0


def _conv(x, w, b):
    out = np.empty(x.shape[:2] + (w.shape[3],))
    for o in range(w.shape[3]):
        out[..., o] = b[o] + sum(correlate2d(x[..., i], w[:, :, i, o], mode="same") for i in range(x.shape[2]))
    return out


def test_single_layer_two_step_trace():
    cfg = ps.StackConfig(6, 6, (1,), (2,), model="M18")
    stack = random_stack(cfg, 4, scale=0.6)
    p = stack.params
    seq = frames(1, T=2, hw=6, seed=5)[0]
    h, c, e = np.zeros((6, 6, 2)), np.zeros((6, 6, 2)), np.zeros((6, 6, 2))
    trace = []
    for t in range(2):
        f = np.clip(0.25 * _conv(np.concatenate([e, h, c], -1), p["l0.f.w"], p["l0.f.b"]) + 0.5, 0, 1)
        g = np.tanh(_conv(np.concatenate([e, h], -1), p["l0.g.w"], p["l0.g.b"]))
        c = f * c + f * g
        h = f * np.tanh(c)
        ahat = np.clip(_conv(h, p["l0.ahat.w"], p["l0.ahat.b"]), 0, 1)
        e = np.concatenate([np.maximum(ahat - seq[t], 0), np.maximum(seq[t] - ahat, 0)], -1)
        trace.append((ahat, e))
    res = ps.rollout(stack, seq)
    for t in range(2):
        np.testing.assert_allclose(res.predictions[t], trace[t][0], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(res.errors[t][0], trace[t][1], rtol=1e-12, atol=1e-15)
    assert res.loss == pytest.approx(trace[1][1].mean(), rel=1e-12)


def test_loss_uses_layer0_only_but_upper_layer_matters():
    stack = random_stack(SMALL, 6)
    seq = frames(1, T=4, seed=6)[0]
    res = ps.rollout(stack, seq)
    expected = sum(res.errors[t][0].mean() for t in range(1, 4)) / 3
    assert res.loss == pytest.approx(expected, rel=1e-12)
    bumped = dict(stack.params)
    bumped["l1.ahat.b"] = bumped["l1.ahat.b"] + 0.5
    assert ps.rollout(ps.Stack(SMALL, bumped), seq).loss != res.loss


def test_mse_loss_squares_errors():
    cfg = ps.StackConfig(8, 8, (1, 2), (2, 2), loss="mse")
    stack = random_stack(cfg, 7)
    res = ps.rollout(stack, frames(1, seed=7)[0])
    expected = sum((res.errors[t][0] ** 2).mean() for t in range(1, 4)) / 3
    assert res.loss == pytest.approx(expected, rel=1e-12)


def test_batched_rollout_matches_per_sequence():
    stack = random_stack(SMALL, 8)
    seqs = frames(3, seed=8)
    batched = ps.rollout(stack, seqs)
    per = [ps.rollout(stack, s) for s in seqs]
    assert batched.loss == pytest.approx(np.mean([r.loss for r in per]), rel=1e-12)
    for i in range(3):
        np.testing.assert_allclose(batched.predictions[2][i], per[i].predictions[2], rtol=1e-13, atol=1e-15)


def test_ranges_after_every_step():
    stack = random_stack(SMALL, 9, scale=1.5)
    state = ps.zero_state(SMALL)
    for frame in frames(1, T=6, seed=9)[0]:
        state, errors, pred = ps.stack_step(stack, state, frame)
        assert pred.min() >= 0 and pred.max() <= 1
        assert all(np.all(np.abs(h) < 1) for h in state.h)
        assert all(np.all(e >= 0) for e in errors)


def test_predict_future_continues_the_rollout():
    stack = random_stack(SMALL, 10)
    seq = frames(1, T=5, seed=10)[0]
    nxt = ps.predict_future(stack, seq[:4], 1)
    assert nxt.shape == (1, 8, 8, 1)
    np.testing.assert_array_equal(nxt[0], ps.rollout(stack, seq).predictions[4])
    many = ps.predict_future(stack, seq[:3], 4)
    assert many.shape == (4, 8, 8, 1)
    assert many.min() >= 0 and many.max() <= 1
    with pytest.raises(ConfigError):
        ps.predict_future(stack, seq, 0)


def test_temporal_order_matters():
    stack = random_stack(SMALL, 11)
    seq = frames(1, T=5, seed=11)[0]
    assert ps.rollout(stack, seq).loss != ps.rollout(stack, seq[::-1]).loss


def test_config_validation():
    with pytest.raises(ConfigError):
        ps.StackConfig(6, 6, (1, 2, 2), (1, 2, 2))
    with pytest.raises(ConfigError):
        ps.StackConfig(8, 8, (1, 2), (1, 2), layer_weights=(1.0, -1.0))
    with pytest.raises(ConfigError):
        ps.StackConfig(8, 8, (1, 2), (1,))
    with pytest.raises(ConfigError):
        ps.rollout(ps.build_stack(SMALL), frames(1, T=1)[0])
    assert ps.StackConfig.from_text(SMALL.to_text()) == SMALL
    with pytest.raises(ConfigError):
        ps.StackConfig.from_text("height=8\nwidth=8\ncolour=red\n")


@pytest.mark.parametrize("mode", ["stacked_conv", "elementwise"])
def test_checkpoint_roundtrip_is_byte_exact(tmp_path, mode):
    cfg = ps.StackConfig(8, 8, (1, 2), (2, 2), model="rgcLSTM", peephole_mode=mode)
    stack = random_stack(cfg, 12)
    raw = ps.checkpoint_bytes(stack)
    assert raw[:4] == b"PGCK"
    path = tmp_path / "s.pgck"
    ps.save_checkpoint(stack, path)
    back = ps.load_checkpoint(path)
    assert back.config == cfg
    assert ps.checkpoint_bytes(back) == raw
    for k, v in stack.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_checkpoint_errors():
    raw = ps.checkpoint_bytes(random_stack(SMALL, 13))
    with pytest.raises(BadMagicError):
        ps.stack_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatchError):
        ps.stack_from_bytes(raw[:4] + b"\x02\x00" + raw[6:])
    with pytest.raises(TruncatedFileError):
        ps.stack_from_bytes(raw[:-5])
    with pytest.raises(ConfigError):
        ps.stack_from_bytes(raw + b"\x00")
