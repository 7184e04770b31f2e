import numpy as np
import pytest

from semand.errors import CheckpointError, ConfigError
from semand.model import (
    ModelConfig,
    backward,
    forward,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from semand.objective import BatchFeatures, loss_total

MICRO = ModelConfig(
    input_channels=3,
    conv_stages=((4, 3, 2), (8, 3, 2)),
    h_dim=16,
    z_dim=8,
    g_hidden=(12, 12),
    k_hidden=(8, 8),
    seed=1,
    dtype="float64",
)


def micro_inputs(rng, batch=2, size=8):
    return rng.uniform(0.0, 1.0, size=(batch, MICRO.input_channels, size, size))


def batch_loss(state, x_n, x_a, weights=(1.0, 1.0, 1.5)):
    fwd_n = forward(state, x_n)
    fwd_a = forward(state, x_a)
    b = BatchFeatures(
        z_normal=fwd_n.z,
        z_aug=fwd_a.z,
        s_normal=fwd_n.s,
        s_aug=fwd_a.s,
        w_bc=weights[0],
        w_cl=weights[1],
        w_if=weights[2],
    )
    return loss_total(b), fwd_n, fwd_a


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=0)
    with pytest.raises(ConfigError):
        ModelConfig(s_dim=3)
    with pytest.raises(ConfigError):
        ModelConfig(conv_stages=((8, 4, 2),))  # even kernel
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def test_forward_shapes_and_contracts():
    state = init_state(MICRO)
    rng = np.random.default_rng(0)
    x = micro_inputs(rng, batch=5)
    fwd = forward(state, x)
    assert fwd.h.shape == (5, MICRO.h_dim)
    assert fwd.z.shape == (5, MICRO.z_dim)
    assert fwd.s.shape == (5, 2)
    assert np.abs(fwd.s.sum(axis=1) - 1.0).max() < 1e-6
    assert fwd.z.min() >= 0.0


def test_z_nonnegative_on_many_inputs():
    state = init_state(MICRO)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.0, 1.0, size=(1000, MICRO.input_channels, 8, 8))
    fwd = forward(state, x)
    assert fwd.z.min() >= 0.0


def test_zero_final_layer_gives_half_half():
    state = init_state(MICRO)
    state.params["k2_W"][:] = 0.0
    state.params["k2_b"][:] = 0.0
    rng = np.random.default_rng(2)
    fwd = forward(state, micro_inputs(rng, batch=4))
    assert np.allclose(fwd.s, 0.5)


def test_identical_inputs_identical_outputs():
    state = init_state(MICRO)
    rng = np.random.default_rng(3)
    x = micro_inputs(rng, batch=1)
    two = np.concatenate([x, x], axis=0)
    fwd = forward(state, two)
    assert np.array_equal(fwd.h[0], fwd.h[1])
    assert np.array_equal(fwd.z[0], fwd.z[1])
    assert np.array_equal(fwd.s[0], fwd.s[1])


def test_shape_mismatch_rejected():
    state = init_state(MICRO)
    with pytest.raises(ConfigError):
        forward(state, np.zeros((2, 5, 8, 8)))


def test_end_to_end_gradients_match_finite_differences():
    state = init_state(MICRO)
    rng = np.random.default_rng(4)
    x_n = micro_inputs(rng)
    x_a = micro_inputs(rng)
    report, fwd_n, fwd_a = batch_loss(state, x_n, x_a)
    g_n, _ = backward(state, fwd_n, report.grad_z_normal, report.grad_s_normal)
    g_a, _ = backward(state, fwd_a, report.grad_z_aug, report.grad_s_aug)
    grads = {k: g_n[k] + g_a[k] for k in g_n}

    step = 1e-5
    names = sorted(state.params)
    probes = []
    for k in range(50):
        name = names[int(rng.integers(len(names)))]
        flat_idx = int(rng.integers(state.params[name].size))
        probes.append((name, flat_idx))
    worst = 0.0
    for name, flat_idx in probes:
        arr = state.params[name]
        idx = np.unravel_index(flat_idx, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        up = batch_loss(state, x_n, x_a)[0].l_total
        arr[idx] = orig - step
        down = batch_loss(state, x_n, x_a)[0].l_total
        arr[idx] = orig
        fd = (up - down) / (2 * step)
        analytic = grads[name][idx]
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
        worst = max(worst, rel)
        assert rel < 1e-3, f"{name}{idx}: fd={fd} analytic={analytic}"


def test_backward_returns_last_conv_gradient():
    state = init_state(MICRO)
    rng = np.random.default_rng(5)
    x = micro_inputs(rng, batch=1)
    fwd = forward(state, x)
    grad_s = np.zeros_like(fwd.s)
    grad_s[:, 1] = 1.0
    _, d_act = backward(state, fwd, None, grad_s)
    assert d_act.shape == fwd.last_conv.shape
    assert np.isfinite(d_act).all()


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(input_channels=2, conv_stages=((4, 3, 2),), h_dim=8, z_dim=4, g_hidden=(6, 6), k_hidden=(4, 4), seed=3)
    state = init_state(cfg)
    state.step = 17
    state.opt_m = {k: v + 0.5 for k, v in state.opt_m.items()}
    path = tmp_path / "model.smck"
    save_checkpoint(state, path)
    back = load_checkpoint(path, cfg)
    assert back.step == 17
    for name in state.params:
        assert back.params[name].tobytes() == state.params[name].tobytes()
        assert back.opt_m[name].tobytes() == state.opt_m[name].tobytes()
        assert back.opt_v[name].tobytes() == state.opt_v[name].tobytes()
    rng = np.random.default_rng(6)
    x = rng.random((3, 2, 8, 8))
    assert np.array_equal(forward(state, x).s, forward(back, x).s)


def test_checkpoint_truncated_rejected(tmp_path):
    cfg = ModelConfig(input_channels=1, conv_stages=((2, 3, 2),), h_dim=4, z_dim=2, g_hidden=(3, 3), k_hidden=(2, 2))
    state = init_state(cfg)
    path = tmp_path / "model.smck"
    save_checkpoint(state, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    cfg = ModelConfig(input_channels=1, conv_stages=((2, 3, 2),), h_dim=4, z_dim=2, g_hidden=(3, 3), k_hidden=(2, 2))
    other = ModelConfig(input_channels=2, conv_stages=((2, 3, 2),), h_dim=4, z_dim=2, g_hidden=(3, 3), k_hidden=(2, 2))
    state = init_state(cfg)
    path = tmp_path / "model.smck"
    save_checkpoint(state, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.smck"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_init_is_seed_deterministic():
    a = init_state(MICRO)
    b = init_state(MICRO)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    c = init_state(ModelConfig(**{**MICRO.__dict__, "seed": 2}))
    assert any(
        not np.array_equal(a.params[n], c.params[n]) for n in a.params if n.endswith("_W")
    )
