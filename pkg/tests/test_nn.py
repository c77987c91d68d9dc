import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langnav import nn

from conftest import relative_error


def rand(rng, *shape):
    return rng.standard_normal(shape)


def fd_check(f, x, analytic_dx, rng, samples=10, eps=1e-6, tol=1e-4):
    """Central finite differences of scalar-valued f against analytic_dx."""
    flat = x.reshape(-1)
    ana = analytic_dx.reshape(-1)
    for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f()
        flat[i] = orig - eps
        lm = f()
        flat[i] = orig
        num = (lp - lm) / (2 * eps)
        assert abs(num - ana[i]) < 1e-9 or relative_error(num, ana[i]) < tol, (
            i, num, ana[i],
        )


# ---------------- conv ----------------

def test_conv_output_shape_arithmetic():
    rng = np.random.default_rng(0)
    x = rand(rng, 84, 84, 3)
    w = rand(rng, 5, 5, 3, 7)
    y = nn.conv2d_forward(x, w, np.zeros(7), stride=2)
    assert y.shape == (40, 40, 7)
    # full documented chain 84 -> 40 -> 18 -> 15 -> 7
    sizes = [84]
    for k, s in ((5, 2), (5, 2), (4, 1), (3, 2)):
        sizes.append((sizes[-1] - k) // s + 1)
    assert sizes == [84, 40, 18, 15, 7]


def test_conv_1x1_is_per_pixel_dot():
    rng = np.random.default_rng(1)
    x = rand(rng, 5, 6, 4)
    w = rand(rng, 1, 1, 4, 3)
    b = rand(rng, 3)
    y = nn.conv2d_forward(x, w, b, stride=1)
    expected = x @ w[0, 0] + b
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_conv_identity_filter_copies_channels():
    rng = np.random.default_rng(2)
    x = rand(rng, 6, 6, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    y = nn.conv2d_forward(x, w, np.zeros(3), stride=1)
    np.testing.assert_allclose(y, x, rtol=0, atol=0)


def test_conv_matches_naive_triple_loop():
    rng = np.random.default_rng(3)
    x = rand(rng, 9, 8, 2)
    w = rand(rng, 3, 3, 2, 4)
    b = rand(rng, 4)
    y = nn.conv2d_forward(x, w, b, stride=2)
    oh, ow = (9 - 3) // 2 + 1, (8 - 3) // 2 + 1
    expected = np.zeros((oh, ow, 4))
    for i in range(oh):
        for j in range(ow):
            patch = x[i * 2 : i * 2 + 3, j * 2 : j * 2 + 3, :]
            for f in range(4):
                expected[i, j, f] = (patch * w[:, :, :, f]).sum() + b[f]
    np.testing.assert_allclose(y, expected, rtol=1e-10)


def test_conv_shape_mismatch_raises():
    rng = np.random.default_rng(4)
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(rand(rng, 8, 8, 3), rand(rng, 3, 3, 4, 2), np.zeros(2))
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(rand(rng, 2, 2, 3), rand(rng, 3, 3, 3, 2), np.zeros(2), stride=4)


@pytest.mark.parametrize("shape,kernel,stride,batched", [
    ((7, 7, 3), (3, 3, 3, 5), 1, False),
    ((10, 9, 2), (4, 4, 2, 3), 2, False),
    ((8, 8, 4), (5, 5, 4, 2), 2, True),
])
def test_conv_gradients_finite_difference(shape, kernel, stride, batched):
    rng = np.random.default_rng(5)
    x = rand(rng, *((3,) + shape if batched else shape))
    w = rand(rng, *kernel)
    b = rand(rng, kernel[-1])
    proj = rand(rng, *nn.conv2d_forward(x, w, b, stride).shape)

    def loss():
        return float((nn.conv2d_forward(x, w, b, stride) * proj).sum())

    dy = proj
    dx, dw, db = nn.conv2d_backward(dy, x, w, stride)
    fd_check(loss, x, dx, rng)
    fd_check(loss, w, dw, rng)
    fd_check(loss, b, db, rng)


def test_conv_backward_need_dx_false():
    rng = np.random.default_rng(6)
    x, w, b = rand(rng, 6, 6, 2), rand(rng, 3, 3, 2, 4), rand(rng, 4)
    dy = rand(rng, *nn.conv2d_forward(x, w, b, 1).shape)
    dx, dw, db = nn.conv2d_backward(dy, x, w, 1, need_dx=False)
    assert dx is None
    dx2, dw2, db2 = nn.conv2d_backward(dy, x, w, 1)
    np.testing.assert_allclose(dw, dw2)
    np.testing.assert_allclose(db, db2)


# ---------------- fc / activations ----------------

def test_fc_gradients():
    rng = np.random.default_rng(7)
    x, w, b = rand(rng, 5, 6), rand(rng, 6, 4), rand(rng, 4)
    proj = rand(rng, 5, 4)

    def loss():
        return float((nn.fc_forward(x, w, b) * proj).sum())

    dx, dw, db = nn.fc_backward(proj, x, w)
    fd_check(loss, x, dx, rng)
    fd_check(loss, w, dw, rng)
    fd_check(loss, b, db, rng)


def test_prelu_definition():
    a = np.array([0.25])
    assert nn.prelu(np.array(-2.0), a) == -0.5
    assert nn.prelu(np.array(3.0), a) == 3.0
    # a=0 degenerates to relu
    np.testing.assert_array_equal(
        nn.prelu(np.array([-2.0, 3.0]), np.array([0.0])),
        nn.relu(np.array([-2.0, 3.0])),
    )


def test_prelu_gradients():
    rng = np.random.default_rng(8)
    z = rand(rng, 4, 5) + 0.1  # keep away from the kink
    a = np.array([0.3])
    proj = rand(rng, 4, 5)

    def loss():
        return float((nn.prelu(z, a) * proj).sum())

    dz, da = nn.prelu_backward(proj, z, a)
    fd_check(loss, z, dz, rng)
    fd_check(loss, a, da, rng)


def test_softmax_properties():
    rng = np.random.default_rng(9)
    z = rand(rng, 10, 6) * 50
    p = nn.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert (p >= 0).all()
    np.testing.assert_allclose(nn.log_softmax(z), np.log(p), atol=1e-6)
    # stability at extreme logits
    extreme = np.array([[1e4, -1e4, 0.0, 5.0]])
    p = nn.softmax(extreme)
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-6


# ---------------- recurrent ----------------

def gru_params(rng, in_dim, hidden):
    spec = nn.gru_param_spec("gru", in_dim, hidden)
    params = nn.ParamSet(spec, dtype=np.float64)
    for name, _ in spec:
        params.params[name][...] = rand(rng, *params.params[name].shape) * 0.5
    return params


def test_gru_t1_equals_single_step():
    rng = np.random.default_rng(10)
    params = gru_params(rng, 4, 3)
    x = rand(rng, 1, 4)
    h, _ = nn.gru_sequence(x, params.params, "gru")
    p = params.params
    z = nn.sigmoid(x[0] @ p["gru.wz"] + p["gru.bz"])
    r = nn.sigmoid(x[0] @ p["gru.wr"] + p["gru.br"])
    hh = np.tanh(x[0] @ p["gru.wh"] + p["gru.bh"])
    np.testing.assert_allclose(h, z * hh, rtol=1e-12)


def test_gru_empty_sequence_rejected():
    rng = np.random.default_rng(11)
    params = gru_params(rng, 4, 3)
    with pytest.raises(nn.ShapeError):
        nn.gru_sequence(np.zeros((0, 4)), params.params, "gru")


def test_gru_gradients_finite_difference():
    rng = np.random.default_rng(12)
    params = gru_params(rng, 4, 3)
    x = rand(rng, 6, 4)
    proj = rand(rng, 3)

    def loss():
        h, _ = nn.gru_sequence(x, params.params, "gru")
        return float((h * proj).sum())

    params.zero_grads()
    h, cache = nn.gru_sequence(x, params.params, "gru")
    dx, _ = nn.gru_backward(proj.copy(), cache, params.params, params.grads, "gru")
    fd_check(loss, x, dx, rng)
    for name in params.names():
        fd_check(loss, params.params[name], params.grads[name], rng, samples=4)


def test_lstm_gradients_finite_difference():
    rng = np.random.default_rng(13)
    wx, wh, b = rand(rng, 5, 12), rand(rng, 3, 12), rand(rng, 12)
    x, h, c = rand(rng, 5), rand(rng, 3), rand(rng, 3)
    ph, pc = rand(rng, 3), rand(rng, 3)

    def loss():
        h2, c2, _ = nn.lstm_step(x, h, c, wx, wh, b)
        return float((h2 * ph).sum() + (c2 * pc).sum())

    h2, c2, cache = nn.lstm_step(x, h, c, wx, wh, b)
    dx, dh, dc, (dwx, dwh, db) = nn.lstm_backward(ph, pc, cache, wx, wh)
    fd_check(loss, x, dx, rng)
    fd_check(loss, h, dh, rng)
    fd_check(loss, c, dc, rng)
    fd_check(loss, wx, dwx, rng)
    fd_check(loss, wh, dwh, rng)
    fd_check(loss, b, db, rng)


# ---------------- clip / adam ----------------

def test_clip_global_norm_scales():
    g = {"a": np.full(16, 10.0), "b": np.full(48, 10.0)}  # norm = 80
    norm = nn.clip_global_norm(g, 40.0)
    assert norm == pytest.approx(80.0)
    assert nn.global_norm(g.values()) == pytest.approx(40.0, abs=1e-6)
    np.testing.assert_allclose(g["a"], 5.0)


def test_clip_global_norm_no_change_below_max():
    g = {"a": np.full(4, 5.0)}  # norm 10
    norm = nn.clip_global_norm(g, 40.0)
    assert norm == pytest.approx(10.0)
    np.testing.assert_allclose(g["a"], 5.0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=64),
       st.floats(0.5, 50))
@settings(max_examples=50, deadline=None)
def test_clip_global_norm_property(values, max_norm):
    g = {"a": np.array(values, dtype=np.float64)}
    nn.clip_global_norm(g, max_norm)
    assert nn.global_norm(g.values()) <= max_norm + 1e-6


def test_lr_schedule_paper_values():
    params = nn.ParamSet([("w", (1,))])
    state = nn.AdamState.for_params(params, base_lr=1e-4)
    assert state.effective_lr(0) == pytest.approx(1e-4)
    assert state.effective_lr(9999) == pytest.approx(1e-4)
    assert state.effective_lr(10000) == pytest.approx(9e-5)
    assert state.effective_lr(20000) == pytest.approx(8.1e-5)
    assert state.effective_lr(35000) == pytest.approx(1e-4 * 0.9**3)


def test_adam_zero_gradient_no_change():
    params = nn.ParamSet([("w", (3,))])
    params.params["w"][...] = [1.0, -2.0, 3.0]
    state = nn.AdamState.for_params(params)
    nn.adam_step(params, state)
    np.testing.assert_allclose(params.params["w"], [1.0, -2.0, 3.0])


def test_adam_scalar_trajectory_matches_independent_recomputation():
    # independent oracle: plain-python Adam on one scalar with fixed gradient
    grad = 0.3
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in range(1, 26):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta -= lr * mhat / (vhat**0.5 + eps)
        expected.append(theta)

    params = nn.ParamSet([("w", (1,))], dtype=np.float64)
    params.params["w"][...] = 1.0
    state = nn.AdamState.for_params(params, base_lr=lr)
    got = []
    for _ in range(25):
        params.grads["w"][...] = grad
        nn.adam_step(params, state)
        got.append(float(params.params["w"][0]))
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_adam_zeroes_gradients_and_applies_annealed_lr():
    params = nn.ParamSet([("w", (2,))], dtype=np.float64)
    state = nn.AdamState.for_params(params, base_lr=1e-4, anneal_interval=2)
    params.grads["w"][...] = 1.0
    lr0 = nn.adam_step(params, state)
    assert lr0 == pytest.approx(1e-4)
    assert params.grad_flat.sum() == 0
    params.grads["w"][...] = 1.0
    assert nn.adam_step(params, state) == pytest.approx(1e-4)
    params.grads["w"][...] = 1.0
    assert nn.adam_step(params, state) == pytest.approx(9e-5)  # step 2, interval 2


# ---------------- ParamSet / checkpoint ----------------

def test_paramset_views_share_flat_buffer():
    params = nn.ParamSet([("a", (2, 3)), ("b", (4,))])
    params.params["a"][...] = 1
    params.params["b"][...] = 2
    assert params.flat.sum() == pytest.approx(2 * 3 + 4 * 2)
    clone = params.clone()
    clone.params["a"][0, 0] = 99
    assert params.params["a"][0, 0] == 1


def test_checkpoint_roundtrip_and_version(tmp_path):
    rng = np.random.default_rng(14)
    spec = [("enc.w", (3, 4)), ("enc.b", (4,)), ("head.w", (4, 2))]
    params = nn.ParamSet(spec)
    params.flat[:] = rng.standard_normal(params.total).astype(np.float32)
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(path, params, meta={"note": "test", "n": 3})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"note": "test", "n": 3}
    assert loaded.spec == params.spec
    np.testing.assert_array_equal(loaded.flat, params.flat)
    # deterministic bytes
    path2 = tmp_path / "ck2.bin"
    nn.save_checkpoint(path2, params, meta={"note": "test", "n": 3})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
    params = nn.ParamSet([("w", (2,))])
    good = tmp_path / "good.bin"
    nn.save_checkpoint(good, params)
    raw = bytearray(good.read_bytes())
    manifest_len = int.from_bytes(raw[4:8], "little")
    manifest = raw[8 : 8 + manifest_len].decode().replace('"version": 1', '"version": 9')
    bad = tmp_path / "badver.bin"
    bad.write_bytes(raw[:4] + len(manifest).to_bytes(4, "little") + manifest.encode()
                    + raw[8 + manifest_len :])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(bad)


def test_forward_determinism_float64():
    rng = np.random.default_rng(15)
    x = rand(rng, 9, 9, 2)
    w = rand(rng, 3, 3, 2, 4)
    b = rand(rng, 4)
    a = nn.conv2d_forward(x, w, b, 2)
    bagain = nn.conv2d_forward(x.copy(), w.copy(), b.copy(), 2)
    assert a.tobytes() == bagain.tobytes()
