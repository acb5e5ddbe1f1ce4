import numpy as np
import pytest
from conftest import gradcheck

from keydiff import nd

RNG = np.random.default_rng(7)
TOL = 1e-4


def r(*shape):
    return RNG.standard_normal(shape)


# one entry per op: (name, builder, params)
OP_CASES = [
    ("add", lambda p: nd.sum_all(nd.mul(nd.add(p["a"], p["b"]), p["w"])), {"a": r(2, 3), "b": r(3), "w": r(2, 3)}),
    ("sub", lambda p: nd.sum_all(nd.mul(nd.sub(p["a"], p["b"]), p["w"])), {"a": r(2, 3), "b": r(2, 1), "w": r(2, 3)}),
    ("mul", lambda p: nd.sum_all(nd.mul(p["a"], p["b"])), {"a": r(3, 4), "b": r(4)}),
    ("matmul", lambda p: nd.sum_all(nd.mul(nd.matmul(p["a"], p["b"]), p["w"])), {"a": r(2, 3, 4), "b": r(4, 5), "w": r(2, 3, 5)}),
    ("linear", lambda p: nd.mse(nd.linear(p["x"], p["w"], p["b"]), p["y"]), {"x": r(5, 3), "w": r(3, 2), "b": r(2), "y": r(5, 2)}),
    ("mish", lambda p: nd.sum_all(nd.mul(nd.mish(p["x"]), p["w"])), {"x": 3 * r(4, 5), "w": r(4, 5)}),
    ("silu", lambda p: nd.sum_all(nd.mul(nd.silu(p["x"]), p["w"])), {"x": 3 * r(4, 5), "w": r(4, 5)}),
    ("relu", lambda p: nd.sum_all(nd.mul(nd.relu(p["x"]), p["w"])), {"x": r(4, 5) + 0.05, "w": r(4, 5)}),
    ("mse", lambda p: nd.mse(p["a"], p["b"]), {"a": r(3, 4), "b": r(3, 4)}),
    ("mean", lambda p: nd.sum_all(nd.mul(nd.mean(p["x"], axis=1), p["w"])), {"x": r(3, 4, 2), "w": r(3, 2)}),
    ("max_pool", lambda p: nd.sum_all(nd.mul(nd.max_pool(p["x"], 1), p["w"])), {"x": r(2, 7, 3), "w": r(2, 3)}),
    ("min_reduce", lambda p: nd.sum_all(nd.mul(nd.min_reduce(p["x"], 2), p["w"])), {"x": r(2, 3, 6), "w": r(2, 3)}),
    ("sq_dist_matrix", lambda p: nd.sum_all(nd.mul(nd.sq_dist_matrix(p["a"], p["b"]), p["w"])),
     {"a": r(2, 5, 3), "b": r(2, 4, 3), "w": r(2, 5, 4)}),
    ("concat", lambda p: nd.sum_all(nd.mul(nd.concat([p["a"], p["b"]], axis=1), p["w"])),
     {"a": r(2, 3), "b": r(2, 2), "w": r(2, 5)}),
    ("reshape_transpose", lambda p: nd.sum_all(nd.mul(nd.transpose(nd.reshape(p["x"], (3, 4)), (1, 0)), p["w"])),
     {"x": r(12), "w": r(4, 3)}),
    ("take_slice", lambda p: nd.sum_all(nd.mul(nd.take_slice(p["x"], 1, 3, axis=1), p["w"])), {"x": r(2, 4), "w": r(2, 2)}),
    ("split", lambda p: nd.sum_all(nd.mul(nd.split(p["x"], 2, axis=1)[1], p["w"])), {"x": r(3, 4), "w": r(3, 2)}),
    ("upsample", lambda p: nd.sum_all(nd.mul(nd.upsample(p["x"], 2), p["w"])), {"x": r(2, 4, 3), "w": r(2, 8, 3)}),
    ("conv1d_same", lambda p: nd.sum_all(nd.mul(nd.conv1d(p["x"], p["k"], p["b"], padding=1), p["w"])),
     {"x": r(2, 8, 3), "k": r(3, 3, 4), "b": r(4), "w": r(2, 8, 4)}),
    ("conv1d_stride2", lambda p: nd.sum_all(nd.mul(nd.conv1d(p["x"], p["k"], p["b"], stride=2, padding=1), p["w"])),
     {"x": r(2, 8, 3), "k": r(3, 3, 2), "b": r(2), "w": r(2, 4, 2)}),
    ("conv1d_k1", lambda p: nd.sum_all(nd.mul(nd.conv1d(p["x"], p["k"]), p["w"])),
     {"x": r(2, 5, 3), "k": r(1, 3, 2), "w": r(2, 5, 2)}),
    ("group_norm", lambda p: nd.sum_all(nd.mul(nd.group_norm(p["x"], 2, p["g"], p["b"]), p["w"])),
     {"x": r(2, 5, 4), "g": r(4), "b": r(4), "w": r(2, 5, 4)}),
]


@pytest.mark.parametrize("name,build,params", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, build, params):
    errs = gradcheck(build, params)
    assert max(errs.values()) < TOL, errs


def test_conv1d_same_padding_keeps_length():
    x = nd.Tensor(r(1, 16, 2))
    y = nd.conv1d(x, nd.Tensor(r(3, 2, 5)), padding=1)
    assert y.shape == (1, 16, 5)


def test_conv1d_matches_direct_sum():
    x, w, b = r(2, 6, 3), r(3, 3, 2), r(2)
    y = nd.conv1d(nd.Tensor(x), nd.Tensor(w), nd.Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    ref = np.stack([np.einsum("bkc,kco->bo", xp[:, i : i + 3], w) for i in range(6)], axis=1) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_max_pool_permutation_invariant():
    x = r(2, 9, 4)
    perm = RNG.permutation(9)
    a = nd.max_pool(nd.Tensor(x), 1).data
    b = nd.max_pool(nd.Tensor(x[:, perm]), 1).data
    assert np.array_equal(a, b)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(nd.ShapeError) as e:
        nd.matmul(nd.Tensor(r(2, 3)), nd.Tensor(r(4, 2)))
    assert "matmul" in str(e.value) and "(2, 3)" in str(e.value)


def test_backward_sum_gives_ones():
    p = nd.Tensor(r(3, 2), requires_grad=True)
    with nd.Tape() as tape:
        loss = nd.sum_all(p)
    np.testing.assert_array_equal(nd.backward(tape, loss)[p], np.ones((3, 2)))


def test_backward_mse_to_zero():
    x = r(4, 3)
    p = nd.Tensor(x.copy(), requires_grad=True)
    with nd.Tape() as tape:
        loss = nd.mse(p, np.zeros_like(x))
    np.testing.assert_allclose(nd.backward(tape, loss)[p], 2 * x / x.size, atol=1e-15)


def test_backward_rejects_non_scalar():
    p = nd.Tensor(r(3), requires_grad=True)
    with nd.Tape() as tape:
        y = nd.mul(p, 2.0)
    with pytest.raises(nd.ShapeError):
        nd.backward(tape, y)


def test_group_norm_normalizes_each_group():
    x = r(3, 7, 6) * 5 + 2
    y = nd.group_norm(nd.Tensor(x), 3, nd.Tensor(np.ones(6)), nd.Tensor(np.zeros(6))).data
    g = y.reshape(3, 7, 3, 2)
    np.testing.assert_allclose(g.mean(axis=(1, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(g.var(axis=(1, 3)), 1, atol=1e-3)


def test_mish_matches_reference_formula():
    x = np.linspace(-30, 30, 301)
    ref = x * np.tanh(np.log1p(np.exp(x)))
    np.testing.assert_allclose(nd.mish(nd.Tensor(x)).data, ref, rtol=1e-12, atol=1e-12)


def test_adam_zero_gradient_leaves_params():
    store = nd.ParamStore()
    store.add("w", r(3))
    before = store["w"].data.copy()
    nd.adam_step(store, {"w": np.zeros(3)}, nd.AdamConfig(lr=0.1))
    assert np.array_equal(store["w"].data, before) and store.step == 1


def test_adam_first_step_is_lr():
    store = nd.ParamStore()
    store.add("w", [1.0])
    nd.adam_step(store, {"w": np.array([3.0])}, nd.AdamConfig(lr=0.01))
    assert store["w"].data[0] == pytest.approx(1.0 - 0.01, abs=1e-8)


def test_adam_converges_on_quadratic():
    target = np.array([0.3, -0.7, 1.2])
    store = nd.ParamStore()
    store.add("w", np.zeros(3))
    cfg = nd.AdamConfig(lr=0.05)
    for _ in range(200):
        w = store["w"]
        with nd.Tape() as tape:
            loss = nd.mse(w, target)
        nd.adam_step(store, store.named_grads(nd.backward(tape, loss)), cfg)
    cfg_fine = nd.AdamConfig(lr=0.005)
    for _ in range(200):
        with nd.Tape() as tape:
            loss = nd.mse(store["w"], target)
        nd.adam_step(store, store.named_grads(nd.backward(tape, loss)), cfg_fine)
    assert np.max(np.abs(store["w"].data - target)) < 1e-3


def test_adam_rejects_nan():
    store = nd.ParamStore()
    store.add("w", [1.0])
    with pytest.raises(nd.NonFiniteGradient):
        nd.adam_step(store, {"w": np.array([np.nan])})


@pytest.mark.parametrize("decay", [0.0, 1.0])
def test_ema_limits(decay):
    store = nd.ParamStore()
    init = r(4)
    store.add("w", init)
    for _ in range(5):
        nd.adam_step(store, {"w": r(4)}, nd.AdamConfig(lr=0.1, ema_decay=decay))
    expect = store["w"].data if decay == 0.0 else init
    np.testing.assert_allclose(store.ema["w"], expect, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a.w": r(2, 3).astype(np.float32), "b": r(5).astype(np.float32), "s": np.float32(r(1))}
    path = tmp_path / "x.kdnp"
    nd.save_arrays(path, arrays)
    assert path.read_bytes()[:5] == b"KDNP1"
    back = nd.load_arrays(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE!" + bytes(8))
    with pytest.raises(nd.CheckpointError):
        nd.load_arrays(p)


def test_forward_backward_deterministic():
    def run():
        x = nd.Tensor(np.linspace(-1, 1, 48).reshape(2, 8, 3), requires_grad=True)
        k = nd.Tensor(np.linspace(0, 1, 18).reshape(3, 3, 2), requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.sum_all(nd.mish(nd.conv1d(x, k, padding=1)))
        g = nd.backward(tape, loss)
        return loss.data, g[x], g[k]

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
