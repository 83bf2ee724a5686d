import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weathermoe import nncore as nn


def _rng(seed=0):
    return nn.Rng(seed)


def _jitter(layer, rng, scale=0.1):
    layer.astype(np.float64)
    for p in layer.params().values():
        p.value = p.value + rng.normal(0, scale, size=p.value.shape)
    return layer


# ----------------------------------------------------------------- rng


def test_rng_is_reproducible_and_spawn_independent():
    a, b = nn.Rng(42), nn.Rng(42)
    assert np.array_equal(a.next_u64(5), b.next_u64(5))
    assert not np.array_equal(nn.Rng(42).spawn(1).next_u64(3), nn.Rng(42).spawn(2).next_u64(3))


def test_rng_uniform_and_normal_moments():
    r = _rng(3)
    u = r.uniform(2.0, 4.0, size=200_000)
    assert 2.0 <= u.min() and u.max() < 4.0
    assert abs(u.mean() - 3.0) < 0.01
    g = r.normal(1.0, 2.0, size=200_000)
    assert abs(g.mean() - 1.0) < 0.02 and abs(g.std() - 2.0) < 0.02


def test_permutation_is_a_permutation():
    p = _rng(1).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_derive_seed_differs_per_key():
    assert nn.derive_seed(1, 2) != nn.derive_seed(1, 3)
    assert nn.derive_seed(2 ** 64 - 1, 0) == nn.derive_seed(2 ** 64 - 1, 0)


# --------------------------------------------------------------- layers


def test_conv2d_matches_direct_loop():
    rng = _rng(0)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = nn.conv2d(x, (w, b), stride=2, pad=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_identity_kernel_conv_returns_input():
    x = _rng(1).normal(size=(2, 4, 4))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_allclose(nn.conv2d(x, (w, np.zeros(2)), pad=1), x)


def test_normalize_zero_mean_unit_variance_and_constant_input():
    x = _rng(2).normal(3.0, 5.0, size=(1, 2, 8, 8))
    y = nn.normalize(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-3)
    const = nn.normalize(np.full((1, 2, 4, 4), 7.0), np.ones(2), np.full(2, 0.5))
    assert np.all(np.isfinite(const))
    np.testing.assert_allclose(const, 0.5)


def test_global_average_pool_and_relu():
    x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2) - 10
    np.testing.assert_allclose(nn.global_average_pool(x), x.mean(axis=(2, 3)))
    assert (nn.relu(x) >= 0).all()


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([1000.0, 1001.0, 999.0])
    p = nn.softmax(z)
    np.testing.assert_allclose(p, nn.softmax(z - 1000))
    assert abs(p.sum() - 1) < 1e-12


def test_losses_reference_values():
    loss, _ = nn.cross_entropy_loss(np.zeros((1, 4)), np.array([2]))
    assert loss == pytest.approx(np.log(4))
    sl, _ = nn.smooth_l1_loss(np.array([0.05, 2.0]), np.zeros(2), beta=0.1)
    assert sl == pytest.approx(0.5 * 0.05 ** 2 / 0.1 + (2.0 - 0.05))
    fl, _ = nn.focal_loss(np.zeros(1), np.ones(1))
    assert fl == pytest.approx(0.25 * 0.25 * np.log(2))


def test_backward_without_forward_is_rejected():
    with pytest.raises(RuntimeError):
        nn.Conv2d(1, 1, rng=_rng()).backward(np.zeros((1, 1, 2, 2)))


def test_detached_forward_does_not_touch_caches():
    conv = nn.Conv2d(2, 2, rng=_rng())
    nn.detached(conv).forward(np.ones((1, 2, 4, 4), dtype=np.float32))
    assert conv._cache is None


def test_sgd_momentum_update():
    p = nn.Param(np.array([1.0]))
    p.grad[:] = 2.0
    nn.sgd_step([p], lr=0.1, momentum=0.9)
    nn.sgd_step([p], lr=0.1, momentum=0.9)
    # v1 = 2, w1 = 0.8; v2 = 0.9*2 + 2 = 3.8, w2 = 0.8 - 0.38
    assert p.value[0] == pytest.approx(0.42)


# ------------------------------------------------------------ gradients


GRAD_CASES = {
    "conv": (lambda r: nn.Conv2d(2, 3, 3, 2, 1, rng=r), (2, 2, 5, 5)),
    "depthwise": (lambda r: nn.DepthwiseConv2d(3, 3, 1, 1, rng=r), (2, 3, 4, 4)),
    "normalize": (lambda r: nn.Normalize(3), (2, 3, 4, 4)),
    "linear": (lambda r: nn.Linear(5, 3, rng=r), (4, 5)),
    "gap": (lambda r: nn.GlobalAvgPool(), (2, 3, 3, 3)),
    "relu": (lambda r: nn.ReLU(), (2, 3, 3, 3)),
    "ds_block": (lambda r: nn.DepthwiseSeparableBlock(2, 3, 2, rng=r), (2, 2, 6, 6)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_layer_gradients(name):
    make, shape = GRAD_CASES[name]
    rng = _rng(11)
    layer = _jitter(make(rng), rng)
    assert nn.check_layer_gradients(layer, rng.normal(size=shape), rng) < 1e-3


@pytest.mark.parametrize("which", ["ce", "smooth_l1", "focal"])
def test_loss_gradients(which):
    rng = _rng(5)
    x = rng.normal(size=(3, 4))
    if which == "ce":
        y = np.array([0, 3, 1])
        f = lambda: nn.cross_entropy_loss(x, y)[0]  # noqa: E731
    elif which == "smooth_l1":
        t = rng.normal(size=(3, 4))
        f = lambda: nn.smooth_l1_loss(x, t, beta=1.0 / 9)[0]  # noqa: E731
    else:
        t = (rng.random((3, 4)) < 0.3).astype(float)
        f = lambda: nn.focal_loss(x, t)[0]  # noqa: E731
    grad = {"ce": lambda: nn.cross_entropy_loss(x, y)[1], "smooth_l1": lambda: nn.smooth_l1_loss(x, t, 1.0 / 9)[1],
            "focal": lambda: nn.focal_loss(x, t)[1]}[which]()
    assert nn.relative_error(grad, nn.numeric_grad(f, x)) < 1e-3


def test_softmax_backward_matches_finite_differences():
    rng = _rng(8)
    z = rng.normal(size=(2, 5))
    r = rng.normal(size=(2, 5))
    p = nn.softmax(z, axis=1)
    g = nn.softmax_backward(r, p, axis=1)
    num = nn.numeric_grad(lambda: float((nn.softmax(z, axis=1) * r).sum()), z)
    assert nn.relative_error(g, num) < 1e-3


def test_relative_error_floor_handles_zero_gradients():
    assert nn.relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-3


# ------------------------------------------------------------ container


def test_container_roundtrip_preserves_dtype_and_bytes():
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64),
         "c": np.zeros(0, dtype=np.uint8), "d": np.eye(2)}
    data = nn.dump_tensors(t)
    back = nn.load_tensors(data)
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == t[k].dtype and np.array_equal(back[k], t[k])
    assert nn.dump_tensors(back) == data
    assert data[:8] == b"WMOECKPT"


def test_container_rejects_bad_magic_and_trailing_bytes():
    with pytest.raises(ValueError):
        nn.load_tensors(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError):
        nn.load_tensors(nn.dump_tensors({"a": np.ones(1)}) + b"x")


def test_state_roundtrip_and_hash():
    a = nn.Conv2d(2, 3, rng=_rng(1))
    b = nn.Conv2d(2, 3, rng=_rng(2))
    assert nn.param_hash(a) != nn.param_hash(b)
    nn.load_state(b, nn.state_dict(a))
    assert nn.param_hash(a) == nn.param_hash(b)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_container_roundtrip_property(values):
    arr = np.array(values)
    assert np.array_equal(nn.load_tensors(nn.dump_tensors({"v": arr}))["v"], arr)
