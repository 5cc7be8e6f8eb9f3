import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

import oracles
from drpc import tensor as T
from drpc.errors import ContractError, DataError, DimensionError


def _fd_check(build, arrays, eps=1e-5, rtol=1e-4, seed=0):
    """Compare backward() against central differences of <build(...), w>."""
    rng = np.random.default_rng(seed)
    params = [T.parameter(a) for a in arrays]
    out = build(*params)
    weights = rng.normal(size=out.shape)

    def scalar():
        return float((build(*[T.Tensor(p.data) for p in params]).data * weights).sum())

    loss = (build(*params) * T.Tensor(weights)).sum() if out.size > 1 else build(*params) * float(weights)
    loss.backward()
    numeric = oracles.numeric_grad(scalar, [p.data for p in params], eps)
    for p, n in zip(params, numeric):
        oracles.assert_grad_close(p.grad, n, rtol)


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    pad = k // 2
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(4, 8)), int(rng.integers(4, 8))))
    w = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], k, k))
    b = rng.normal(size=w.shape[0])
    _fd_check(lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride, pad), [x, w, b], seed=seed)


@pytest.mark.parametrize("seed", range(20))
def test_resize2d_gradient(seed):
    rng = np.random.default_rng(seed)
    mode = ["nearest", "bilinear", "area"][seed % 3]
    x = rng.normal(size=(1, 2, int(rng.integers(2, 7)), int(rng.integers(2, 7))))
    oh, ow = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    _fd_check(lambda x_: T.resize2d(x_, oh, ow, mode), [x], seed=seed)


@pytest.mark.parametrize("seed", range(20))
def test_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=tuple(rng.integers(1, 5, size=3)))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    _fd_check(T.relu, [x], seed=seed)


def test_relu_subgradient_at_zero_is_zero():
    x = T.parameter(np.array([0.0, -1.0, 2.0]))
    T.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_and_shape_ops_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    _fd_check(lambda x, y: (x * y - x) * 2.5 + y / 4.0 - 1.0, [a, b], seed=seed)
    _fd_check(lambda x: x[1, :, 1:3].reshape((6,)), [a], seed=seed)
    _fd_check(lambda x, y: T.concat([x, y], axis=1), [a, b], seed=seed)
    _fd_check(lambda x, y: T.stack([x, y]).mean(), [a, b], seed=seed)
    _fd_check(lambda x: (-x).abs().sum(), [a + np.sign(a) * 0.01], seed=seed)


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    n, k, h, w = 2, int(rng.integers(2, 5)), 3, 4
    logits = rng.normal(size=(n, k, h, w)) * 2
    labels = rng.integers(0, k, size=(n, h, w))
    labels[rng.random(labels.shape) < 0.2] = 255
    labels[0, 0, 0] = 0
    _fd_check(lambda z: T.cross_entropy(z, labels), [logits], seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_nested_loops(seed):
    rng = np.random.default_rng(100 + seed)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("mode", ["nearest", "bilinear", "area"])
@pytest.mark.parametrize("size", [(5, 7, 10, 3), (8, 8, 4, 4), (3, 4, 3, 4), (4, 6, 9, 13)])
def test_resize2d_matches_pointwise_oracle(mode, size):
    h, w, oh, ow = size
    x = np.random.default_rng(h * w).normal(size=(1, 2, h, w))
    got = T.resize2d(T.Tensor(x), oh, ow, mode).data
    np.testing.assert_allclose(got, oracles.resize2d(x, oh, ow, mode), atol=1e-12)


def test_resize_rows_sum_to_one_and_nearest_doubles():
    for mode in ("nearest", "bilinear", "area"):
        m = T._resize_matrix(5, 11, mode)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = T.resize2d(T.Tensor(x), 4, 4, "nearest").data[0, 0]
    np.testing.assert_array_equal(up, np.kron(x[0, 0], np.ones((2, 2))))


def test_area_downsample_is_block_mean():
    x = np.random.default_rng(3).normal(size=(1, 1, 8, 8))
    got = T.resize2d(T.Tensor(x), 4, 4, "area").data
    want = x.reshape(1, 1, 4, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_cross_entropy_matches_oracle_and_uniform_value():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(3, 5, 4, 4))
    labels = rng.integers(0, 5, size=(3, 4, 4))
    labels[2] = 255  # a fully ignored image drops out of the image mean
    labels[0, 1, 1] = 255
    got = T.cross_entropy(T.Tensor(logits), labels).item()
    assert got == pytest.approx(oracles.cross_entropy(logits, labels), abs=1e-12)
    uniform = T.cross_entropy(T.Tensor(np.zeros((1, 5, 2, 2))), np.zeros((1, 2, 2), int)).item()
    assert uniform == pytest.approx(np.log(5), abs=1e-12)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(DataError):
        T.cross_entropy(T.Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255))


def test_conv2d_shape_errors_name_axis():
    x = T.Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(DimensionError, match="channel axis"):
        T.conv2d(x, T.Tensor(np.zeros((2, 4, 3, 3))), T.Tensor(np.zeros(2)))
    with pytest.raises(DimensionError, match="height axis"):
        T.conv2d(x, T.Tensor(np.zeros((2, 3, 9, 1))), T.Tensor(np.zeros(2)))
    with pytest.raises(DimensionError, match="axis 1"):
        T.Tensor(np.zeros((2, 3))) + T.Tensor(np.zeros((2, 4)))


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradients_accumulate_over_shared_subgraphs():
    x = T.parameter(np.array([2.0]))
    a = x * 3.0
    ((a + a) * a).sum().backward()  # 18 x^2
    assert x.grad[0] == pytest.approx(72.0)
    (x * 1.0).sum().backward()
    assert x.grad[0] == pytest.approx(73.0)


def test_no_graph_without_grad_and_detach_is_independent():
    x = T.Tensor(np.ones(2))
    y = x * 2.0
    assert y.node is None and not y.requires_grad
    p = T.parameter(np.ones(2))
    d = (p * 2.0).detach()
    d.data[0] = 99.0
    assert d.node is None and p.data[0] == 1.0


def test_tape_records_and_is_thread_local():
    p = T.parameter(np.ones(2))
    seen = {}

    def other():
        seen["tape"] = T.current_tape()

    with T.Tape(seed=4) as tape:
        (p * 2.0).sum()
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert len(tape.nodes) == 2
    assert seen["tape"] is None
    assert T.current_tape() is None


def test_tape_rng_is_seeded():
    with T.Tape(seed=9) as a:
        x = a.rng.normal(size=3)
    with T.Tape(seed=9) as b:
        y = b.rng.normal(size=3)
    np.testing.assert_array_equal(x, y)


@settings(max_examples=40, deadline=None)
@given(hs.integers(1, 6), hs.integers(1, 6), hs.integers(1, 12), hs.integers(1, 12),
       hs.sampled_from(["nearest", "bilinear", "area"]))
def test_resize_preserves_constants(h, w, oh, ow, mode):
    x = np.full((1, 1, h, w), 3.25)
    np.testing.assert_allclose(T.resize2d(T.Tensor(x), oh, ow, mode).data, 3.25, atol=1e-12)
