import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnet.autodiff import NonFiniteError, Tape, TapeError, Tensor, backward, detach, gradcheck, make_result, ops


def naive_conv(x, w, b=None, stride=1, padding=0):
    B, C, H, W = x.shape
    per_sample = w.ndim == 5
    co, _, k, _ = w.shape[-4:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, co, ho, wo))
    for n in range(B):
        wn = w[n] if per_sample else w
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(patch * wn[o]) + (0 if b is None else b[o])
    return out


def naive_grid_sample(x, grid):
    B, C, H, W = x.shape
    out = np.zeros((B, C) + grid.shape[1:3])
    for n in range(B):
        for i in range(grid.shape[1]):
            for j in range(grid.shape[2]):
                px = np.clip(((grid[n, i, j, 0] + 1) * W - 1) / 2, 0, W - 1)
                py = np.clip(((grid[n, i, j, 1] + 1) * H - 1) / 2, 0, H - 1)
                x0, y0 = int(np.floor(px)), int(np.floor(py))
                x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
                fx, fy = px - x0, py - y0
                out[n, :, i, j] = (x[n, :, y0, x0] * (1 - fx) * (1 - fy) + x[n, :, y0, x1] * fx * (1 - fy)
                                   + x[n, :, y1, x0] * (1 - fx) * fy + x[n, :, y1, x1] * fx * fy)
    return out


# -- tape mechanics ---------------------------------------------------------

def test_backward_simple_chain():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.mul(x, x))
    g = backward(y, tape, wrt=[x])
    np.testing.assert_array_equal(g[x], [2.0, 4.0, 6.0])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((3, 3)), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(x)
    g = backward(y, tape, wrt=[x, unused])
    assert g[unused].shape == (3, 3) and not g[unused].any()


def test_fan_out_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ops.add(ops.mul(x, 2.0), ops.mul(x, x))
    assert backward(y, tape, wrt=[x])[x] == pytest.approx(8.0)


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.mul(detach(x), x))
    np.testing.assert_array_equal(backward(y, tape, wrt=[x])[x], [1.0, -2.0])


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = ops.exp(x)
    np.testing.assert_allclose(y.data, np.e)


def test_backward_is_replayable():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.sin(x))
    a = backward(y, tape, wrt=[x])[x]
    b = backward(y, tape, wrt=[x])[x]
    np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0, 1.0]))


def test_missing_adjoint_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = make_result(x.data * 2, [x], None, "opaque")
        z = ops.sum(y)
    with pytest.raises(TapeError, match="opaque"):
        backward(z, tape, wrt=[x])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(TapeError):
        backward(y, tape)


def test_cycle_detected():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
        z = ops.sum(y)
    # corrupt the record list so an op consumes its own later output
    tape.records[0].inputs = (z,)
    with pytest.raises(TapeError, match="cyclic"):
        backward(z, tape, wrt=[x])


# -- forward oracles -------------------------------------------------------

@pytest.mark.parametrize("shape,cout,k,stride,pad", [
    ((2, 3, 6, 6), 2, 3, 1, 1),   # tap-stacked path
    ((1, 2, 5, 7), 4, 3, 1, 1),   # im2col path (c_out > c_in)
    ((2, 3, 7, 7), 2, 3, 2, 1),   # strided
    ((1, 3, 4, 4), 5, 1, 1, 0),   # 1x1
])
def test_conv2d_matches_naive(rng, shape, cout, k, stride, pad):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], k, k))
    b = rng.standard_normal(cout)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_per_sample_weights(rng):
    x = rng.standard_normal((3, 2, 5, 5))
    w = rng.standard_normal((3, 2, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(out, naive_conv(x, w, None, 1, 1), atol=1e-10)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(rng.standard_normal((1, 3, 4, 4))), Tensor(rng.standard_normal((2, 2, 3, 3))))


def test_grid_sample_matches_naive(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    grid = rng.uniform(-1.3, 1.3, (2, 4, 3, 2))
    out = ops.grid_sample_bilinear(Tensor(x), Tensor(grid)).data
    np.testing.assert_allclose(out, naive_grid_sample(x, grid), atol=1e-12)


def test_identity_grid_reproduces_input(rng):
    x = rng.standard_normal((2, 3, 8, 5))
    grid = np.broadcast_to(ops.identity_grid(8, 5), (2, 8, 5, 2))
    np.testing.assert_allclose(ops.grid_sample_bilinear(Tensor(x), Tensor(grid)).data, x, atol=1e-12)


def test_resize_same_size_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    assert ops.resize_bilinear(x, 4, 4) is x


def test_softmax_rows_sum_to_one(rng):
    s = ops.softmax(Tensor(50 * rng.standard_normal((4, 7))), axis=-1).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


def test_split_concat_round_trip(rng):
    x = Tensor(rng.standard_normal((2, 7, 3)))
    parts = ops.split(x, [3, 4], axis=1)
    assert np.array_equal(ops.concat(parts, axis=1).data, x.data)


def test_avg_pool_and_upsample(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    pooled = ops.avg_pool2(Tensor(x)).data
    np.testing.assert_allclose(pooled[0, 0, 0, 0], x[0, 0, :2, :2].mean())
    up = ops.upsample_nearest2(Tensor(pooled)).data
    assert up.shape == (1, 1, 4, 4) and up[0, 0, 1, 1] == pooled[0, 0, 0, 0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(0, 2 ** 16))
def test_broadcast_add_gradient_shapes(shape, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal(shape), requires_grad=True)
    b = Tensor(r.standard_normal(shape[-1:]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(a, b))
    g = backward(y, tape, wrt=[a, b])
    assert g[a].shape == a.shape and g[b].shape == b.shape
    np.testing.assert_allclose(g[b], np.prod(shape[:-1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.floats(0.1, 30.0))
def test_softmax_is_distribution(rows, cols, scale):
    r = np.random.default_rng(rows * 31 + cols)
    s = ops.softmax(Tensor(scale * r.standard_normal((rows, cols)))).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


# -- gradient checker ------------------------------------------------------

def test_every_op_has_three_shapes():
    assert all(len(cases) >= 3 for cases in gradcheck.REGISTRY.values())


def test_gradcheck_single_op():
    results = gradcheck.run(["softmax"])
    assert len(results) == 3 and all(r.passed for r in results)


def test_gradcheck_unknown_op():
    with pytest.raises(KeyError):
        gradcheck.run(["nope"])


def test_gradcheck_catches_broken_adjoint():
    def bad_square(a):
        return make_result(a.data ** 2, [a], lambda g: (g * a.data,), "bad_square")  # should be 2*a

    reg = {"bad_square": [gradcheck.CheckCase("bad_square[0]", bad_square, lambda r: [r.standard_normal(4)])]}
    (res,) = gradcheck.run(registry=reg)
    assert not res.passed
