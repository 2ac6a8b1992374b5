import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accunet import ops
from accunet.gradcheck import grad_check
from accunet.tensor import (DegenerateBatchError, DivisibilityError, NumericError, ShapeError,
                            Tape, Tensor)
from accunet.verify import primitive_checks


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


# -- conv2d


def test_pointwise_all_ones_sums_channels():
    out = ops.conv2d(T(np.ones((1, 2, 2, 2))), T(np.ones((3, 2, 1, 1))), T(np.zeros(3)))
    assert out.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(out.data, 2.0)


def test_depthwise_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 5)).astype(np.float32)
    w = np.zeros((4, 1, 3, 3), np.float32)
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv2d(T(x), T(w), padding=1, groups=4).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 6, 5))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros(got.shape)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    patch = xp[n, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    want[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.ones((1, 3, 4, 4))), T(np.ones((2, 2, 1, 1))))


def test_conv_group_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.ones((1, 4, 4, 4))), T(np.ones((3, 2, 1, 1))), groups=2)


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        ops.conv2d(T(np.full((1, 1, 2, 2), np.inf)), T(np.ones((1, 1, 1, 1))))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 9), w=st.integers(1, 9),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), co=st.integers(1, 3))
def test_conv_shape_law(n, c, h, w, k, stride, co):
    pad = k // 2
    x = T(np.zeros((n, c, h, w)))
    out = ops.conv2d(x, T(np.zeros((co, c, k, k))), stride=stride, padding=pad)
    assert out.shape == (n, co, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    assert out.shape == ops.conv2d_output_shape(x.shape, (co, c, k, k), stride, pad)


def test_conv_flops_formula():
    # 1x1 conv 32 -> 96 at 224x224: 2 * 96 * 224^2 * 32 MAC-FLOPs plus one add per output
    macs2 = 2 * 96 * 224 ** 2 * 32
    assert ops.conv2d_flops((1, 32, 224, 224), (96, 32, 1, 1), bias=False) == macs2
    assert ops.conv2d_flops((1, 32, 224, 224), (96, 32, 1, 1)) == macs2 + 96 * 224 ** 2
    assert abs(macs2 / 1e9 - 0.308) < 1e-3


# -- transposed conv


def test_transpose_replicates_blocks():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    out = ops.conv2d_transpose(T(x), T(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data[0, 0], np.kron(x[0, 0], np.ones((2, 2))))


def test_transpose_doubles_size():
    out = ops.conv2d_transpose(T(np.ones((1, 3, 14, 14))), T(np.ones((3, 5, 2, 2))))
    assert out.shape == (1, 5, 28, 28)


def test_transpose_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 4, 4))
    y = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 2, 2))
    # <tconv(x), y> == <x, conv(y)> with the conv weight laid out (c_out, c_in)
    lhs = (ops.conv2d_transpose(Tensor(x), Tensor(w)).data * y).sum()
    rhs = (x * ops.conv2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- pooling / resampling


def test_pool_examples():
    x = T([[[[1, 3], [5, 7]]]])
    assert ops.pool2d(x, "avg", 2).data.item() == 4.0
    assert ops.pool2d(x, "max", 2).data.item() == 7.0


def test_pool_divisibility_error_names_site():
    with pytest.raises(DivisibilityError, match="enc3 downsample.*multiple of 2"):
        ops.pool2d(T(np.ones((1, 1, 5, 4))), "max", 2, "enc3 downsample")


def test_max_pool_ties_route_to_first():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.pool2d(x, "max", 2))
    g = tape.backward(loss)[x.id]
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


@given(c=st.floats(-5, 5, allow_nan=False, width=32), s=st.sampled_from([2, 4]))
def test_pool_then_upsample_constant(c, s):
    x = T(np.full((1, 2, 8, 8), c))
    up = ops.upsample(ops.pool2d(x, "avg", s), (8, 8))
    np.testing.assert_array_equal(up.data, x.data)


def test_nearest_example():
    out = ops.upsample(T([[[[1, 2], [3, 4]]]]), (4, 4))
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                                   [3, 3, 4, 4], [3, 3, 4, 4]])


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(3).standard_normal((1, 2, 3, 5)).astype(np.float32)
    np.testing.assert_array_equal(ops.upsample(T(x), (3, 5), "bilinear").data, x)
    up = ops.upsample(T(np.full((1, 1, 3, 3), 2.5)), (7, 11), "bilinear")
    np.testing.assert_allclose(up.data, 2.5, rtol=1e-6)


def test_bilinear_align_corners_false():
    # 2 -> 4: output centres at input coords -0.25, 0.25, 0.75, 1.25 (clamped)
    up = ops.upsample(Tensor(np.array([[[[0.0, 4.0]]]])), (1, 4), "bilinear")
    np.testing.assert_allclose(up.data[0, 0, 0], [0.0, 1.0, 3.0, 4.0])


def test_upsample_zero_target():
    with pytest.raises(ShapeError):
        ops.upsample(T(np.ones((1, 1, 2, 2))), (0, 4))


# -- batchnorm


def test_bn_training_normalizes_and_updates():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(3, 2, (4, 3, 5, 5)))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True, 0.1)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3), ddof=1))


def test_bn_inference_identity():
    x = np.random.default_rng(5).standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = ops.batchnorm2d(T(x), T(np.ones(3)), T(np.zeros(3)), np.zeros(3, np.float32),
                          np.ones(3, np.float32), False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        ops.batchnorm2d(T(np.ones((1, 2, 1, 1))), T(np.ones(2)), T(np.zeros(2)),
                        np.zeros(2), np.ones(2), True)


# -- activations, concat, misc


def test_activation_examples():
    assert ops.leaky_relu(T([-1.0]), 0.01).data.item() == pytest.approx(-0.01)
    assert ops.sigmoid(T([0.0])).data.item() == 0.5


@given(st.lists(st.floats(0, 1e6, width=32), min_size=1, max_size=20))
def test_relu_equals_leaky_on_nonnegative(vals):
    x = T(vals)
    np.testing.assert_array_equal(ops.relu(x).data, ops.leaky_relu(x, 0.01).data)


@given(st.lists(st.floats(-80, 80, width=32), min_size=1, max_size=20))
def test_sigmoid_in_open_unit_interval(vals):
    s = ops.sigmoid(T(vals)).data
    assert np.all(s >= 0) and np.all(s <= 1)


def test_concat_shapes_and_strategies():
    rng = np.random.default_rng(6)
    xs = [T(rng.standard_normal((1, c, 4, 4))) for c in (2, 3)]
    assert ops.concat_channels(xs).shape == (1, 5, 4, 4)
    five = [T(rng.standard_normal((1, 96, 4, 4))) for _ in range(5)]
    a = ops.concat_channels(five, "naive")
    b = ops.concat_channels(five, "prealloc")
    assert b.shape[1] == 480 == 96 * (2 * 3 - 1)
    assert a.data.tobytes() == b.data.tobytes()


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels([T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 4, 5)))])


def test_gap_and_linear_identity():
    assert ops.global_avg_pool(T(np.full((2, 3, 4, 4), 3.0))).data.flat[0] == 3.0
    x = T(np.random.default_rng(7).standard_normal((4, 3)))
    np.testing.assert_array_equal(ops.linear(x, T(np.eye(3)), T(np.zeros(3))).data, x.data)


# -- tape


def test_backward_sum_and_product():
    a, b = T([1.0, 2.0, 3.0], True), T([4.0, 5.0, 6.0], True)
    with Tape() as tape:
        loss = ops.sum(a * b)
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[a.id], b.data)
    np.testing.assert_array_equal(g[b.id], a.data)
    with Tape() as tape:
        loss = ops.sum(a)
    np.testing.assert_array_equal(tape.backward(loss)[a.id], 1.0)


def test_backward_rejects_non_scalar_and_foreign_loss():
    a = T([1.0, 2.0], True)
    with Tape() as tape:
        y = a * a
    with pytest.raises(ShapeError):
        tape.backward(y)
    with pytest.raises(ValueError):
        Tape().backward(ops.sum(a))


def test_shared_input_gradients_accumulate():
    a = T([3.0], True)
    with Tape() as tape:
        loss = ops.sum(a * a + a)
    assert tape.backward(loss)[a.id][0] == pytest.approx(7.0)


def test_no_tape_records_nothing():
    a = T([1.0], True)
    ops.sum(a * a)  # no active tape: must not fail or leak state
    with Tape() as tape:
        loss = ops.sum(a)
    assert len(tape.nodes) == 1


# -- oracle


def test_grad_check_quadratic():
    x = np.random.default_rng(8).standard_normal((2, 3, 2, 2))
    assert grad_check(lambda t: ops.mul(ops.sum(ops.mul(t, t)), 0.5), x) < 1e-6


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * t, np.ones((1, 1, 2, 2)))


def test_grad_check_detects_a_wrong_gradient():
    def wrong(x):
        need = ops._needs(x)
        return ops._emit("wrong", np.asarray(np.sum(x.data ** 2)), (x,), need,
                         lambda g: (g * x.data,))  # should be 2x

    assert grad_check(wrong, np.ones((1, 1, 2, 2)), eps=(1e-4, 1e-6)) > 0.4


@pytest.mark.parametrize("result", list(primitive_checks(0)), ids=lambda r: r.name)
def test_primitive_oracle(result):
    assert result.error < result.tol
