import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from s3tunet import ops
from s3tunet.serialize import FormatError, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from s3tunet.tensor import Tape, Tensor, current_tape


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- tensor and tape

def test_tensor_is_float64_and_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2) and t.size == 4
    assert t.data.flags["C_CONTIGUOUS"]


def test_item_requires_single_element():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).item()


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = ops.sum(x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_foreign_loss():
    x = leaf([1.0, 2.0])
    with Tape():
        loss = ops.sum(x)
    with Tape() as other:
        ops.sum(x)
    with pytest.raises(ValueError, match="not produced on this tape"):
        other.backward(loss)


def test_unused_leaf_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([[5.0]])
    with Tape() as tape:
        loss = ops.sum(ops.add(x, ops.mul(unused, 0.0)))
    grads = tape.backward(loss)
    assert grads[unused].shape == (1, 1)
    np.testing.assert_array_equal(grads[unused], 0.0)


def test_gradient_accumulates_over_reuse():
    x = leaf([3.0])
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 4.0)))
    np.testing.assert_allclose(tape.backward(loss)[x], [10.0])


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = ops.mul(x, 2.0)
    assert current_tape() is None
    assert not y.requires_grad


def test_tapes_are_thread_local():
    seen = []

    def worker():
        seen.append(current_tape())

    with Tape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [None]


def test_topological_order_on_tape():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.exp(x)
        z = ops.sum(ops.mul(y, x))
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert not inp.requires_grad or id(inp) in produced or inp is x
        produced.add(id(node.out))
    assert tape.nodes[-1].out is z


def test_operator_sugar_matches_ops():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 5.0])
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((a - b).data, [-2, -3])
    np.testing.assert_array_equal((a * b).data, [3, 10])
    np.testing.assert_allclose((a / b).data, [1 / 3, 2 / 5])
    np.testing.assert_array_equal((-a).data, [-1, -2])
    np.testing.assert_array_equal((2.0 - a).data, [1, 0])


# ---------------------------------------------------------------- conv2d

def test_conv_all_ones_center_and_corner():
    out = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1)
    assert out.data[0, 0, 1, 1] == 9.0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out.data[0, 0, i, j] == 4.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    np.testing.assert_array_equal(ops.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_depthwise_matches_loop():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 1, 3, 3))
    np.testing.assert_allclose(ops.conv2d(x, w, pad=1, groups=2).data,
                               oracles.conv2d(x, w, pad=1, groups=2), rtol=0, atol=1e-10)


@pytest.mark.parametrize("stride,pad,dilation,groups", [
    (1, 0, 1, 1), (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (2, 0, 1, 4), (1, 3, 3, 4),
])
def test_conv_matches_loop_oracle(stride, pad, dilation, groups):
    rng = np.random.default_rng(stride * 100 + pad * 10 + dilation + groups)
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(x, w, b, stride=stride, pad=pad, dilation=dilation, groups=groups).data
    want = oracles.conv2d(x, w, b, stride, pad, dilation, groups)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ops.ShapeError):
        ops.conv2d(np.ones((1, 3, 4, 4)), np.ones((2, 2, 3, 3)))
    with pytest.raises(ops.ShapeError):
        ops.conv2d(np.ones((1, 3, 4, 4)), np.ones((2, 1, 3, 3)), groups=2)
    with pytest.raises(ops.ShapeError):
        ops.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_conv_transpose_doubles_and_matches_loop():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    out = ops.conv_transpose2d(x, w, b).data
    assert out.shape == (2, 2, 6, 8)
    np.testing.assert_allclose(out, oracles.conv_transpose2d(x, w, b), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- basic ops

def test_maxpool_example():
    out = ops.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 4.0


def test_maxpool_rejects_odd_size():
    with pytest.raises(ops.ShapeError):
        ops.maxpool2d(np.ones((1, 1, 3, 4)))


def test_sigmoid_zero_is_half():
    assert ops.sigmoid(np.array([0.0])).data[0] == 0.5


def test_sigmoid_stays_open_interval():
    out = ops.sigmoid(np.array([-1e4, -50.0, 50.0, 1e4])).data
    assert np.all(out > 0) and np.all(out < 1)


def test_batched_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 2, 3)), rng.standard_normal((3, 2))
    np.testing.assert_allclose(ops.matmul(a, b).data, oracles.matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ops.ShapeError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ops.ShapeError):
        ops.add(np.ones((2, 3)), np.ones((4,)))


def test_broadcast_gradient_is_reduced():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones(3))
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, b))
    assert tape.backward(loss)[b].tolist() == [2.0, 2.0, 2.0]


def test_gelu_matches_erf_form():
    xs = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(ops.gelu(xs).data, [oracles.gelu(v) for v in xs], rtol=0, atol=1e-15)


def test_concat_slice_pad():
    a, b = leaf(np.ones((1, 2, 2))), leaf(np.zeros((1, 1, 2)))
    c = ops.concat([a, b], axis=1)
    assert c.shape == (1, 3, 2)
    p = ops.pad(a, ((0, 0), (1, 1), (0, 0)))
    assert p.shape == (1, 4, 2) and p.data[0, 0, 0] == 0.0
    s = ops.slice(c, (slice(None), slice(1, 3)))
    np.testing.assert_array_equal(s.data, [[[1, 1], [0, 0]]])


def test_transpose_and_reshape_roundtrip():
    x = np.random.default_rng(4).standard_normal((2, 3, 4))
    y = ops.reshape(ops.reshape(x, (6, 4)), (2, 3, 4))
    np.testing.assert_array_equal(y.data, x)
    z = ops.transpose(ops.transpose(x, (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(z.data, x)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_reshape_reshape_identity(shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    flat = ops.reshape(x, (-1,))
    np.testing.assert_array_equal(ops.reshape(flat, tuple(shape)).data, x)


# ---------------------------------------------------------------- softmax / layernorm / batchnorm

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(np.full(4, 3.7)).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_log3():
    np.testing.assert_allclose(ops.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance_and_rows(seed, k):
    x = np.random.default_rng(seed).standard_normal((3, 5)) * 5
    a, b = ops.softmax(x).data, ops.softmax(x + k).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    assert np.all((a >= 0) & (a <= 1))


def test_softmax_mask_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    out = ops.softmax(np.array([[1.0, 100.0, 1.0]]), mask=mask).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


def test_softmax_large_values_stable():
    out = ops.softmax(np.array([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_layernorm_constant_gives_zero():
    out = ops.layernorm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4)).data
    np.testing.assert_array_equal(out, 0.0)


def test_layernorm_unit_example():
    out = ops.layernorm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


def test_layernorm_matches_loop():
    rng = np.random.default_rng(5)
    x, g, b = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(ops.layernorm(x, g, b).data, oracles.layernorm_row(x, g, b), atol=1e-13)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(6).standard_normal((2, 3, 2, 2))
    out = ops.batchnorm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=0)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 4.0)
    beta = np.array([0.3, -0.7])
    out = ops.batchnorm2d(x, np.ones(2), beta, np.zeros(2), np.ones(2), training=True).data
    np.testing.assert_allclose(out[:, 0], 0.3)
    np.testing.assert_allclose(out[:, 1], -0.7)


def test_batchnorm_training_matches_loop_and_updates_running_stats():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 2, 3, 3))
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True).data
    want, mu, var = oracles.batchnorm_train(x, gamma, beta)
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)
    count = 4 * 3 * 3
    np.testing.assert_allclose(rm, 0.1 * mu, atol=1e-15)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * count / (count - 1), atol=1e-15)


def test_batchnorm_training_needs_two_samples():
    with pytest.raises(ValueError):
        ops.batchnorm2d(np.ones((1, 2, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2),
                        training=True)


# ---------------------------------------------------------------- determinism and finiteness

def test_forward_determinism():
    rng = np.random.default_rng(8)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = ops.conv2d(x, w, pad=1).data
    b = ops.conv2d(x, w, pad=1).data
    assert a.tobytes() == b.tobytes()


def test_finite_outputs_for_extreme_inputs():
    x = np.array([-1e300, -1e3, 0.0, 1e3, 1e300])
    for op in (ops.sigmoid, ops.relu, ops.gelu, ops.softmax):
        assert np.isfinite(op(x).data).all()


# ---------------------------------------------------------------- serialization

def test_tensor_bytes_roundtrip_and_layout():
    a = np.arange(6.0).reshape(2, 3)
    raw = tensor_to_bytes(a)
    assert raw[:4] == b"S3TU"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 2 and int.from_bytes(raw[20:28], "little") == 3
    assert raw[28:] == a.astype("<f8").tobytes()
    np.testing.assert_array_equal(tensor_from_bytes(raw), a)


def test_tensor_file_roundtrip(tmp_path):
    a = np.random.default_rng(9).standard_normal((3, 1, 2))
    save_tensor(a, tmp_path / "a.s3tu")
    assert load_tensor(tmp_path / "a.s3tu").tobytes() == a.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:4] + (2).to_bytes(4, "little") + r[8:],
    lambda r: r[:-3],
    lambda r: r + b"\0",
])
def test_corrupt_tensor_bytes_rejected(mutate):
    with pytest.raises(FormatError):
        tensor_from_bytes(mutate(tensor_to_bytes(np.ones((2, 2)))))
