import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv3d_oracle, conv_transpose3d_oracle
from swdl import autodiff as ad
from swdl.autodiff import Parameter, Tensor
from swdl.errors import ArgumentError, ParseError, StateError


def T(a, grad=True):
    return Tensor(a, requires_grad=grad)


# -- forward semantics ---------------------------------------------------------

def test_conv_scalar_affine():
    out = ad.conv3d(T([[[[[2.0]]]]]), T([[[[[3.0]]]]]), T([1.0]))
    assert out.data.ravel().tolist() == [7.0]


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 3, 4, 5))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    with ad.precision("float64"):
        out = ad.conv3d(T(x), T(w), T([0.0]), 1, 1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 0), (2, 1)])
def test_conv_matches_loop_oracle(rng, f64, stride, padding):
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv3d(T(x), T(w), T(b), stride, padding)
    expect = conv3d_oracle(x, w, b, stride, padding)
    assert out.shape == expect.shape
    np.testing.assert_allclose(out.data, expect, atol=1e-10)


def test_conv_output_shape_rule(f64):
    x = T(np.zeros((1, 1, 7, 6, 5)))
    w = T(np.zeros((2, 1, 3, 3, 3)))
    assert ad.conv3d(x, w, None, 2, 1).shape == (1, 2, 4, 3, 3)


def test_conv_shape_errors(f64):
    with pytest.raises(ArgumentError):
        ad.conv3d(T(np.zeros((1, 2, 4, 4, 4))), T(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ArgumentError):
        ad.conv3d(T(np.zeros((1, 1, 2, 2, 2))), T(np.zeros((1, 1, 3, 3, 3))))
    with pytest.raises(ArgumentError):
        ad.conv3d(T(np.zeros((1, 1, 4, 4, 4))), T(np.zeros((2, 1, 1, 1, 1))), T(np.zeros(3)))


def test_conv_transpose_block(f64):
    out = ad.conv_transpose3d(T([[[[[5.0]]]]]), T(np.ones((1, 1, 2, 2, 2))), None)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2, 2), 5.0))


def test_conv_transpose_matches_scatter_oracle(rng, f64):
    x = rng.normal(size=(2, 3, 2, 3, 2))
    w = rng.normal(size=(3, 4, 2, 2, 2))
    b = rng.normal(size=4)
    out = ad.conv_transpose3d(T(x), T(w), T(b))
    assert out.shape == (2, 4, 4, 6, 4)
    np.testing.assert_allclose(out.data, conv_transpose3d_oracle(x, w, b), atol=1e-10)


def test_conv_transpose_is_adjoint_of_strided_conv(rng, f64):
    w = rng.normal(size=(3, 2, 2, 2, 2))  # conv: 2 -> 3 channels; transpose: 3 -> 2
    x = rng.normal(size=(1, 2, 4, 6, 4))
    y = rng.normal(size=(1, 3, 2, 3, 2))
    lhs = np.vdot(ad.conv3d(T(x), T(w), None, 2, 0).data, y)
    rhs = np.vdot(x, ad.conv_transpose3d(T(y), T(w), None).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_errors(f64):
    with pytest.raises(ArgumentError):
        ad.conv_transpose3d(T(np.zeros((1, 2, 2, 2, 2))), T(np.zeros((3, 1, 2, 2, 2))))
    with pytest.raises(ArgumentError):
        ad.conv_transpose3d(T(np.zeros((1, 1, 2, 2, 2))), T(np.zeros((1, 1, 3, 3, 3))))


def test_relu_softmax_add_examples(f64):
    assert ad.relu(T([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    s = ad.softmax_channel(T(np.zeros((1, 2, 1, 1, 1))))
    np.testing.assert_allclose(s.data.ravel(), [0.5, 0.5])
    with pytest.raises(ArgumentError):
        ad.add(T(np.zeros(3)), T(np.zeros(4)))
    with pytest.raises(ArgumentError):
        T(np.zeros(3)) * T(np.zeros(3))


@given(st.integers(0, 2 ** 31 - 1))
def test_softmax_sums_to_one(seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(2, 3, 2, 2, 2))
    with ad.precision("float32"):
        s = ad.softmax_channel(T(x)).data
    assert np.max(np.abs(s.sum(axis=1) - 1)) <= 1e-6


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_raises():
    with pytest.raises(StateError):
        ad.scale(T([1e30]), 1e30)


def test_add_and_scale_backward_exact(rng, f64):
    x, y = T(rng.normal(size=5)), T(rng.normal(size=5))
    c = rng.normal(size=5)
    ad.inner(ad.add(ad.scale(x, -2.5), y), c).backward()
    np.testing.assert_array_equal(x.grad, -2.5 * c)
    np.testing.assert_array_equal(y.grad, c)


def test_shared_node_gradients_accumulate(f64):
    x = T([3.0])
    ad.inner(x + x + x, [1.0]).backward()
    assert x.grad.tolist() == [3.0]


def test_backward_needs_scalar(f64):
    with pytest.raises(ArgumentError):
        T(np.zeros(3)).backward()


def test_no_grad_records_no_graph(f64):
    x = T(np.ones(3))
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_precision_switch():
    with ad.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ArgumentError):
        ad.set_precision("float16")


# -- gradient checks (64-bit) -----------------------------------------------------

def probe(out_fn, rng):
    """Turn a tensor-valued op into a scalar through a fixed random projection."""
    c = {}

    def f():
        out = out_fn()
        if "c" not in c:
            c["c"] = rng.normal(size=out.shape)
        return ad.inner(out, c["c"])
    return f


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (1, 0)])
def test_gradcheck_conv3d(rng, f64, stride, padding):
    x, w, b = T(rng.normal(size=(1, 2, 4, 4, 4))), T(rng.normal(size=(2, 2, 3, 3, 3))), T(rng.normal(size=2))
    f = probe(lambda: ad.conv3d(x, w, b, stride, padding), rng)
    assert ad.grad_check(f, [x, w, b], n_coords=64) <= 1e-4


def test_gradcheck_pointwise_conv(rng, f64):
    x, w, b = T(rng.normal(size=(2, 3, 2, 3, 2))), T(rng.normal(size=(2, 3, 1, 1, 1))), T(rng.normal(size=2))
    assert ad.grad_check(probe(lambda: ad.conv3d(x, w, b), rng), [x, w, b]) <= 1e-4


def test_gradcheck_conv_transpose(rng, f64):
    x, w, b = T(rng.normal(size=(1, 2, 2, 3, 2))), T(rng.normal(size=(2, 3, 2, 2, 2))), T(rng.normal(size=3))
    assert ad.grad_check(probe(lambda: ad.conv_transpose3d(x, w, b), rng), [x, w, b], n_coords=64) <= 1e-4


def test_gradcheck_relu_away_from_kink(rng, f64):
    v = rng.uniform(0.1, 1.0, size=40) * rng.choice([-1, 1], size=40)
    x = T(v)
    assert ad.grad_check(probe(lambda: ad.relu(x), rng), [x]) <= 1e-6


def test_gradcheck_softmax(rng, f64):
    x = T(rng.normal(size=(2, 3, 2, 2, 2)))
    assert ad.grad_check(probe(lambda: ad.softmax_channel(x), rng), [x]) <= 1e-4


def test_gradcheck_linear_function_exact(rng, f64):
    x, y = T(rng.normal(size=(3, 4))), T(rng.normal(size=(3, 4)))
    f = probe(lambda: ad.add(ad.scale(x, 1.7), y), rng)
    assert ad.grad_check(f, [x, y]) <= 1e-10


def test_gradcheck_routing_ops(rng, f64):
    a, b = T(rng.normal(size=(2, 2, 2, 2, 2))), T(rng.normal(size=(1, 2, 2, 2, 2)))
    f = probe(lambda: ad.take(ad.concat_batch([a, b]), 1, 3), rng)
    assert ad.grad_check(f, [a, b]) <= 1e-10


def test_gradcheck_resample_and_smooth(rng, f64):
    x = T(rng.normal(size=(1, 2, 3, 5, 4)))
    f = probe(lambda: ad.smooth(ad.resample(x, (6, 3, 7))), rng)
    assert ad.grad_check(f, [x]) <= 1e-4


def test_gradcheck_freeze_relu_near_kink(f64):
    x = T(np.array([5e-5, -3e-5, 0.7]))
    f = lambda: ad.inner(ad.relu(x), np.ones(3))  # noqa: E731
    assert ad.grad_check(f, [x]) > 0.1
    assert ad.grad_check(f, [x], freeze_relu=True) <= 1e-10
    # the tape is scoped to the call
    assert ad._relu_tape is None


def test_gradcheck_freeze_relu_detects_divergence(f64):
    x = T(np.array([1.0, -1.0]))
    calls = []

    def f():
        calls.append(1)
        y = ad.relu(x)
        return ad.inner(ad.relu(y) if len(calls) > 2 else y, np.ones(2))
    with pytest.raises(StateError):
        ad.grad_check(f, [x], freeze_relu=True)


def test_grad_check_rejects_float32_and_nonscalar(rng):
    with pytest.raises(StateError):
        ad.grad_check(lambda: ad.inner(x32, np.ones(2)), [x32 := T(np.ones(2))])
    with ad.precision("float64"):
        x = T(np.ones(3))
        with pytest.raises(ArgumentError):
            ad.grad_check(lambda: ad.scale(x, 2.0), [x])


# -- optimizer --------------------------------------------------------------------

def test_sgd_single_step():
    with ad.precision("float64"):
        p = Parameter([1.0])
        p.grad = np.array([1.0])
        ad.sgd_step([p], lr=0.01, momentum=0.9, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.99, abs=1e-15)
        assert p.momentum[0] == 1.0
        assert p.grad is None


def test_sgd_two_steps_momentum():
    with ad.precision("float64"):
        p = Parameter([0.0])
        for _ in range(2):
            before = p.data[0]
            p.grad = np.array([2.0])
            ad.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        assert before - p.data[0] == pytest.approx(0.1 * 1.9 * 2.0, abs=1e-14)


def test_sgd_matches_scalar_recurrence(rng):
    with ad.precision("float64"):
        w0 = rng.normal(size=6)
        grads = rng.normal(size=(5, 6))
        p = Parameter(w0.copy())
        for g in grads:
            p.grad = g.copy()
            ad.sgd_step([p], lr=0.01, momentum=0.9, weight_decay=1e-4)
    for i in range(6):
        w, buf = float(w0[i]), 0.0
        for g in grads[:, i]:
            gg = float(g) + 1e-4 * w
            buf = 0.9 * buf + gg
            w = w - 0.01 * buf
        assert abs(w - p.data[i]) <= 1e-12


def test_sgd_missing_grad():
    with pytest.raises(StateError):
        ad.sgd_step([Parameter([1.0])])


def test_parameter_momentum_zero_init():
    p = Parameter(np.ones((2, 3)))
    assert p.requires_grad and not p.momentum.any() and p.momentum.shape == (2, 3)


# -- determinism, instrumentation, checkpoints ----------------------------------------

def _run(seed):
    r = np.random.default_rng(seed)
    x, w = T(r.normal(size=(1, 2, 4, 4, 4))), T(r.normal(size=(2, 2, 3, 3, 3)))
    out = ad.relu(ad.conv3d(x, w, None, 1, 1))
    ad.inner(out, r.normal(size=out.shape)).backward()
    return out.data, w.grad, x.grad


def test_bitwise_determinism():
    for a, b in zip(_run(7), _run(7)):
        assert a.tobytes() == b.tobytes()


def test_op_counting_with_scopes():
    with ad.count_ops() as counts:
        with ad.op_scope("enc"):
            ad.relu(T([1.0]))
        ad.scale(T([1.0]), 2.0)
    assert counts == {"enc/relu": 1, "root/scale": 1}


def test_checkpoint_roundtrip(rng):
    blobs = {"a.w": rng.normal(size=(2, 3, 1, 1, 1)).astype(np.float32), "b": rng.normal(size=4),
             "scalar": np.array(3.0)}
    blobs2, meta = ad.decode_checkpoint(ad.encode_checkpoint(blobs, {"step": 5}))
    assert meta == {"step": 5}
    assert list(blobs2) == list(blobs)
    for k in blobs:
        assert blobs2[k].dtype == blobs[k].dtype
        np.testing.assert_array_equal(blobs2[k], blobs[k])


def test_checkpoint_layout():
    buf = ad.encode_checkpoint({"w": np.array([1.5], dtype=np.float32)}, {})
    assert buf[:8] == b"SWDLCKPT"
    assert buf[8:12] == (1).to_bytes(4, "little")
    assert buf.endswith(np.float32(1.5).tobytes())


@given(st.binary(max_size=120))
def test_checkpoint_garbage_raises_parse_error(buf):
    with pytest.raises(ParseError):
        ad.decode_checkpoint(b"SWDLCKPT" + buf if len(buf) % 2 else buf)


def test_checkpoint_truncation_detected(rng):
    buf = ad.encode_checkpoint({"w": rng.normal(size=(3, 3))}, {"k": 1})
    for cut in (1, 9, len(buf) // 2):
        with pytest.raises(ParseError):
            ad.decode_checkpoint(buf[:-cut])
    with pytest.raises(ParseError):
        ad.decode_checkpoint(buf + b"\x00")
