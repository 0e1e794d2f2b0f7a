import numpy as np
import pytest

from agcrf import oracle
from agcrf import tensor as tt
from agcrf.tensor import Tape, Tensor, conv2d, deconv2d, maxpool2d


def rel_err(g_ad, g_fd):
    return np.abs(g_ad - g_fd) / np.maximum.reduce([np.ones_like(g_ad), np.abs(g_ad), np.abs(g_fd)])


def test_conv2d_box_sum():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k, stride=1, pad=1).data
    assert out[0, 1, 1] == 9.0
    assert out[0, 0, 0] == 4.0


def test_conv2d_zero_kernel_annihilates():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 5, 5)))
    k = Tensor(np.zeros((3, 2, 3, 3)))
    assert np.all(conv2d(x, k, stride=1, pad=1).data == 0.0)


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(k), stride=1, pad=1).data
    want = oracle.naive_conv2d(x, k, stride=1, pad=1)
    assert np.abs(got - want).max() < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_strided(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 7, 7))
    k = rng.normal(size=(2, 3, 3, 3))
    got = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    want = oracle.naive_conv2d(x, k, stride=stride, pad=pad)
    assert np.abs(got - want).max() < 1e-12


def test_conv2d_rejects_inexact_geometry():
    x = Tensor(np.zeros((1, 6, 6)))
    k = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        conv2d(x, k, stride=2, pad=0)


def test_deconv2d_single_tap_broadcast():
    x = Tensor(np.array([[[2.0]]]))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = deconv2d(x, k, stride=1, pad=0).data
    assert out.shape == (1, 3, 3)
    assert np.all(out == 2.0)


def test_deconv2d_stride2_disjoint_blocks():
    x = Tensor(np.ones((1, 2, 2)))
    k = Tensor(np.ones((1, 1, 2, 2)))
    out = deconv2d(x, k, stride=2, pad=0).data
    assert out.shape == (1, 4, 4)
    assert np.all(out == 1.0)


def test_deconv2d_matches_naive():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 3))
    k = rng.normal(size=(2, 3, 4, 4))
    got = deconv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    want = oracle.naive_deconv2d(x, k, stride=2, pad=1)
    assert np.abs(got - want).max() < 1e-12


def test_conv_deconv_adjoint_identity():
    rng = np.random.default_rng(4)
    for stride, pad in [(1, 1), (1, 0), (2, 1)]:
        x = rng.normal(size=(3, 9, 9))
        k = rng.normal(size=(4, 3, 3, 3))
        y_shape = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data.shape
        y = rng.normal(size=y_shape)
        lhs = float((conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data * y).sum())
        rhs = float((x * deconv2d(Tensor(y), Tensor(k), stride=stride, pad=pad).data).sum())
        assert abs(lhs - rhs) < 1e-10


def test_conv2d_linearity():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6, 6))
    z = rng.normal(size=(2, 6, 6))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    a, b = 1.7, -0.3
    lhs = conv2d(Tensor(a * x + b * z), k, pad=1).data
    rhs = a * conv2d(Tensor(x), k, pad=1).data + b * conv2d(Tensor(z), k, pad=1).data
    assert np.abs(lhs - rhs).max() < 1e-12


def test_maxpool_basic_and_ties():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out, _ = maxpool2d(x, 2, 2)
    assert out.data.reshape(-1)[0] == 4.0

    const = Tensor(np.full((1, 4, 4), 7.0))
    out, idx = maxpool2d(const, 2, 2)
    assert np.all(out.data == 7.0)
    # ties break toward the smallest linear index: the top-left of each window
    assert idx[0, 0, 0] == 0


def test_maxpool_matches_naive():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 6, 6))
    got, _ = maxpool2d(Tensor(x), 2, 2)
    want = oracle.naive_maxpool2d(x, 2, 2)
    assert np.abs(got.data - want).max() == 0.0


def test_backward_sum_gives_ones():
    x = tt.parameter(np.arange(12.0).reshape(1, 3, 4))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    assert np.all(x.grad == 1.0)


def test_backward_half_square_gives_input():
    rng = np.random.default_rng(7)
    x = tt.parameter(rng.normal(size=(2, 3, 3)))
    with Tape() as tape:
        loss = tt.scale((x * x).sum(), 0.5)
    tape.backward(loss)
    assert np.abs(x.grad - x.data).max() < 1e-12


def _check_op_gradient(build, shapes, seed):
    """Finite-difference contract: rel err < 1e-4 at step 1e-5."""
    rng = np.random.default_rng(seed)
    params = [tt.parameter(rng.normal(size=s)) for s in shapes]
    with Tape() as tape:
        loss = build(params)
    tape.backward(loss)
    flat0 = np.concatenate([p.data.ravel() for p in params])

    def loss_at(v):
        pos = 0
        vals = []
        for p in params:
            n = p.data.size
            vals.append(v[pos : pos + n].reshape(p.data.shape))
            pos += n
        saved = [p.data for p in params]
        for p, val in zip(params, vals):
            p.data = val
        out = float(build(params).data)
        for p, s in zip(params, saved):
            p.data = s
        return out

    g_fd = oracle.fd_gradient(loss_at, flat0)
    g_ad = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
    assert rel_err(g_ad, g_fd).max() < 1e-4


def test_gradient_conv2d():
    _check_op_gradient(
        lambda p: (conv2d(p[0], p[1], stride=1, pad=1) * conv2d(p[0], p[1], stride=1, pad=1)).sum(),
        [(2, 4, 4), (3, 2, 3, 3)],
        seed=10,
    )


def test_gradient_deconv2d():
    _check_op_gradient(
        lambda p: (deconv2d(p[0], p[1], stride=2, pad=1) * deconv2d(p[0], p[1], stride=2, pad=1)).sum(),
        [(2, 3, 3), (2, 3, 3, 3)],
        seed=11,
    )


def test_gradient_maxpool():
    def build(p):
        out, _ = maxpool2d(p[0], 2, 2)
        return (out * out).sum()

    _check_op_gradient(build, [(2, 4, 4)], seed=12)


def test_gradient_elementwise_chain():
    def build(p):
        y = tt.sigmoid(p[0] * p[1] + p[0])
        z = tt.relu(p[1] - p[0])
        return (y * z).sum() + tt.scale(p[0].mean(), 0.25)

    _check_op_gradient(build, [(3, 4, 4), (3, 4, 4)], seed=13)


def test_gradient_concat_and_reshape():
    def build(p):
        c = tt.concat_channels([p[0], p[1]])
        return (c * c).mean() + tt.spatial_mean(p[0]).sum()

    _check_op_gradient(build, [(2, 3, 3), (1, 3, 3)], seed=14)


def test_gradient_broadcast_mul():
    def build(p):
        return (p[0] * p[1]).sum()  # (1,H,W) gate against (C,H,W) features

    _check_op_gradient(build, [(1, 4, 4), (3, 4, 4)], seed=15)


def test_gradient_two_layer_conv_net():
    rng = np.random.default_rng(16)
    img = Tensor(rng.normal(size=(1, 8, 8)))
    target = (rng.uniform(size=(1, 8, 8)) < 0.2).astype(float)

    def build(p):
        h = tt.relu(conv2d(img, p[0], stride=1, pad=1))
        logits = conv2d(h, p[1], stride=1, pad=1)
        prob = tt.sigmoid(logits)
        # balanced BCE written inline from clamped probabilities
        pos = target.sum()
        beta = pos / target.size
        pc = tt.add_scalar(tt.scale(prob, 1 - 2e-12), 1e-12)
        loss_pos = (Tensor(target) * log_op(pc)).sum()
        loss_neg = (Tensor(1 - target) * log_op(tt.add_scalar(-pc, 1.0))).sum()
        return tt.scale(loss_pos, -beta) + tt.scale(loss_neg, -(1 - beta))

    def log_op(t):
        out = np.log(t.data)

        def bwd(g):
            tt._accum(t, g / t.data)

        return tt._node(out, bwd)

    _check_op_gradient(build, [(4, 1, 3, 3), (1, 4, 3, 3)], seed=17)


def test_unused_nodes_have_no_gradient():
    x = tt.parameter(np.ones((2, 2)))
    y = tt.parameter(np.ones((2, 2)))
    with Tape() as tape:
        used = (x * x).sum()
        _unused = (y * y).sum()
    tape.backward(used)
    assert y.grad is None  # equivalent to an all-zero buffer
    assert np.all(x.grad == 2.0)


def test_tape_reverse_topological_order():
    x = tt.parameter(np.ones((2, 2)))
    with Tape() as tape:
        a = x * x
        b = a + x
        loss = b.sum()
    assert tape.nodes.index(a) < tape.nodes.index(b) < tape.nodes.index(loss)


def test_batched_conv_matches_per_image():
    rng = np.random.default_rng(18)
    xs = rng.normal(size=(3, 2, 5, 5))
    k = Tensor(rng.normal(size=(4, 2, 3, 3)))
    batched = conv2d(Tensor(xs), k, stride=1, pad=1).data
    for i in range(3):
        single = conv2d(Tensor(xs[i]), k, stride=1, pad=1).data
        assert np.array_equal(batched[i], single)


def test_determinism_bit_identical():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(k), stride=1, pad=1).data
    b = conv2d(Tensor(x.copy()), Tensor(k.copy()), stride=1, pad=1).data
    assert np.array_equal(a, b)


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(20)
    x = Tensor(rng.normal(size=(2, 6, 6)) * 1e3)
    k = Tensor(rng.normal(size=(2, 2, 3, 3)) * 1e3)
    out = conv2d(x, k, pad=1)
    assert np.isfinite(out.data).all()
    assert np.isfinite(tt.sigmoid(out).data).all()
