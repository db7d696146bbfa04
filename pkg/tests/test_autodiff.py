"""Tensor engine tests: forward oracles, gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeview import autodiff as ad


def _matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def _convt3d_oracle(x, w, stride, padding):
    cin, d, _, _ = x.shape
    cout, k = w.shape[1], w.shape[2]
    dout = (d - 1) * stride - 2 * padding + k
    out = np.zeros((cout, dout, dout, dout))
    for ci in range(cin):
        for z in range(d):
            for y in range(d):
                for xx in range(d):
                    val = x[ci, z, y, xx]
                    for kz in range(k):
                        oz = z * stride + kz - padding
                        if not 0 <= oz < dout:
                            continue
                        for ky in range(k):
                            oy = y * stride + ky - padding
                            if not 0 <= oy < dout:
                                continue
                            for kx in range(k):
                                ox = xx * stride + kx - padding
                                if not 0 <= ox < dout:
                                    continue
                                out[:, oz, oy, ox] += val * w[ci, :, kz, ky, kx]
    return out


class TestMatmul:
    def test_identity_left_right_exact(self):
        rng = np.random.default_rng(0)
        m = ad.Tensor(rng.uniform(-1, 1, (5, 5)))
        eye = ad.Tensor(np.eye(5))
        assert np.array_equal(ad.matmul(eye, m).data, m.data)
        assert np.array_equal(ad.matmul(m, eye).data, m.data)

    def test_scalar_case(self):
        out = ad.matmul(ad.Tensor([[2.0]]), ad.Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, (3, 3))
        b = rng.uniform(-1, 1, (3, 3))
        got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        assert np.max(np.abs(got - _matmul_oracle(a, b))) < 1e-12

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        a = ad.Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        b = ad.Tensor(rng.uniform(-1, 1, (3, 5)))
        r = ad.Tensor(rng.uniform(-1, 1, (4, 5)))
        err = ad.gradcheck(lambda t: ad.tsum(ad.mul(ad.matmul(t, b), r)), a)
        assert err < 1e-8


class TestConvTranspose3d:
    def test_zero_input_zero_output(self):
        x = ad.Tensor(np.zeros((2, 2, 2, 2)))
        w = ad.Tensor(np.random.default_rng(3).normal(size=(2, 3, 4, 4, 4)))
        out = ad.conv_transpose3d(x, w, stride=2, padding=1)
        assert out.shape == (3, 4, 4, 4)
        assert np.all(out.data == 0)

    def test_single_voxel_scatters_cropped_kernel(self):
        v = 1.7
        x = ad.Tensor(np.full((1, 1, 1, 1), v))
        w = ad.Tensor(np.random.default_rng(4).normal(size=(1, 1, 4, 4, 4)))
        out = ad.conv_transpose3d(x, w, stride=2, padding=1)
        # output index = kernel index - padding, so only taps 1..2 land in bounds
        expect = v * w.data[0, 0, 1:3, 1:3, 1:3]
        assert np.max(np.abs(out.data[0] - expect)) < 1e-12

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 2, 2))
        w = rng.normal(size=(1, 2, 4, 4, 4))
        got = ad.conv_transpose3d(ad.Tensor(x), ad.Tensor(w), 2, 1).data
        assert np.max(np.abs(got - _convt3d_oracle(x, w, 2, 1))) < 1e-12

    def test_channel_mismatch_raises(self):
        with pytest.raises(ad.DimensionError, match="channels"):
            ad.conv_transpose3d(ad.Tensor(np.zeros((2, 2, 2, 2))),
                                ad.Tensor(np.zeros((3, 1, 4, 4, 4))))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = ad.Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)), requires_grad=True)
        w = ad.Tensor(rng.uniform(-1, 1, (2, 2, 4, 4, 4)), requires_grad=True)
        r = ad.Tensor(rng.uniform(-1, 1, (2, 4, 4, 4)))

        def fx(t):
            return ad.tsum(ad.mul(ad.conv_transpose3d(t, w, 2, 1), r))

        def fw(t):
            return ad.tsum(ad.mul(ad.conv_transpose3d(x, t, 2, 1), r))

        assert ad.gradcheck(fx, x) < 1e-7
        assert ad.gradcheck(fw, w, max_coords=40) < 1e-7


class TestAdam:
    def test_zero_grad_leaves_params_increments_t(self):
        p = ad.Tensor(np.array([1.0, -2.0]), name="p")
        st_ = ad.AdamState([p])
        before = p.data.copy()
        ad.adam_step([p], [np.zeros(2)], st_, lr=0.1)
        assert np.array_equal(p.data, before)
        assert st_.t == 1

    def test_first_step_magnitude(self):
        g = 0.37
        lr = 1e-2
        p = ad.Tensor(np.array([5.0]), name="p")
        st_ = ad.AdamState([p], eps=1e-8)
        ad.adam_step([p], [np.array([g])], st_, lr=lr)
        update = p.data[0] - 5.0
        assert abs(update + lr) / lr < st_.eps / abs(g) + 1e-12

    def test_two_steps_match_hand_recurrence(self):
        g = -0.8
        lr = 3e-3
        b1, b2, eps = 0.9, 0.99, 1e-8
        p = ad.Tensor(np.array([0.25]), name="p")
        st_ = ad.AdamState([p], beta1=b1, beta2=b2, eps=eps)
        ad.adam_step([p], [np.array([g])], st_, lr=lr)
        ad.adam_step([p], [np.array([g])], st_, lr=lr)

        # hand evaluation of the bias-corrected recurrence
        x, m, v = 0.25, 0.0, 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - x) < 1e-12

    def test_nonfinite_gradient_names_block(self):
        p = ad.Tensor(np.array([1.0]), name="radiance.l0.W")
        st_ = ad.AdamState([p])
        with pytest.raises(ad.TrainingError, match="radiance.l0.W"):
            ad.adam_step([p], [np.array([np.nan])], st_, lr=0.1)


class TestGradcheck:
    def test_quadratic(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        err = ad.gradcheck(lambda t: ad.tsum(ad.mul(t, t)), x)
        assert err < 1e-8

    def test_sum_of_sin(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.uniform(-1, 1, (11,)), requires_grad=True)
        err = ad.gradcheck(lambda t: ad.tsum(ad.sin(t)), x)
        assert err < 1e-6

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(8)
        w1 = ad.Tensor(rng.normal(size=(6, 16)) * 0.5)
        b1 = ad.Tensor(rng.normal(size=(16,)) * 0.1)
        w2 = ad.Tensor(rng.normal(size=(16, 1)) * 0.5)
        x = ad.Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)

        def f(t):
            h = ad.linear(t, w1, b1, "relu")
            return ad.tsum(ad.linear(h, w2, None, "none"))

        assert ad.gradcheck(f, x) < 1e-4

    def test_step_size_validated(self):
        x = ad.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            ad.gradcheck(lambda t: ad.tsum(t), x, h=1e-2)


# Backward-vs-finite-difference checks for every remaining registered op.
def _fd_check(make_graph, x, tol=1e-4, max_coords=None):
    err = ad.gradcheck(make_graph, x, max_coords=max_coords)
    assert err < tol, f"gradient error {err}"


def _op_case(name, rng):
    """Build a deterministic scalar graph for one op; constants are baked once."""
    c = ad.Tensor(rng.normal(size=(4, 5)))
    cpos = ad.Tensor(2.0 + rng.random((4, 5)))
    bias = ad.Tensor(rng.normal(size=(5,)))
    cases = {
        "add": lambda x: ad.tsum(ad.add(x, c)),
        "sub": lambda x: ad.tsum(ad.sub(c, x)),
        "mul": lambda x: ad.tsum(ad.mul(x, c)),
        "div": lambda x: ad.tsum(ad.div(x, cpos)),
        "neg": lambda x: ad.tsum(ad.neg(x)),
        "relu": lambda x: ad.tsum(ad.relu(x)),
        "sigmoid": lambda x: ad.tsum(ad.sigmoid(x)),
        "softplus": lambda x: ad.tsum(ad.softplus(x)),
        "exp": lambda x: ad.tsum(ad.exp(x)),
        "cos": lambda x: ad.tsum(ad.cos(x)),
        "sqrt": lambda x: ad.tsum(ad.sqrt(ad.add_scalar(ad.mul(x, x), 0.5))),
        "abs": lambda x: ad.tsum(ad.absval(ad.add_scalar(x, 3.0))),
        "clamp": lambda x: ad.tsum(ad.clamp(x, -0.5, 0.5)),
        "mean": lambda x: ad.tmean(ad.mul(x, x)),
        "sum0": lambda x: ad.tsum(ad.mul(ad.sum0(x), ad.sum0(x))),
        "sum_last": lambda x: ad.tsum(ad.sin(ad.sum_last(x))),
        "reshape": lambda x: ad.tsum(ad.mul(ad.reshape(x, (x.size,)), ad.reshape(x, (x.size,)))),
        "transpose2d": lambda x: ad.tsum(ad.sin(ad.transpose2d(x))),
        "slice_concat": lambda x: ad.tsum(ad.sin(ad.concat_cols(
            [ad.slice_cols(x, 2, x.shape[1]), ad.slice_cols(x, 0, 2)]))),
        "add_bias": lambda x: ad.tsum(ad.sin(ad.add_bias(x, bias))),
    }
    return cases[name]


OP_NAMES = ["add", "sub", "mul", "div", "neg", "relu", "sigmoid", "softplus", "exp",
            "cos", "sqrt", "abs", "clamp", "mean", "sum0", "sum_last", "reshape",
            "transpose2d", "slice_concat", "add_bias"]


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x = ad.Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    _fd_check(_op_case(name, rng), x)


def test_repeat_row_gradient():
    x = ad.Tensor(np.random.default_rng(0).uniform(-1, 1, (6,)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.repeat_row(t, 5))), x)


def test_stack_index_gather_scatter_gradients():
    rng = np.random.default_rng(10)
    x = ad.Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)

    def f_stack(t):
        s = ad.stack0([t, ad.mul(t, t)])
        return ad.tsum(ad.sin(s))

    def f_index(t):
        return ad.tsum(ad.sin(ad.index0(t, 1)))

    def f_gather(t):
        return ad.tsum(ad.sin(ad.gather0(t, np.array([0, 2, 2]))))

    def f_scatter(t):
        return ad.tsum(ad.sin(ad.scatter0(5, np.array([0, 2, 4]), t)))

    for f in (f_stack, f_index, f_gather, f_scatter):
        _fd_check(f, x)


def test_bmm_scale_leading_weighted_sums():
    rng = np.random.default_rng(11)
    a = ad.Tensor(rng.uniform(-1, 1, (3, 3, 3)), requires_grad=True)
    b = ad.Tensor(rng.uniform(-1, 1, (3, 3, 3)))
    _fd_check(lambda t: ad.tsum(ad.sin(ad.bmm(t, b))), a)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.bmm(b, t))), a)

    s = ad.Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)
    xs = ad.Tensor(rng.uniform(-1, 1, (3, 4)))
    _fd_check(lambda t: ad.tsum(ad.sin(ad.scale_leading(xs, t))), s)

    w = ad.Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
    p = ad.Tensor(rng.uniform(-1, 1, (3, 5, 3)))
    _fd_check(lambda t: ad.tsum(ad.sin(ad.weighted_sum0(t, p))), w)
    p2 = ad.Tensor(rng.uniform(-1, 1, (3, 5, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.weighted_sum0(w, t))), p2)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.weighted_sum1(w, t))), p2)


def test_rotation_helper_gradients():
    rng = np.random.default_rng(12)
    v = ad.Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.skew3(t))), v)

    m = ad.Tensor(rng.uniform(-1, 1, (4, 3, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.unskew3(t))), m)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.trace3(t))), m)

    c = ad.Tensor(rng.uniform(-0.9, 0.99, (6,)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.rot_log_factor(t)), c)
    c_near_one = ad.Tensor(np.array([0.999999999, 1.0 - 1e-12, 0.99995]), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.rot_log_factor(t)), c_near_one)


def test_posenc_gradient_and_layout():
    rng = np.random.default_rng(13)
    p = ad.Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.posenc(t, 4, 2.3))), p)
    out = ad.posenc(ad.Tensor(np.zeros((2, 3))), 3, 3.0)
    assert out.shape == (2, ad.posenc_dim(3))


def test_softmax0_gradient_and_normalization():
    rng = np.random.default_rng(14)
    x = ad.Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    y = ad.softmax0(x)
    assert np.allclose(y.data.sum(axis=0), 1.0, atol=1e-12)
    c = ad.Tensor(rng.normal(size=(4, 3, 3)))
    _fd_check(lambda t: ad.tsum(ad.mul(ad.softmax0(t), c)), x)


def test_sample_bone_channels_values_and_gradients():
    rng = np.random.default_rng(15)
    vol = ad.Tensor(rng.uniform(0, 1, (3, 4, 4, 4)), requires_grad=True)
    box_min, box_max = np.array([0.0, 0.0, 0.0]), np.array([3.0, 3.0, 3.0])

    # exact grid points return stored values
    pts = np.array([[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]] * 2)
    out = ad.sample_bone_channels(vol, ad.Tensor(pts), box_min, box_max)
    assert abs(out.data[0, 0] - vol.data[0, 0, 0, 0]) < 1e-12
    assert abs(out.data[1, 1] - vol.data[1, 1, 2, 3]) < 1e-12

    # midpoint interpolates linearly
    mid = ad.sample_bone_channels(vol, ad.Tensor(np.array([[[0.5, 0.0, 0.0]]])), box_min, box_max)
    assert abs(mid.data[0, 0] - 0.5 * (vol.data[0, 0, 0, 0] + vol.data[0, 1, 0, 0])) < 1e-12

    # far outside is exactly zero
    far = ad.sample_bone_channels(vol, ad.Tensor(np.array([[[9.0, 9.0, 9.0]]])), box_min, box_max)
    assert far.data[0, 0] == 0.0

    pq = ad.Tensor(rng.uniform(0.2, 2.8, (3, 6, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.sample_bone_channels(vol, t, box_min, box_max))), pq)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.sample_bone_channels(t, pq, box_min, box_max))), vol,
              max_coords=40)


def test_transmittance_scan_and_gradient():
    rng = np.random.default_rng(16)
    x = ad.Tensor(rng.uniform(0.1, 1.0, (3, 6)), requires_grad=True)
    t_vals = ad.transmittance(x)
    assert np.all(t_vals.data[:, 0] == 1.0)
    for i in range(6):
        assert np.allclose(t_vals.data[:, i + 1], t_vals.data[:, i] * x.data[:, i])
    _fd_check(lambda t: ad.tsum(ad.sin(ad.transmittance(t))), x)

    # exact zeros along the scan stay differentiable (division-free backward)
    xz = ad.Tensor(np.array([[0.5, 0.0, 0.7, 0.2]]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tsum(ad.transmittance(xz))
        tape.backward(y)
    assert np.all(np.isfinite(xz.grad))


def test_diff_axis_and_avgpool_gradients():
    rng = np.random.default_rng(17)
    x = ad.Tensor(rng.uniform(-1, 1, (2, 4, 4, 3)), requires_grad=True)
    _fd_check(lambda t: ad.tsum(ad.absval(ad.diff_axis(t, 1))), x, tol=1e-3)
    _fd_check(lambda t: ad.tsum(ad.sin(ad.avgpool2(t))), x)


def test_where_mask_gradient():
    rng = np.random.default_rng(18)
    x = ad.Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
    mask = rng.random((4, 4)) > 0.5
    _fd_check(lambda t: ad.tsum(ad.where_mask(mask, ad.sin(t), ad.mul(t, t))), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_replay_determinism(seed):
    """Same seed and inputs give bitwise-identical forward values."""
    def run():
        rng = np.random.default_rng(seed)
        x = ad.Tensor(rng.uniform(-1, 1, (3, 4)))
        w = ad.Tensor(rng.normal(size=(4, 4)))
        return ad.linear(ad.sin(x), w, None, "relu").data

    assert np.array_equal(run(), run())


def test_tape_cleared_after_backward():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tsum(ad.mul(x, x))
        assert len(tape) > 0
        tape.backward(y)
        assert len(tape) == 0
    assert np.allclose(x.grad, 2.0)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ad.DimensionError):
            tape.backward(y)
