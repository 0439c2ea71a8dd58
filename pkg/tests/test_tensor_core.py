import io
import math

import numpy as np
import pytest

from patchforge.errors import DomainError, FormatError, ShapeError
from patchforge import tensor_core as tc

from gradcheck import assert_grad_matches, numeric_grad, rel_err
from oracles import naive_conv2d


def _params(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    if b is None:
        b = np.zeros(w.shape[-1], dtype=np.float64)
    return tc.LayerParams.from_arrays(w, np.asarray(b, dtype=np.float64))


def _rand_params(rng, kh, kw, cin, cout):
    return _params(rng.uniform(-1, 1, (kh, kw, cin, cout)),
                   rng.uniform(-1, 1, cout))


# ---------------------------------------------------------------------------
# Tensor file format
# ---------------------------------------------------------------------------

class TestTensorIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.uniform(-1, 1, (5, 7, 3)).astype(np.float32)
        path = tmp_path / "a.tnsr"
        tc.save_tensor(path, arr)
        back = tc.load_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(arr, back)

    def test_bad_magic(self):
        buf = io.BytesIO(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            tc.read_tensor(buf)

    def test_truncation_names_offset(self):
        buf = io.BytesIO()
        tc.write_tensor(buf, np.ones((4, 4), dtype=np.float32))
        data = buf.getvalue()[:-8]
        with pytest.raises(FormatError, match="offset"):
            tc.read_tensor(io.BytesIO(data))

    def test_bad_version(self):
        buf = io.BytesIO()
        tc.write_tensor(buf, np.ones(3, dtype=np.float32))
        raw = bytearray(buf.getvalue())
        raw[4] = 99
        with pytest.raises(FormatError, match="version"):
            tc.read_tensor(io.BytesIO(bytes(raw)))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

class TestConvForward:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(1)
        p = _rand_params(rng, 3, 3, 1, 2)
        p.bias[:] = 0
        out = tc.conv2d_forward(np.zeros((3, 3, 1)), p, pad=1)
        assert np.all(out == 0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (6, 5, 1))
        p = _params(np.ones((1, 1, 1, 1)))
        out = tc.conv2d_forward(x, p, pad=0, stride=1)
        assert np.array_equal(out, x)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (1, 5, 5, 2))
        p = _rand_params(rng, 3, 3, 2, 4)
        got = tc.conv2d_forward(x, p, pad=0, stride=1)
        want = naive_conv2d(x, p.weights, p.bias, pad=0, stride=1)
        assert np.max(np.abs(got - want)) < 1e-10

    @pytest.mark.parametrize("seed", range(12))
    def test_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        kh = int(rng.integers(1, 5))
        kw = int(rng.integers(1, 5))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 5))
        pad = int(rng.integers(0, 3))
        stride = int(rng.integers(1, 3))
        h = int(rng.integers(kh, kh + 6))
        w = int(rng.integers(kw, kw + 6))
        n = int(rng.integers(1, 3))
        x = rng.uniform(-1, 1, (n, h, w, cin))
        p = _rand_params(rng, kh, kw, cin, cout)
        got = tc.conv2d_forward(x, p, pad=pad, stride=stride)
        want = naive_conv2d(x, p.weights, p.bias, pad=pad, stride=stride)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_channel_mismatch_raises(self):
        p = _params(np.ones((3, 3, 2, 1)))
        with pytest.raises(ShapeError, match="channels"):
            tc.conv2d_forward(np.zeros((5, 5, 3)), p)

    def test_kernel_too_large_raises(self):
        p = _params(np.ones((7, 7, 1, 1)))
        with pytest.raises(ShapeError):
            tc.conv2d_forward(np.zeros((5, 5, 1)), p)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (2, 8, 8, 3)).astype(np.float32)
        p = _rand_params(rng, 3, 3, 3, 4)
        a = tc.conv2d_forward(x, p, pad=1)
        b = tc.conv2d_forward(x.copy(), p, pad=1)
        assert np.array_equal(a, b)


class TestConvBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (6, 6, 2))
        p = _rand_params(rng, 3, 3, 2, 4)
        up = np.zeros((4, 4, 4))
        dx, dw, db = tc.conv2d_backward(x, p, up)
        assert not dx.any() and not dw.any() and not db.any()

    def test_grad_bias_is_channel_sum(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (6, 6, 2))
        p = _rand_params(rng, 3, 3, 2, 3)
        up = rng.uniform(-1, 1, (4, 4, 3))
        _, _, db = tc.conv2d_backward(x, p, up)
        assert np.allclose(db, up.sum(axis=(0, 1)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-1, 1, (1, 6, 6, 2))
        p = _rand_params(rng, 3, 3, 2, 2)
        up = rng.uniform(-1, 1, (1, 6, 6, 2))
        pad, stride = 1, 1
        dx, dw, db = tc.conv2d_backward(x, p, up, pad, stride)

        assert_grad_matches(
            lambda v: float(np.sum(up * tc.conv2d_forward(v, p, pad, stride))),
            x, dx)
        assert_grad_matches(
            lambda v: float(np.sum(up * tc.conv2d_forward(
                x, tc.LayerParams.from_arrays(v, p.bias), pad, stride))),
            p.weights, dw)
        assert_grad_matches(
            lambda v: float(np.sum(up * tc.conv2d_forward(
                x, tc.LayerParams.from_arrays(p.weights, v), pad, stride))),
            p.bias, db)

    def test_upstream_shape_mismatch(self):
        p = _params(np.ones((3, 3, 1, 1)))
        with pytest.raises(ShapeError, match="upstream"):
            tc.conv2d_backward(np.zeros((5, 5, 1)), p, np.zeros((5, 5, 1)))


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

class TestRelu:
    def test_forward_values(self):
        out = tc.relu(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(out, [0.0, 0.0, 2.0])

    def test_backward_subgradient_zero_at_zero(self):
        got = tc.relu_backward(np.array([-1.0, 0.0, 2.0]),
                               np.array([5.0, 5.0, 5.0]))
        assert np.array_equal(got, [0.0, 0.0, 5.0])

    def test_finite_differences_away_from_zero(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, (4, 4))
        x[np.abs(x) < 0.1] = 0.5  # keep away from the kink
        up = rng.uniform(-1, 1, (4, 4))
        dx = tc.relu_backward(x, up)
        assert_grad_matches(lambda v: float(np.sum(up * tc.relu(v))), x, dx)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

class TestPool:
    def test_constant_input_constant_output(self):
        x = np.full((4, 4, 1), 3.5)
        for kind in ("max", "avg"):
            out, _ = tc.pool2d(x, kind, 2, 2)
            assert np.allclose(out, 3.5)

    def test_single_window_arithmetic(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        mx, _ = tc.pool2d(x, "max", 2, 2)
        av, _ = tc.pool2d(x, "avg", 2, 2)
        assert mx[0, 0, 0] == 4.0
        assert av[0, 0, 0] == 2.5

    def test_ragged_edge_zero_padded(self):
        # 3 wide with window 2 stride 2: second window sees implicit zeros
        x = np.array([[1.0, 2.0, -3.0], [4.0, 5.0, -6.0]]).reshape(2, 3, 1)
        mx, _ = tc.pool2d(x, "max", 2, 2)
        av, _ = tc.pool2d(x, "avg", 2, 2)
        assert mx.shape == (1, 2, 1)
        assert mx[0, 1, 0] == 0.0           # max(-3, -6, pad 0, pad 0)
        assert av[0, 1, 0] == -2.25         # (-3 - 6 + 0 + 0) / 4

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            tc.pool2d(np.zeros((3, 3, 1)), "max", 4, 1)

    def test_bad_kind(self):
        with pytest.raises(DomainError):
            tc.pool2d(np.zeros((4, 4, 1)), "median", 2, 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_avg_backward_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.uniform(-1, 1, (1, 6, 6, 2))
        up_shape = tc.pool2d(x, "avg", 2, 2)[0].shape
        up = rng.uniform(-1, 1, up_shape)

        def f(v):
            return float(np.sum(up * tc.pool2d(v, "avg", 2, 2)[0]))

        _, cache = tc.pool2d(x, "avg", 2, 2)
        dx = tc.pool2d_backward(cache, up)
        assert_grad_matches(f, x, dx)

    @pytest.mark.parametrize("seed", range(5))
    def test_max_backward_finite_differences(self, seed):
        rng = np.random.default_rng(300 + seed)
        # well-separated values avoid argmax ties under the probe epsilon
        x = rng.permutation(np.linspace(-1, 1, 72)).reshape(1, 6, 6, 2)
        up_shape = tc.pool2d(x, "max", 2, 2)[0].shape
        up = rng.uniform(-1, 1, up_shape)

        def f(v):
            return float(np.sum(up * tc.pool2d(v, "max", 2, 2)[0]))

        _, cache = tc.pool2d(x, "max", 2, 2)
        dx = tc.pool2d_backward(cache, up)
        assert_grad_matches(f, x, dx)

    def test_max_tie_routes_to_first_in_scan_order(self):
        x = np.full((2, 2, 1), 1.0)
        out, cache = tc.pool2d(x, "max", 2, 2)
        dx = tc.pool2d_backward(cache, np.full((1, 1, 1), 7.0))
        assert dx[0, 0, 0] == 7.0
        assert dx.sum() == 7.0


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

class TestFC:
    def test_identity_weights(self):
        x = np.array([1.0, -2.0, 3.0])
        p = _params(np.eye(3))
        assert np.array_equal(tc.fc_forward(x, p), x)

    def test_zero_input_gives_bias(self):
        p = _params(np.ones((4, 2)), [0.5, -0.5])
        out = tc.fc_forward(np.zeros(4), p)
        assert np.array_equal(out, [0.5, -0.5])

    def test_width_mismatch(self):
        p = _params(np.ones((4, 2)))
        with pytest.raises(ShapeError, match="width"):
            tc.fc_forward(np.zeros(5), p)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = rng.uniform(-1, 1, (3, 6))
        p = _params(rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, 4))
        up = rng.uniform(-1, 1, (3, 4))
        dx, dw, db = tc.fc_backward(x, p, up)
        assert_grad_matches(lambda v: float(np.sum(up * tc.fc_forward(v, p))), x, dx)
        assert_grad_matches(
            lambda v: float(np.sum(up * tc.fc_forward(
                x, tc.LayerParams.from_arrays(v, p.bias)))), p.weights, dw)
        assert_grad_matches(
            lambda v: float(np.sum(up * tc.fc_forward(
                x, tc.LayerParams.from_arrays(p.weights, v)))), p.bias, db)


# ---------------------------------------------------------------------------
# Softmax / cross-entropy
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_equal_scores_uniform(self):
        p = tc.softmax(np.array([2.0, 2.0, 2.0]))
        assert np.allclose(p, 1 / 3, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s = rng.uniform(-5, 5, 3)
            c = rng.uniform(-100, 100)
            assert np.allclose(tc.softmax(s), tc.softmax(s + c), atol=1e-6)

    def test_closed_form_two_class(self):
        p = tc.softmax(np.array([0.0, math.log(2.0)]))
        assert np.allclose(p, [1 / 3, 2 / 3], atol=1e-12)

    def test_simplex_many_seeds(self):
        rng = np.random.default_rng(9)
        # moderate score gaps keep every entry strictly inside (0, 1)
        s = rng.uniform(-8, 8, (500, 4))
        p = tc.softmax(s)
        assert np.all(p > 0) and np.all(p < 1)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        # extreme gaps still sum to 1 and stay within [0, 1]
        s = rng.uniform(-60, 60, (200, 4))
        p = tc.softmax(s)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_certain_prediction_zero_loss(self):
        assert tc.cross_entropy(np.array([1.0, 0.0, 0.0]), 0) == 0.0

    def test_uniform_loss_ln3(self):
        loss = tc.cross_entropy(np.full(3, 1 / 3), 2)
        assert abs(loss - math.log(3)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            tc.cross_entropy(np.full(3, 1 / 3), 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_fused_backward_finite_differences(self, seed):
        rng = np.random.default_rng(500 + seed)
        scores = rng.uniform(-1, 1, (4, 3))
        labels = rng.integers(0, 3, 4)

        def f(v):
            return tc.cross_entropy(tc.softmax(v), labels)

        probs = tc.softmax(scores)
        analytic = tc.softmax_cross_entropy_backward(probs, labels)
        assert_grad_matches(f, scores, analytic)
