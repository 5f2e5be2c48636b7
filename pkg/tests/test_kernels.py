import numpy as np
import pytest

from densessl import kernels


class TestConvForward:
    def test_identity_kernel(self, rng):
        x = rng.random((6, 6, 4))
        w = np.zeros((3, 3, 4, 4))
        for c in range(4):
            w[1, 1, c, c] = 1.0
        y = kernels.conv3x3_forward(x, w, np.zeros(4))
        np.testing.assert_allclose(y, x, atol=1e-15)

    def test_bias_only(self):
        x = np.zeros((4, 4, 2))
        w = np.zeros((3, 3, 2, 3))
        y = kernels.conv3x3_forward(x, w, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(y, np.broadcast_to([1.0, -2.0, 0.5], y.shape))

    def test_box_filter_interior(self):
        # all-ones kernel sums the 3x3 neighborhood; check an interior cell
        x = np.arange(25, dtype=np.float64).reshape(5, 5, 1)
        w = np.ones((3, 3, 1, 1))
        y = kernels.conv3x3_forward(x, w, np.zeros(1))
        expect = x[1:4, 1:4, 0].sum()
        assert y[2, 2, 0] == pytest.approx(expect)

    def test_zero_padding_at_border(self):
        x = np.ones((4, 4, 1))
        w = np.ones((3, 3, 1, 1))
        y = kernels.conv3x3_forward(x, w, np.zeros(1))
        assert y[0, 0, 0] == pytest.approx(4.0)  # corner sees 2x2
        assert y[0, 1, 0] == pytest.approx(6.0)  # edge sees 2x3
        assert y[2, 2, 0] == pytest.approx(9.0)

    def test_numba_matches_numpy(self, rng):
        for _ in range(10):
            h, w_ = int(rng.integers(2, 10)), int(rng.integers(2, 10))
            cin, cout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x = rng.standard_normal((h, w_, cin))
            w = rng.standard_normal((3, 3, cin, cout))
            b = rng.standard_normal(cout)
            a = kernels.conv3x3_forward(x, w, b)
            c = kernels._conv3x3_forward_np(x, w, b)
            np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)

    def test_linearity(self, rng):
        x1 = rng.standard_normal((5, 5, 3))
        x2 = rng.standard_normal((5, 5, 3))
        w = rng.standard_normal((3, 3, 3, 2))
        b = np.zeros(2)
        y = kernels.conv3x3_forward(x1 + 2 * x2, w, b)
        y_ref = (kernels.conv3x3_forward(x1, w, b)
                 + 2 * kernels.conv3x3_forward(x2, w, b))
        np.testing.assert_allclose(y, y_ref, atol=1e-12)


class TestConvBackward:
    def test_numba_matches_numpy(self, rng):
        for _ in range(10):
            h, w_ = int(rng.integers(2, 10)), int(rng.integers(2, 10))
            cin, cout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x = rng.standard_normal((h, w_, cin))
            w = rng.standard_normal((3, 3, cin, cout))
            gy = rng.standard_normal((h, w_, cout))
            out_a = kernels.conv3x3_backward(x, w, gy)
            out_b = kernels._conv3x3_backward_np(x, w, gy)
            for a, c in zip(out_a, out_b):
                np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)

    def test_matches_finite_differences(self, rng):
        h = 1e-6
        x = rng.standard_normal((4, 5, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        gy = rng.standard_normal((4, 5, 3))

        def loss(x_, w_, b_):
            return float((kernels.conv3x3_forward(x_, w_, b_) * gy).sum())

        gx, gw, gb = kernels.conv3x3_backward(x, w, gy)
        for _ in range(20):
            i, j, c = (int(rng.integers(s)) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[i, j, c] += h
            xm[i, j, c] -= h
            fd = (loss(xp, w, b) - loss(xm, w, b)) / (2 * h)
            assert gx[i, j, c] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        for _ in range(20):
            di, dj, ci, co = (int(rng.integers(s)) for s in w.shape)
            wp, wm = w.copy(), w.copy()
            wp[di, dj, ci, co] += h
            wm[di, dj, ci, co] -= h
            fd = (loss(x, wp, b) - loss(x, wm, b)) / (2 * h)
            assert gw[di, dj, ci, co] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        np.testing.assert_allclose(gb, gy.sum(axis=(0, 1)), atol=1e-12)


class TestAvgPool:
    def test_forward_hand_case(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        y = kernels.avgpool2_forward(x)
        assert y.shape == (1, 1, 1)
        assert y[0, 0, 0] == pytest.approx(2.5)

    def test_forward_preserves_mean(self, rng):
        x = rng.random((8, 6, 3))
        y = kernels.avgpool2_forward(x)
        assert y.shape == (4, 3, 3)
        assert y.mean() == pytest.approx(x.mean())

    def test_backward_matches_finite_differences(self, rng):
        h = 1e-6
        x = rng.standard_normal((4, 6, 2))
        gy = rng.standard_normal((2, 3, 2))
        gx = kernels.avgpool2_backward(gy, x.shape)

        def loss(x_):
            return float((kernels.avgpool2_forward(x_) * gy).sum())

        for _ in range(15):
            i, j, c = (int(rng.integers(s)) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[i, j, c] += h
            xm[i, j, c] -= h
            fd = (loss(xp) - loss(xm)) / (2 * h)
            assert gx[i, j, c] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_backward_spreads_quarter(self):
        gy = np.ones((1, 1, 1))
        gx = kernels.avgpool2_backward(gy, (2, 2, 1))
        np.testing.assert_allclose(gx, 0.25)


class TestFallbackFlag:
    def test_flag_reflects_env(self):
        import os
        expect = os.environ.get("DENSESSL_NO_NUMBA", "") not in ("1", "true",
                                                                 "yes")
        assert kernels.USE_NUMBA is expect

    def test_numpy_path_in_subprocess(self):
        # the fallback is selected at import time, so probe it isolated
        import subprocess
        import sys
        code = (
            "import os\n"
            "os.environ['DENSESSL_NO_NUMBA'] = '1'\n"
            "import numpy as np\n"
            "from densessl import kernels\n"
            "assert not kernels.USE_NUMBA\n"
            "assert kernels.conv3x3_forward is kernels._conv3x3_forward_np\n"
            "rng = np.random.default_rng(0)\n"
            "x = rng.random((8, 8, 3))\n"
            "w = rng.random((3, 3, 3, 4))\n"
            "b = rng.random(4)\n"
            "y = kernels.conv3x3_forward(x, w, b)\n"
            "print(float(y.sum()))\n"
        )
        out = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
