import numpy as np
import pytest

from einet import nn
from einet.errors import ShapeError
from einet.gradcheck import finite_diff_check
from einet.tensor import Tensor

from oracles import batch_norm_train, channel_max_loop, conv_loop


def T(x):
    return Tensor(np.asarray(x, dtype=np.float32))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((3, 5, 6)).astype(np.float32)
        k = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        assert np.array_equal(nn.conv2d(T(x), T(k)).data, x)

    def test_ones_kernel_sums_channels(self, rng):
        x = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out = nn.conv2d(T(x), T(np.ones((1, 4, 1, 1))))
        assert np.allclose(out.data[0], x.sum(axis=0), atol=1e-6)

    def test_random_cases_match_loop_oracle(self):
        rng = np.random.default_rng(7)
        for case in range(50):
            k = (1, 3, 7)[case % 3]
            stride = 1 + (case // 3) % 2
            pad = int(rng.integers(0, k // 2 + 1))
            ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h, w = int(rng.integers(k, k + 6)), int(rng.integers(k, k + 6))
            x = rng.standard_normal((ci, h, w))
            kern = rng.standard_normal((co, ci, k, k))
            bias = rng.standard_normal(co) if case % 2 else None
            got = nn.conv2d(T(x), T(kern), stride, pad, None if bias is None else T(bias)).data
            want = conv_loop(x, kern, stride, pad, bias)
            assert got.shape == want.shape == (co, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
            assert np.abs(got - want).max() < 1e-5 * max(1.0, np.abs(want).max())

    def test_batched_input(self, rng):
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        both = nn.conv2d(T(x), T(k), 2, 1).data
        for n in range(2):
            assert np.allclose(both[n], nn.conv2d(T(x[n]), T(k), 2, 1).data, atol=1e-6)

    @pytest.mark.parametrize("kshape", [(2, 4, 3, 3), (2, 3, 2, 2)])
    def test_shape_errors(self, kshape):
        with pytest.raises(ShapeError):
            nn.conv2d(T(np.zeros((3, 5, 5))), T(np.zeros(kshape)))

    def test_mac_count_closed_form(self):
        with nn.count_macs() as box:
            nn.conv2d(T(np.zeros((1, 8, 8))), T(np.zeros((1, 1, 3, 3))), 1, 1)
        assert 2 * box[0] == 2 * (3 * 3 * 1) * (8 * 8) == 1152

    def test_gradients(self, rng):
        params = {"x": rng.standard_normal((2, 2, 5, 5)), "k": rng.standard_normal((3, 2, 3, 3)),
                  "b": rng.standard_normal(3)}
        proj = rng.standard_normal((2, 3, 3, 3))
        rep = finite_diff_check(lambda p: (nn.conv2d(p["x"], p["k"], 2, 1, p["b"]) * proj).sum(), params,
                                max_checks=None)
        assert rep.passed, rep.errors


class TestBatchNorm:
    def test_infer_identity(self, rng):
        x = rng.standard_normal((3, 4, 4)).astype(np.float32)
        out = nn.batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), "infer")
        assert np.allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-7)

    def test_train_constant_channel_gives_shift(self):
        x = np.full((2, 3, 4, 4), 7.0)
        shift = np.array([0.5, -1.0, 2.0])
        out = nn.batch_norm(T(x), T(np.full(3, 3.0)), T(shift), np.zeros(3), np.ones(3), "train")
        assert np.allclose(out.data, shift.reshape(1, 3, 1, 1), atol=1e-6)

    def test_train_matches_two_pass_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            n, c, h, w = (int(v) for v in rng.integers(1, 5, 4))
            x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.1, 5) + rng.uniform(-3, 3)
            scale, shift = rng.standard_normal(c), rng.standard_normal(c)
            out, mu, var = nn.batch_norm(T(x), T(scale), T(shift), np.zeros(c), np.ones(c), "train",
                                         return_stats=True)
            want = batch_norm_train(x, scale, shift)
            for ch in range(c):
                assert mu[ch] == pytest.approx(x[:, ch].mean(), abs=1e-5 * max(1, abs(x[:, ch].mean())))
            assert np.abs(out.data - want).max() < 1e-5 * max(1.0, np.abs(want).max())

    def test_infer_uses_running_stats(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        out = nn.batch_norm(T(x), T([2.0, 1.0]), T([0.0, 1.0]), np.array([1.0, 4.0]), np.array([4.0, 1.0]))
        want = (x - np.array([1.0, 4.0])[:, None, None]) / np.sqrt(np.array([4.0, 1.0]) + 1e-5)[:, None, None]
        want = want * np.array([2.0, 1.0])[:, None, None] + np.array([0.0, 1.0])[:, None, None]
        assert np.allclose(out.data, want, atol=1e-5)

    def test_parameter_shape_error(self):
        with pytest.raises(ShapeError):
            nn.batch_norm(T(np.zeros((3, 2, 2))), T(np.ones(2)), T(np.zeros(3)), np.zeros(3), np.ones(3))

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_gradients(self, rng, mode):
        params = {"x": rng.standard_normal((2, 3, 3, 3)), "scale": rng.standard_normal(3) + 2,
                  "shift": rng.standard_normal(3)}
        proj = rng.standard_normal((2, 3, 3, 3))
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        rep = finite_diff_check(
            lambda p: (nn.batch_norm(p["x"], p["scale"], p["shift"], rm, rv, mode) * proj).sum(), params,
            max_checks=None)
        assert rep.passed, rep.errors


class TestPooling:
    def test_gap_constant_and_zero(self):
        assert np.all(nn.global_avg_pool(T(np.full((3, 4, 5), 2.5))).data == 2.5)
        assert np.all(nn.global_avg_pool(T(np.zeros((3, 2, 2)))).data == 0)

    def test_gap_one_to_four(self):
        x = np.arange(1.0, 5.0).reshape(1, 2, 2)
        out = nn.global_avg_pool(T(x))
        assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 2.5

    def test_channel_max_examples(self, rng):
        x = rng.standard_normal((1, 3, 4)).astype(np.float32)
        assert np.array_equal(nn.channel_max(T(x)).data, x)
        two = np.stack([np.full((2, 2), 5.0), np.full((2, 2), 3.0)])
        assert np.all(nn.channel_max(T(two)).data == 5)

    def test_channel_max_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            c, h, w = (int(v) for v in rng.integers(1, 6, 3))
            x = rng.standard_normal((c, h, w)).astype(np.float32)
            assert np.array_equal(nn.channel_max(T(x)).data, channel_max_loop(x))

    def test_channel_max_gradient_goes_to_first_tie(self):
        from einet.tensor import GradTape

        x = np.array([[[1.0]], [[3.0]], [[3.0]]])
        with GradTape() as tape:
            p = tape.watch(x, name="x")
            loss = nn.channel_max(p).sum()
        assert tape.gradient(loss)["x"].reshape(-1).tolist() == [0, 1, 0]

    def test_channel_mean(self, rng):
        x = rng.standard_normal((4, 3, 3)).astype(np.float32)
        assert np.allclose(nn.channel_mean(T(x)).data[0], x.mean(axis=0), atol=1e-6)

    def test_nearest_upsample_index_oracle(self, rng):
        x = rng.standard_normal((2, 2, 2)).astype(np.float32)
        out = nn.nearest_upsample(T(x)).data
        assert out.shape == (2, 4, 4)
        for i in range(4):
            for j in range(4):
                assert np.array_equal(out[:, i, j], x[:, i // 2, j // 2])

    def test_max_pool(self, rng):
        x = rng.standard_normal((2, 4, 6)).astype(np.float32)
        out = nn.max_pool(T(x)).data
        for i in range(2):
            for j in range(3):
                assert np.array_equal(out[:, i, j], x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2)))
        with pytest.raises(ShapeError):
            nn.max_pool(T(np.zeros((1, 3, 4))))

    def test_fully_connected(self, rng):
        x, w, b = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        assert np.allclose(nn.fully_connected(T(x), T(w), T(b)).data, x @ w.T + b, atol=1e-5)
        with pytest.raises(ShapeError):
            nn.fully_connected(T(x), T(w.T))

    def test_pooling_gradients(self, rng):
        # values spaced well apart so no probe crosses a max boundary
        x = rng.permutation(36).reshape(1, 4, 3, 3) * 0.1
        rep = finite_diff_check(
            lambda p: (nn.channel_max(p["x"]) * 1.5).sum() + (nn.global_avg_pool(p["x"]) * 2.0).sum()
            + (nn.nearest_upsample(nn.max_pool(p["x"][..., :2, :2])) * 0.5).sum(),
            {"x": x.astype(float)}, max_checks=None)
        assert rep.passed and sum(rep.skipped.values()) == 0
