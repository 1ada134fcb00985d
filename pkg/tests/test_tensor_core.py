import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgfd.tensor import ConfigError, ShapeError, Tensor, kernels, load_checkpoint, save_checkpoint
from lgfd.tensor import functional as F
from lgfd.tensor import nn
from lgfd.tensor.gradcheck import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, stride, padding):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    oh = (H + 2 * padding - k) // stride + 1
    ow = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for bi in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(C):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[bi, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[bi, o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        y = F.conv2d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_weights(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = Tensor(np.zeros((4, 3, 3, 3)), requires_grad=True)
        y = F.conv2d(x, w, Tensor(np.zeros(4)), 1, 1)
        assert not y.data.any()
        y.sum().backward()
        assert not x.grad.any()

    @pytest.mark.parametrize("backend", kernels.available_backends())
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_loops(self, rng, backend, stride, padding):
        kernels.use_backend(backend)
        try:
            x = rng.standard_normal((1, 2, 5, 5))
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
            np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, stride, padding), atol=1e-12, rtol=0)
        finally:
            kernels.use_backend(kernels.available_backends()[-1])

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
    def test_gradients(self, rng, stride, padding, k):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, k, k)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        probe = rng.standard_normal(F.conv2d(x, w, b, stride, padding).shape)
        recs = check_gradients(lambda: (F.conv2d(x, w, b, stride, padding) * probe).sum(), [x, w, b], count=30, rng=rng)
        assert max(r["rel_err"] for r in recs) < 1e-6

    def test_backends_agree_bitwise(self, rng):
        if "compiled" not in kernels.available_backends():
            pytest.skip("compiled kernels not built")
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        results = []
        for backend in ("python", "compiled"):
            kernels.use_backend(backend)
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            y = F.conv2d(xt, wt, None, 2, 1)
            (y * y).sum().backward()
            results.append((y.data, xt.grad, wt.grad))
        kernels.use_backend("compiled")
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="C=3"):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    def test_rejects_5x5_kernel(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 5, 5))))


class TestBatchNorm:
    def test_standardized_input_passes_through(self, rng):
        x = rng.standard_normal((4, 2, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y = F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), F.BatchNormState(2), True)
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_constant_input_gives_beta(self):
        beta = np.array([0.3, -1.2])
        y = F.batch_norm2d(Tensor(np.full((2, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(beta), F.BatchNormState(2), True)
        np.testing.assert_allclose(y.data, np.broadcast_to(beta[None, :, None, None], y.shape), atol=1e-12)

    def test_output_statistics(self, rng):
        gamma = np.array([0.5, 2.0, 1.3])
        beta = np.array([0.1, -0.4, 3.0])
        x = rng.standard_normal((3, 3, 6, 6)) * 4 + 1.5
        y = F.batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), F.BatchNormState(3), True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-6)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), gamma, atol=1e-6 * 10)

    def test_running_state_and_eval(self, rng):
        state = F.BatchNormState(2)
        x = rng.standard_normal((4, 2, 3, 3)) + 5.0
        F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
        n = 4 * 9
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
        y = F.batch_norm2d(Tensor(x[:1]), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False)
        expect = (x[:1] - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y.data, expect, atol=1e-12)

    def test_single_element_train_errors(self):
        with pytest.raises(ConfigError):
            F.batch_norm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), F.BatchNormState(2), True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        state = F.BatchNormState(2)
        state.running_var = np.array([0.7, 1.9])
        probe = rng.standard_normal(x.shape)

        def loss():
            snapshot = (state.running_mean.copy(), state.running_var.copy())
            out = (F.batch_norm2d(x, g, b, state, training) * probe).sum()
            state.running_mean, state.running_var = snapshot
            return out

        recs = check_gradients(loss, [x, g, b], count=30, rng=rng)
        assert max(r["rel_err"] for r in recs) < 1e-6


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_nan_propagates(self):
        out = F.relu(Tensor([np.nan, -1.0])).data
        assert np.isnan(out[0]) and out[1] == 0.0

    def test_negative_input_zero_grad(self):
        x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
        y = F.relu(x)
        y.sum().backward()
        assert not y.data.any() and not x.grad.any()

    def test_gradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        F.relu(x).sum().backward()
        assert x.grad[0] == 0.0

    def test_finite_differences_away_from_kink(self, rng):
        data = rng.standard_normal(50)
        data[np.abs(data) < 0.05] += 0.1
        x = Tensor(data, requires_grad=True)
        recs = check_gradients(lambda: (F.relu(x) * np.arange(50.0)).sum(), [x], count=30, rng=rng)
        assert max(r["rel_err"] for r in recs) <= 1e-6


class TestPooling:
    def test_adaptive_identity(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), 4).data, x, atol=1e-15)

    def test_adaptive_global(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), 1).data[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-12)

    def test_adaptive_bins_5_to_2(self, rng):
        assert F.adaptive_bins(5, 2) == [(0, 3), (2, 5)]
        x = rng.standard_normal((1, 1, 5, 5))
        ranges = [(0, 3), (2, 5)]
        expect = np.array([[x[0, 0, r0:r1, c0:c1].mean() for (c0, c1) in ranges] for (r0, r1) in ranges])
        np.testing.assert_allclose(F.adaptive_avg_pool2d(Tensor(x), 2).data[0, 0], expect, atol=1e-12)

    def test_adaptive_too_large(self):
        with pytest.raises(ConfigError):
            F.adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 3, 4))), 4)

    def test_adaptive_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True)
        probe = rng.standard_normal((2, 2, 3, 3))
        recs = check_gradients(lambda: (F.adaptive_avg_pool2d(x, 3) * probe).sum(), [x], count=20, rng=rng)
        assert max(r["rel_err"] for r in recs) < 1e-6

    def test_global_pool(self, rng):
        assert np.allclose(F.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 2.5))).data, 2.5)
        px = rng.standard_normal((2, 3, 1, 1))
        np.testing.assert_array_equal(F.global_avg_pool(Tensor(px)).data, px[:, :, 0, 0])
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(F.global_avg_pool(Tensor(x)).data, x.sum(axis=(2, 3)) / 20, atol=1e-12)

    def test_upsample(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
        y = F.upsample_nearest2x(x)
        assert y.shape == (1, 2, 4, 6)
        assert y.data[0, 1, 3, 5] == x.data[0, 1, 1, 2]
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 4.0))


def attention_oracle(seq, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    B, T, L = seq.shape
    d = L // heads
    out = np.zeros_like(seq)
    for b in range(B):
        q = seq[b] @ wq + bq
        k = seq[b] @ wk + bk
        v = seq[b] @ wv + bv
        ctx = np.zeros((T, L))
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            for i in range(T):
                logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(d) for j in range(T)])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(T))
        out[b] = ctx @ wo + bo
    return out


class TestAttention:
    def _weights(self, rng, L):
        return [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in [(L, L), (L,)] * 4]

    def test_single_token(self, rng):
        ws = self._weights(rng, 4)
        seq = rng.standard_normal((2, 1, 4))
        out = F.multi_head_self_attention(Tensor(seq), *ws, heads=2)
        wq, bq, wk, bk, wv, bv, wo, bo = (w.data for w in ws)
        np.testing.assert_allclose(out.data, (seq @ wv + bv) @ wo + bo, atol=1e-12)

    def test_matches_oracle(self, rng):
        ws = self._weights(rng, 4)
        seq = rng.standard_normal((1, 3, 4))
        out = F.multi_head_self_attention(Tensor(seq), *ws, heads=2)
        np.testing.assert_allclose(out.data, attention_oracle(seq, *(w.data for w in ws), heads=2), atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 6), st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]), st.integers(0, 2**31 - 1))
    def test_rows_stochastic(self, B, T, lh, seed):
        L, heads = lh
        r = np.random.default_rng(seed)
        ws = [Tensor(r.standard_normal(s) * 2) for s in [(L, L), (L,)] * 4]
        _, weights = F.multi_head_self_attention(Tensor(r.standard_normal((B, T, L))), *ws, heads=heads, return_weights=True)
        assert (weights.data >= 0).all()
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_indivisible_heads(self, rng):
        ws = [Tensor(np.zeros(s)) for s in [(6, 6), (6,)] * 4]
        with pytest.raises(ConfigError):
            F.multi_head_self_attention(Tensor(np.zeros((1, 2, 6))), *ws, heads=4)

    def test_gradients(self, rng):
        ws = self._weights(rng, 4)
        seq = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        probe = rng.standard_normal((2, 3, 4))
        recs = check_gradients(lambda: (F.multi_head_self_attention(seq, *ws, heads=2) * probe).sum(), [seq] + ws, count=40, rng=rng)
        assert max(r["rel_err"] for r in recs) < 1e-6


class TestCosine:
    def test_parallel_orthogonal_opposite(self):
        u = Tensor([1.0, 2.0, -0.5])
        assert F.cosine(u, u).item() == pytest.approx(1.0, abs=1e-15)
        assert F.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == 0.0
        assert F.cosine(u, -u).item() == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vector_guarded(self):
        u = Tensor(np.zeros(3), requires_grad=True)
        c = F.cosine(u, Tensor([1.0, 1.0, 1.0]))
        c.backward()
        assert c.item() == 0.0 and np.isfinite(u.grad).all()

    def test_gradients(self, rng):
        u = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        v = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        recs = check_gradients(lambda: (F.cosine(u, v) * np.array([1.0, -2.0, 0.5])).sum(), [u, v], count=20, rng=rng)
        assert max(r["rel_err"] for r in recs) < 1e-6


class TestChannelSplit:
    def test_shapes(self, rng):
        a, b = F.channel_split(Tensor(rng.standard_normal((2, 8, 3, 3))), 4)
        assert a.shape == b.shape == (2, 4, 3, 3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 3), st.integers(2, 9), st.integers(1, 4), st.data())
    def test_round_trip_exact(self, B, C, H, data):
        at = data.draw(st.integers(1, C - 1))
        x = np.random.default_rng(C * 31 + H).standard_normal((B, C, H, H))
        a, b = F.channel_split(Tensor(x), at)
        np.testing.assert_array_equal(F.channel_concat(a, b).data, x)

    def test_gradient_routing(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 2, 2)), requires_grad=True)
        a, _ = F.channel_split(x, 2)
        a.sum().backward()
        assert (x.grad[:, :2] == 1).all() and (x.grad[:, 2:] == 0).all()

    @pytest.mark.parametrize("at", [0, 6, -1])
    def test_out_of_range(self, at):
        with pytest.raises(ConfigError):
            F.channel_split(Tensor(np.zeros((1, 6, 1, 1))), at)


class TestAutograd:
    def test_half_square(self, rng):
        x = Tensor(rng.standard_normal(7), requires_grad=True)
        ((x * x).sum() * 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data)

    def test_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        (x * x).sum().backward()
        first = x.grad.copy()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_non_scalar_backward(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_intermediates_receive_grad(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = x * 2.0
        z = (y * y).sum()
        z.backward()
        np.testing.assert_allclose(y.grad, 2 * y.data)

    def test_diamond_graph(self):
        x = Tensor([3.0], requires_grad=True)
        a = x * x
        (a + a * x).sum().backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(6 + 27)

    def test_determinism(self, rng):
        def run():
            r = np.random.default_rng(7)
            x = Tensor(r.standard_normal((2, 3, 6, 6)), requires_grad=True)
            w = Tensor(r.standard_normal((4, 3, 3, 3)), requires_grad=True)
            y = F.relu(F.conv2d(x, w, None, 2, 1))
            y.sum().backward()
            return y.data, x.grad, w.grad

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestOptimizer:
    def test_zero_lr_is_identity(self, rng):
        p = nn.Parameter(rng.standard_normal(5))
        before = p.data.copy()
        p.grad = rng.standard_normal(5)
        opt = nn.SGD([p], lr=0.0, momentum=0.9)
        opt.step()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_momentum_update(self):
        p = nn.Parameter([1.0])
        opt = nn.SGD([p], lr=0.1, momentum=0.5)
        p.grad = np.array([2.0])
        opt.step()
        assert p.data[0] == pytest.approx(1.0 - 0.2)
        opt.step()
        assert p.data[0] == pytest.approx(0.8 - 0.1 * (0.5 * 2 + 2))
        opt.zero_grad()
        assert p.grad is None


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        arrays = {"a.weight": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(4), "s": np.array(1.5)}
        save_checkpoint(tmp_path / "c.bin", arrays, meta={"L": 8})
        loaded, meta = load_checkpoint(tmp_path / "c.bin")
        assert meta == {"L": 8}
        for k, v in arrays.items():
            assert loaded[k].shape == v.shape
            assert loaded[k].tobytes() == np.ascontiguousarray(v).tobytes()

    def test_manifest_offsets(self, tmp_path):
        save_checkpoint(tmp_path / "c.bin", {"x": np.zeros((2, 2)), "y": np.ones(3)})
        header = (tmp_path / "c.bin").read_bytes().split(b"\nend\n")[0].decode().splitlines()
        assert header[1:] == ["x 2,2 0", "y 3 32"]

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"hello")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad.bin")
