import numpy as np
import pytest

import mpmath

from nevrf.errors import FormatError, OutOfBoundsError, ShapeError, TapeError
from nevrf.nn import (
    Adam,
    EncoderParams,
    MlpParams,
    bilinear_weights,
    conv2d_same,
    encode_features,
    encoder_backward,
    init_encoder,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    sample_feature,
    sample_maps_batch,
    save_checkpoint,
    scatter_map_gradient,
    softmax,
    softmax_backward,
)


class TestMlpForward:
    def test_zero_weights_gives_bias(self, rng):
        p = init_mlp([3, 4, 2], rng, dtype=np.float64)
        for w in p.weights:
            w[:] = 0.0
        p.biases[0][:] = 0.0
        p.biases[1][:] = [1.5, -2.0]
        y, _ = mlp_forward(p, np.array([0.3, -0.2, 0.9]))
        assert np.allclose(y, [1.5, -2.0])

    def test_identity_single_layer(self):
        p = MlpParams(weights=[np.eye(3)], biases=[np.zeros(3)])
        x = np.array([0.1, -0.5, 2.0])
        y, _ = mlp_forward(p, x)
        assert np.allclose(y, x)

    def test_shape_mismatch_raises(self, rng):
        p = init_mlp([3, 2], rng)
        with pytest.raises(ShapeError):
            mlp_forward(p, np.zeros(4))

    def test_batched_matches_scalar(self, rng):
        p = init_mlp([5, 8, 2], rng, dtype=np.float64)
        xs = rng.normal(size=(7, 5))
        ys, _ = mlp_forward(p, xs)
        for i in range(7):
            yi, _ = mlp_forward(p, xs[i])
            assert np.allclose(ys[i], yi)

    def test_deterministic(self, rng):
        p = init_mlp([4, 6, 3], rng)
        x = rng.normal(size=4).astype(np.float32)
        y1, _ = mlp_forward(p, x)
        y2, _ = mlp_forward(p, x)
        assert np.array_equal(y1, y2)


class TestMlpBackward:
    def test_zero_output_grad_gives_zero_grads(self, rng):
        p = init_mlp([3, 4, 2], rng, dtype=np.float64)
        y, tape = mlp_forward(p, rng.normal(size=3))
        grads, gx = mlp_backward(tape, np.zeros_like(y))
        assert np.allclose(gx, 0.0)
        for gw, gb in zip(grads.weights, grads.biases):
            assert np.allclose(gw, 0.0) and np.allclose(gb, 0.0)

    def test_linear_layer_input_grad_is_wt_g(self, rng):
        w = rng.normal(size=(4, 3))
        p = MlpParams(weights=[w], biases=[np.zeros(3)])
        x = rng.normal(size=4)
        _, tape = mlp_forward(p, x)
        g = rng.normal(size=3)
        _, gx = mlp_backward(tape, g)
        assert np.allclose(gx, w @ g, atol=1e-9)

    def test_mismatched_tape_raises(self, rng):
        p = init_mlp([3, 2], rng)
        _, tape = mlp_forward(p, np.zeros(3, dtype=np.float32))
        with pytest.raises(TapeError):
            mlp_backward(tape, np.zeros(5))

    @pytest.mark.parametrize("seed", range(8))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = init_mlp([4, 8, 8, 2], rng, dtype=np.float64)
        x = rng.normal(size=4)
        gout = rng.normal(size=2)

        def loss():
            y, _ = mlp_forward(p, x)
            return float(y @ gout)

        _, tape = mlp_forward(p, x)
        grads, gx = mlp_backward(tape, gout)
        h = 1e-4
        for arr, gvals in [
            (p.weights[0], grads.weights[0]),
            (p.weights[1], grads.weights[1]),
            (p.biases[0], grads.biases[0]),
        ]:
            flat, gflat = arr.ravel(), gvals.ravel()
            for i in np.random.default_rng(seed + 1).integers(0, flat.size, 5):
                orig = flat[i]
                flat[i] = orig + h
                up = loss()
                flat[i] = orig - h
                dn = loss()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                if abs(fd) > 1e-10:
                    assert abs(fd - gflat[i]) / max(abs(fd), 1e-10) < 1e-5
        for i in range(4):
            orig = x[i]
            x[i] = orig + h
            up = loss()
            x[i] = orig - h
            dn = loss()
            x[i] = orig
            fd = (up - dn) / (2 * h)
            if abs(fd) > 1e-10:
                assert abs(fd - gx[i]) / max(abs(fd), 1e-10) < 1e-5


class TestSoftmax:
    def test_equal_logits(self):
        assert np.allclose(softmax(np.zeros(4)), 0.25)

    def test_large_logit_stability(self):
        y = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(y).all()
        assert y[0] == pytest.approx(1.0)
        assert y[1] == pytest.approx(0.0, abs=1e-300)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=6)
        assert np.allclose(softmax(x), softmax(x + 123.456), atol=1e-12)

    def test_matches_extended_precision_oracle(self, rng):
        mpmath.mp.dps = 50
        for _ in range(200):
            x = rng.normal(scale=3.0, size=5)
            es = [mpmath.exp(float(v)) for v in x]
            tot = sum(es)
            expect = np.array([float(e / tot) for e in es])
            got = softmax(x)
            assert np.allclose(got, expect, rtol=1e-7)

    def test_sums_to_one_with_masked_entries(self):
        y = softmax(np.array([0.5, -np.inf, 1.0, -np.inf]))
        assert y[1] == 0.0 and y[3] == 0.0
        assert y.sum() == pytest.approx(1.0, abs=1e-6)

    def test_backward_matches_fd(self, rng):
        x = rng.normal(size=5)
        g = rng.normal(size=5)
        y = softmax(x)
        gx = softmax_backward(y, g)
        h = 1e-6
        for i in range(5):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (softmax(xp) @ g - softmax(xm) @ g) / (2 * h)
            assert gx[i] == pytest.approx(fd, abs=1e-6)


def conv_oracle(img, kernel, bias):
    """Nested-loop 3x3 same-padded convolution, independent of im2col."""
    h, w, cin = img.shape
    cout = kernel.shape[3]
    out = np.zeros((h, w, cout))
    for y in range(h):
        for x in range(w):
            for ky in range(3):
                for kx in range(3):
                    yy, xx = y + ky - 1, x + kx - 1
                    if 0 <= yy < h and 0 <= xx < w:
                        out[y, x] += img[yy, xx] @ kernel[ky, kx]
            out[y, x] += bias
    return out


class TestEncoder:
    def test_zero_weights_zero_output(self, rng):
        p = init_encoder(rng, hidden=4, feature_dim=3, dtype=np.float64)
        p.w1[:] = 0
        p.w2[:] = 0
        p.b1[:] = 0
        p.b2[:] = 0
        fmap = encode_features(p, rng.uniform(0, 1, (5, 5, 3)))
        assert np.allclose(fmap, 0.0)

    def test_center_tap_identity_on_constant_image(self, rng):
        p = init_encoder(rng, hidden=3, feature_dim=3, dtype=np.float64)
        p.w1[:] = 0
        p.w2[:] = 0
        p.b1[:] = 0
        p.b2[:] = 0
        for c in range(3):
            p.w1[1, 1, c, c] = 1.0  # center tap passes channels through
            p.w2[1, 1, c, c] = 1.0
        img = np.full((6, 6, 3), 0.6)
        fmap = encode_features(p, img)
        assert np.allclose(fmap[1:-1, 1:-1], 0.6, atol=1e-12)

    def test_conv_matches_nested_loop_oracle(self, rng):
        for _ in range(10):
            img = rng.normal(size=(6, 7, 3))
            kernel = rng.normal(size=(3, 3, 3, 4))
            bias = rng.normal(size=4)
            got = conv2d_same(img, kernel, bias)
            assert np.allclose(got, conv_oracle(img, kernel, bias), atol=1e-5)

    def test_preserves_spatial_resolution(self, rng):
        p = init_encoder(rng, hidden=4, feature_dim=5)
        fmap = encode_features(p, rng.uniform(0, 1, (11, 9, 3)).astype(np.float32))
        assert fmap.shape == (11, 9, 5)

    def test_too_small_image_rejected(self, rng):
        p = init_encoder(rng)
        with pytest.raises(ShapeError):
            encode_features(p, np.zeros((2, 5, 3)))

    @pytest.mark.parametrize("seed", range(4))
    def test_encoder_gradients_match_fd(self, seed):
        rng = np.random.default_rng(seed)
        p = init_encoder(rng, hidden=5, feature_dim=4, dtype=np.float64)
        img = rng.uniform(0, 1, (7, 6, 3))
        gout = rng.normal(size=(7, 6, 4))
        fmap, tape = encode_features(p, img, want_tape=True)
        grads = encoder_backward(tape, gout)

        def loss():
            return float((encode_features(p, img) * gout).sum())

        h = 1e-4
        for arr, gvals in [(p.w1, grads.w1), (p.w2, grads.w2), (p.b1, grads.b1), (p.b2, grads.b2)]:
            flat, gflat = arr.ravel(), gvals.ravel()
            for i in np.random.default_rng(seed + 9).integers(0, flat.size, 4):
                orig = flat[i]
                flat[i] = orig + h
                up = loss()
                flat[i] = orig - h
                dn = loss()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                if abs(fd) > 1e-10:
                    assert abs(fd - gflat[i]) / max(abs(fd), 1e-10) < 1e-5


def bilinear_oracle(fmap, px, py):
    """Direct bilinear formula with half-pixel centers and edge clamping."""
    h, w = fmap.shape[:2]
    qx = min(max(px - 0.5, 0.0), w - 1.0)
    qy = min(max(py - 0.5, 0.0), h - 1.0)
    x0, y0 = int(min(np.floor(qx), w - 2)), int(min(np.floor(qy), h - 2))
    tx, ty = qx - x0, qy - y0
    return (
        fmap[y0, x0] * (1 - tx) * (1 - ty)
        + fmap[y0, x0 + 1] * tx * (1 - ty)
        + fmap[y0 + 1, x0] * (1 - tx) * ty
        + fmap[y0 + 1, x0 + 1] * tx * ty
    )


class TestSampleFeature:
    def test_texel_center_exact(self, rng):
        fmap = rng.normal(size=(5, 6, 4))
        assert np.allclose(sample_feature(fmap, (2.5, 3.5)), fmap[3, 2], atol=1e-12)

    def test_midpoint_of_four_texels(self, rng):
        fmap = rng.normal(size=(4, 4, 2))
        got = sample_feature(fmap, (2.0, 2.0))
        expect = fmap[1:3, 1:3].mean(axis=(0, 1))
        assert np.allclose(got, expect, atol=1e-12)

    def test_matches_bilinear_oracle(self, rng):
        fmap = rng.normal(size=(7, 9, 3))
        for _ in range(1000):
            px, py = rng.uniform(0, 9), rng.uniform(0, 7)
            got = sample_feature(fmap, (px, py))
            assert np.allclose(got, bilinear_oracle(fmap, px, py), atol=1e-6)

    def test_out_of_bounds_raises(self, rng):
        fmap = rng.normal(size=(4, 4, 2))
        with pytest.raises(OutOfBoundsError):
            sample_feature(fmap, (4.0, 1.0))

    def test_batched_matches_scalar(self, rng):
        maps = rng.normal(size=(3, 5, 6, 4))
        pix = np.stack(
            [rng.uniform(0, 6, size=40), rng.uniform(0, 5, size=40)], axis=-1
        )
        views = rng.integers(0, 3, size=40)
        vals, _, _ = sample_maps_batch(maps, views, pix)
        for i in range(40):
            assert np.allclose(
                vals[i], sample_feature(maps[views[i]], pix[i]), atol=1e-12
            )

    def test_scatter_is_adjoint_of_sample(self, rng):
        # <g, sample(M)> == <scatter(g), M> for random g, M
        maps = rng.normal(size=(2, 4, 5, 3))
        pix = np.stack(
            [rng.uniform(0, 5, size=25), rng.uniform(0, 4, size=25)], axis=-1
        )
        views = rng.integers(0, 2, size=25)
        vals, idx, w = sample_maps_batch(maps, views, pix)
        g = rng.normal(size=vals.shape)
        lhs = float((g * vals).sum())
        gmap = scatter_map_gradient(maps.shape, idx, w, g)
        rhs = float((gmap * maps).sum())
        assert lhs == pytest.approx(rhs, rel=1e-9)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, 2.0])}
        opt = Adam()
        opt.step(p, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(p["w"], [1.0, 2.0])

    def test_minimizes_quadratic(self):
        p = {"w": np.array([5.0, -3.0])}
        opt = Adam()
        for _ in range(800):
            opt.step(p, {"w": 2 * p["w"]}, lr=0.05)
        assert np.allclose(p["w"], 0.0, atol=1e-3)

    def test_separate_step_counts(self):
        opt = Adam()
        a = {"a": np.array([1.0])}
        b = {"b": np.array([1.0])}
        opt.step(a, {"a": np.array([1.0])}, lr=0.1)
        opt.step(a, {"a": np.array([1.0])}, lr=0.1)
        opt.step(b, {"b": np.array([1.0])}, lr=0.1)
        assert opt.state["a"][2] == 2
        assert opt.state["b"][2] == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        mlp = init_mlp([25, 32, 32, 1], rng)
        enc = init_encoder(rng, hidden=16, feature_dim=8)
        path = str(tmp_path / "ck.nvck")
        save_checkpoint(path, mlp, enc, hyperparams={"k_views": 4, "lr": 1e-3})
        m2, e2, hp = load_checkpoint(path)
        assert hp == {"k_views": 4, "lr": 1e-3}
        for a, b in zip(mlp.weights, m2.weights):
            assert np.array_equal(a, b)
        for a, b in zip(mlp.biases, m2.biases):
            assert np.array_equal(a, b)
        assert np.array_equal(enc.w1, e2.w1)
        assert np.array_equal(enc.b2, e2.b2)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.nvck"
        p.write_bytes(b"ZZZZ" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(str(p))

    def test_truncation_rejected(self, tmp_path, rng):
        mlp = init_mlp([4, 3], rng)
        enc = init_encoder(rng, hidden=2, feature_dim=2)
        path = str(tmp_path / "ck.nvck")
        save_checkpoint(path, mlp, enc)
        data = open(path, "rb").read()
        (tmp_path / "t.nvck").write_bytes(data[:-9])
        with pytest.raises(FormatError):
            load_checkpoint(str(tmp_path / "t.nvck"))

    def test_deterministic_bytes(self, tmp_path, rng):
        mlp = init_mlp([4, 3], rng)
        enc = init_encoder(rng, hidden=2, feature_dim=2)
        p1, p2 = str(tmp_path / "a.nvck"), str(tmp_path / "b.nvck")
        save_checkpoint(p1, mlp, enc, hyperparams={"x": 1})
        save_checkpoint(p2, mlp, enc, hyperparams={"x": 1})
        assert open(p1, "rb").read() == open(p2, "rb").read()
