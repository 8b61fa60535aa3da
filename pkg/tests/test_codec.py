"""Codec round-trip properties and reference/differentiable agreement."""

import numpy as np
import pytest

from jpeggan import codec, jpeg
from jpeggan import tensor as T
from jpeggan.jpeg import EncodedImage
from jpeggan.tensor import Tensor


def smooth_image(rng, h=32, w=32):
    """A band-limited color image, the codec's favorite food."""
    yy, xx = np.mgrid[0:h, 0:w] / float(max(h, w))
    img = np.zeros((h, w, 3))
    for c in range(3):
        amp = rng.uniform(30, 90)
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        img[..., c] = 128 + amp * np.sin(2 * np.pi * fx * xx + ph) * np.cos(
            2 * np.pi * fy * yy
        )
    img += rng.normal(0, 2.0, size=img.shape)
    return np.clip(img, 0, 255)


def zero_enc(h=16, w=16, qf=50, mode="4:4:4"):
    fv, fh = jpeg.mode_factors(mode)
    return EncodedImage(
        width=w,
        height=h,
        quality_factor=qf,
        mode=mode,
        y=np.zeros((h // 8, w // 8, 8, 8), dtype=np.int64),
        cb=np.zeros((h // (8 * fv), w // (8 * fh), 8, 8), dtype=np.int64),
        cr=np.zeros((h // (8 * fv), w // (8 * fh), 8, 8), dtype=np.int64),
    )


class TestReferenceCodec:
    def test_all_zero_coefficients_decode_to_mid_gray(self):
        for mode in jpeg.MODES:
            img = codec.decode_image(zero_enc(mode=mode, w=16, h=16))
            assert np.allclose(img, 128.0, atol=1e-9)

    def test_encode_shapes_and_padding(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 255, size=(20, 28, 3))
        enc = codec.encode_image(img, 50, "4:2:0")
        assert enc.width == 32 and enc.height == 32  # padded to 16-multiples
        assert enc.y.shape == (4, 4, 8, 8)
        assert enc.cb.shape == (2, 2, 8, 8)
        enc.validate()
        enc422 = codec.encode_image(img, 50, "4:2:2")
        assert enc422.width == 32 and enc422.height == 24
        enc444 = codec.encode_image(img, 50, "4:4:4")
        assert enc444.width == 32 and enc444.height == 24

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            codec.encode_image(np.full((8, 8, 3), 256.0), 50, "4:4:4")
        with pytest.raises(ValueError):
            codec.encode_image(np.full((8, 8, 3), -1.0), 50, "4:4:4")
        with pytest.raises(ValueError):
            codec.encode_image(np.zeros((8, 8)), 50, "4:4:4")

    def test_identity_on_exactly_representable_images(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            levels = rng.integers(-3, 4, size=(2, 2, 8, 8))
            levels[..., 0, 0] = rng.integers(-40, 40, size=(2, 2))
            enc = zero_enc(h=16, w=16, qf=100, mode="4:4:4")
            enc.y = levels.astype(np.int64)
            enc.cb = (levels // 2).astype(np.int64)
            enc.cr = (-levels // 3).astype(np.int64)
            img = codec.decode_image(enc)
            assert 1.0 < img.min() and img.max() < 254.0  # clip never engaged
            enc2 = codec.encode_image(img, 100, "4:4:4")
            assert np.array_equal(enc2.y, enc.y)
            assert np.array_equal(enc2.cb, enc.cb)
            assert np.array_equal(enc2.cr, enc.cr)
            img2 = codec.decode_image(enc2)
            assert np.max(np.abs(img2 - img)) < 1e-9

    def test_roundtrip_error_small_at_top_quality(self):
        rng = np.random.default_rng(2)
        maes = []
        for _ in range(20):
            img = smooth_image(rng)
            out = codec.decode_image(codec.encode_image(img, 100, "4:4:4"))
            maes.append(np.mean(np.abs(out - img)))
        assert max(maes) <= 1.0

    def test_distortion_grows_as_quality_drops(self):
        rng = np.random.default_rng(3)
        imgs = [smooth_image(rng) for _ in range(10)]

        def mae(qf, mode):
            return float(
                np.mean(
                    [
                        np.abs(codec.decode_image(codec.encode_image(i, qf, mode)) - i).mean()
                        for i in imgs
                    ]
                )
            )

        series = [mae(qf, "4:4:4") for qf in (100, 75, 50, 25)]
        assert all(a < b for a, b in zip(series, series[1:])), series
        modes = [mae(75, m) for m in ("4:4:4", "4:2:2", "4:2:0")]
        assert all(a < b for a, b in zip(modes, modes[1:])), modes

    def test_batch_helpers(self):
        rng = np.random.default_rng(4)
        batch = np.stack([smooth_image(rng).transpose(2, 0, 1) for _ in range(3)])
        encs = codec.encode_batch(batch, 75, "4:2:0")
        assert len(encs) == 3
        out = codec.decode_batch(encs)
        assert out.shape == batch.shape


class TestDifferentiableDecode:
    def rand_levels(self, rng, n, h, w, dc=30, ac=3, corner=8):
        blocks = np.zeros((n, h // 8, w // 8, 8, 8))
        blocks[..., :corner, :corner] = rng.integers(
            -ac, ac + 1, size=(n, h // 8, w // 8, corner, corner)
        )
        blocks[..., 0, 0] = rng.integers(-dc, dc, size=(n, h // 8, w // 8))
        planes = np.stack([jpeg.unblockify(b) for b in blocks])
        return planes[:, None, :, :]

    def make_planes(self, rng, n=2, h=16, w=16, mode="4:4:4", qf=85, quiet=False):
        fv, fh = jpeg.mode_factors(mode)
        if quiet:  # low-frequency, low-amplitude: decoded pixels stay off the clip rails
            y = self.rand_levels(rng, n, h, w, dc=10, ac=1, corner=2)
            cb = self.rand_levels(rng, n, h // fv, w // fh, dc=5, ac=1, corner=2)
            cr = self.rand_levels(rng, n, h // fv, w // fh, dc=5, ac=1, corner=2)
        else:
            y = self.rand_levels(rng, n, h, w)
            cb = self.rand_levels(rng, n, h // fv, w // fh, dc=10, ac=2)
            cr = self.rand_levels(rng, n, h // fv, w // fh, dc=10, ac=2)
        return y, cb, cr

    def test_matches_reference_decoder(self):
        rng = np.random.default_rng(5)
        for mode in jpeg.MODES:
            qf = 70
            y, cb, cr = self.make_planes(rng, mode=mode, qf=qf)
            got = codec.decode_planes(Tensor(y), Tensor(cb), Tensor(cr), qf, mode).data
            for i in range(y.shape[0]):
                enc = EncodedImage(
                    width=16,
                    height=16,
                    quality_factor=qf,
                    mode=mode,
                    y=jpeg.blockify(y[i, 0]).astype(np.int64),
                    cb=jpeg.blockify(cb[i, 0]).astype(np.int64),
                    cr=jpeg.blockify(cr[i, 0]).astype(np.int64),
                )
                want = codec.decode_image(enc).transpose(2, 0, 1)
                assert np.max(np.abs(got[i] - want)) < 1e-10, mode

    def test_gradients_reach_all_planes(self):
        rng = np.random.default_rng(6)
        y, cb, cr = self.make_planes(rng, n=1, mode="4:2:0")
        yt = Tensor(y, requires_grad=True)
        cbt = Tensor(cb, requires_grad=True)
        crt = Tensor(cr, requires_grad=True)
        out = codec.decode_planes(yt, cbt, crt, 85, "4:2:0")
        T.backward(T.mean_all(out))
        assert yt.grad is not None and np.any(yt.grad != 0)
        assert cbt.grad is not None and np.any(cbt.grad != 0)
        assert crt.grad is not None and np.any(crt.grad != 0)

    def test_gradient_check_clip_inactive(self):
        rng = np.random.default_rng(7)
        y, cb, cr = self.make_planes(rng, n=1, h=8, w=8, mode="4:4:4", quiet=True)
        # small levels keep every decoded pixel strictly inside (0, 255)
        img = codec.decode_planes(Tensor(y), Tensor(cb), Tensor(cr), 85, "4:4:4").data
        assert img.min() > 1 and img.max() < 254

        # random projection keeps every coefficient's gradient O(1); a plain
        # quadratic loss drowns the orthogonal directions in fp cancellation
        weight = Tensor(rng.uniform(-1.0, 1.0, size=img.shape))

        def f(t):
            out = codec.decode_planes(t, Tensor(cb), Tensor(cr), 85, "4:4:4")
            return T.mean_all(T.mul(out, weight))

        err = T.gradient_check(f, Tensor(y))
        assert err < 1e-6

    def test_clip_blocks_gradient_outside_range(self):
        y = Tensor(np.full((1, 1, 8, 8), 500.0), requires_grad=True)  # forces saturation
        cb = Tensor(np.zeros((1, 1, 8, 8)))
        cr = Tensor(np.zeros((1, 1, 8, 8)))
        out = codec.decode_planes(y, cb, cr, 100, "4:4:4")
        assert np.all(out.data[:, :, :, :] >= 0) and np.all(out.data <= 255)
        T.backward(T.sum_all(out))
        # DC of 500 at Q=1 pushes luma far out of range; saturated pixels
        # contribute nothing, so the gradient is much smaller than unsaturated
        assert np.abs(y.grad).max() < 8.0 * 3

    def test_coefficient_perturbation_bound(self):
        rng = np.random.default_rng(8)
        qf, mode = 60, "4:4:4"
        ql, _ = jpeg.quant_matrices(qf)
        tmat = jpeg.dct_matrix()
        minv, _ = jpeg.ycbcr_to_rgb_matrix()
        y, cb, cr = self.make_planes(rng, n=1, h=16, w=16, mode=mode, qf=qf, quiet=True)
        base = codec.decode_planes(Tensor(y), Tensor(cb), Tensor(cr), qf, mode).data
        # clamp is 1-Lipschitz, so the bound holds whether or not pixels saturate
        for _ in range(20):
            u, v = rng.integers(0, 8, size=2)
            delta = int(rng.integers(1, 3))
            y2 = y.copy()
            y2[0, 0, u, v] += delta  # first block, coefficient (u, v)
            out = codec.decode_planes(Tensor(y2), Tensor(cb), Tensor(cr), qf, mode).data
            basis_max = np.max(np.abs(np.outer(tmat[u], tmat[v])))
            color_max = np.max(np.abs(minv[:, 0]))  # luma column
            bound = delta * ql[u, v] * basis_max * color_max
            assert np.max(np.abs(out - base)) <= bound + 1e-9

    def test_float32_pipeline(self):
        rng = np.random.default_rng(9)
        y, cb, cr = self.make_planes(rng, n=1)
        with T.default_dtype(np.float32):
            out = codec.decode_planes(
                Tensor(y.astype(np.float32)),
                Tensor(cb.astype(np.float32)),
                Tensor(cr.astype(np.float32)),
                85,
                "4:4:4",
            )
            assert out.data.dtype == np.float32
