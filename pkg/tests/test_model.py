"""Encoder-decoder model: construction, forward contract, checkpoint format."""

import numpy as np
import pytest

from gradcheck_util import assert_grad_matches
from ssdnet import ops
from ssdnet.model import DipConfig, build, forward
from ssdnet.optim import Adam
from ssdnet.tensor import Tape, Tensor, backward


def small_config():
    return DipConfig(depth=3, channels=[4, 8, 8], skip_channels=[2, 2, 2])


class TestBuild:
    def test_same_seed_same_checksum(self):
        cfg = DipConfig()
        assert build(cfg, seed=0).checksum() == build(cfg, seed=0).checksum()

    def test_different_seed_different_checksum(self):
        cfg = DipConfig()
        assert build(cfg, seed=0).checksum() != build(cfg, seed=1).checksum()

    def test_zero_depth_rejected(self):
        with pytest.raises(ValueError, match="depth"):
            build(DipConfig(depth=0, channels=[], skip_channels=[]), seed=0)

    def test_bad_kernel_rejected(self):
        with pytest.raises(ValueError, match="kernel"):
            build(DipConfig(depth=1, channels=[4], skip_channels=[2], kernel_size=4), seed=0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="entries"):
            build(DipConfig(depth=2, channels=[4], skip_channels=[2, 2]), seed=0)

    def test_parameter_count_matches_closed_form(self):
        cfg = DipConfig()
        params = build(cfg, seed=0, in_channels=1)
        k = cfg.kernel_size
        feat = [1] + cfg.channels[:-1]
        expected = 0
        for i in range(cfg.depth):
            c = cfg.channels[i]
            expected += c * feat[i] * k * k + 2 * c          # down conv + norm
            expected += c * c * k * k + 2 * c                # mid conv + norm
            s = cfg.skip_channels[i]
            expected += s * feat[i] + 2 * s                  # 1x1 skip + norm
        up_next = cfg.channels[-1]
        for i in reversed(range(cfg.depth)):
            c = cfg.channels[i]
            expected += c * (cfg.skip_channels[i] + up_next) * k * k + 2 * c
            expected += c * c + 2 * c                        # 1x1 mix + norm
            up_next = c
        expected += 1 * cfg.channels[0] + 1                  # head conv + bias
        assert params.num_scalars == expected

    def test_duplicate_registration_rejected(self):
        params = build(small_config(), seed=0)
        with pytest.raises(ValueError, match="twice"):
            params.register("enc0.down.w", np.zeros(1))


class TestForward:
    def test_output_shape_256(self):
        params = build(DipConfig(), seed=0)
        out = forward(params, Tensor(np.full((1, 256, 256), 0.5)))
        assert out.shape == (1, 256, 256)

    def test_repeat_forward_bit_identical(self):
        params = build(small_config(), seed=1)
        x = Tensor(np.random.default_rng(2).random((1, 32, 32)))
        a = forward(params, x).data
        b = forward(params, x).data
        assert np.array_equal(a, b)

    def test_indivisible_size_rejected(self):
        params = build(small_config(), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            forward(params, Tensor(np.zeros((1, 30, 30))))

    def test_output_strictly_inside_unit_interval(self):
        params = build(small_config(), seed=3)
        out = forward(params, Tensor(np.random.default_rng(3).random((1, 32, 32))))
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    @pytest.mark.parametrize("hw", [(32, 64), (64, 32), (96, 32)])
    def test_shape_roundtrip(self, hw):
        params = build(small_config(), seed=4)  # depth 3 -> divisor 8
        H, W = hw
        out = forward(params, Tensor(np.random.default_rng(4).random((1, H, W))))
        assert out.shape == (1, H, W)

    def test_rgb_supported(self):
        params = build(small_config(), seed=5, in_channels=3)
        out = forward(params, Tensor(np.random.default_rng(5).random((3, 32, 32))))
        assert out.shape == (3, 32, 32)

    def test_gradcheck_through_network(self):
        params = build(DipConfig(depth=2, channels=[3, 4], skip_channels=[2, 2]), seed=6)
        x = Tensor(np.random.default_rng(6).random((1, 8, 8)))
        tape = Tape()
        out = forward(params, x, tape=tape)
        loss = ops.dot(out, out, tape=tape)
        backward(tape, loss)

        def f():
            o = forward(params, x).data
            return float((o * o).sum())

        sampled = [params["enc0.down.w"], params["dec0.wide.w"], params["head.w"],
                   params["skip1.w"], params["enc1.mid.gain"]]
        assert_grad_matches(f, sampled, max_per_tensor=20)

    def test_fits_flat_gray_image(self):
        # constant images are the easiest prior: 200 steps should nail them
        params = build(small_config(), seed=7)
        y = Tensor(np.full((1, 32, 32), 0.5))
        opt = Adam(params.tensors(), lr=1e-2)
        for _ in range(200):
            tape = Tape()
            recon = forward(params, y, tape=tape)
            d = ops.sub(recon, y, tape=tape)
            loss = ops.scale(ops.dot(d, d, tape=tape), 1.0 / y.size, tape=tape)
            opt.zero_grad()
            backward(tape, loss)
            opt.step()
        final = forward(params, y)
        assert np.mean(np.abs(final.data - y.data)) < 0.01


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = small_config()
        params = build(cfg, seed=8)
        path = tmp_path / "model.ssdn"
        params.save(path)
        fresh = build(cfg, seed=99)
        assert fresh.checksum() != params.checksum()
        fresh.load(path)
        assert fresh.checksum() == params.checksum()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ssdn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        params = build(small_config(), seed=0)
        with pytest.raises(ValueError, match="magic"):
            params.load(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = build(small_config(), seed=9)
        path = tmp_path / "model.ssdn"
        params.save(path)
        other = build(DipConfig(depth=3, channels=[4, 8, 16], skip_channels=[2, 2, 2]), seed=9)
        with pytest.raises(ValueError, match="mismatch|tensors"):
            other.load(path)
