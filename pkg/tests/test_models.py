import math

import numpy as np
import pytest

from bcos.errors import (CheckpointChecksumError, CheckpointError, CheckpointTruncatedError,
                         CheckpointVersionError, ShapeError)
from bcos.models import (BcosNetwork, build_cifar9, build_tiny, cifar9_spec, load_checkpoint,
                         save_checkpoint, stable_sigmoid, temperature_for, tiny_spec,
                         uniform_output_bias)

from conftest import random_encoded


class TestCifar9:
    def test_layer3(self):
        layer = cifar9_spec(2.0).layers[2]
        assert (layer["stride"], layer["padding"], layer["out"]) == (2, 1, 128)

    def test_stack(self):
        spec = cifar9_spec(2.0, maxout=2)
        assert [l["k"] for l in spec.layers] == [3] * 8 + [1]
        assert [l["out"] for l in spec.layers] == [64, 64, 128, 128, 128, 256, 256, 256, 10]
        assert all(l["maxout"] == 2 for l in spec.layers)

    def test_temperature_b2(self):
        assert math.log10(cifar9_spec(2.0).temperature) == pytest.approx(2.0)

    def test_downsampling(self):
        net = build_cifar9(2.0, seed=0)
        h = w = 32
        for layer in net.layers:
            h, w = layer.output_shape(h, w)
        assert (h, w) == (8, 8)

    def test_final_shape(self):
        net = build_cifar9(2.0, seed=0)
        x = random_encoded(np.random.default_rng(0), 2, 32, np.float32)
        assert net.features(x).shape == (2, 10, 8, 8)
        assert net(x).shape == (2, 10)


class TestTemperature:
    @pytest.mark.parametrize("B,log_t", [(1.0, -3), (1.25, -3), (1.5, -2), (1.75, 1), (2.0, 2),
                                         (2.25, 2), (2.5, 3)])
    def test_table(self, B, log_t):
        assert math.log10(temperature_for(B)) == pytest.approx(log_t)

    def test_interpolates_in_log(self):
        assert math.log10(temperature_for(1.625)) == pytest.approx(-0.5)


class TestTiny:
    def test_output_shape(self):
        net = build_tiny(2.0, channels=8, num_classes=4)
        x = random_encoded(np.random.default_rng(0), 3, 16, np.float32)
        assert net.features(x).shape == (3, 4, 4, 4)

    def test_zero_input(self):
        net = build_tiny(2.0, channels=8, num_classes=4)
        x = np.zeros((2, 6, 16, 16), dtype=np.float32)
        assert (net(x).data == 0).all()
        np.testing.assert_allclose(net.predict_proba(x), stable_sigmoid(net.bias))

    def test_wrong_encoding(self):
        net = build_tiny(2.0, channels=8)
        with pytest.raises(ShapeError, match="rgb6"):
            net(np.zeros((1, 3, 16, 16)))

    def test_small_channels_rejected(self):
        with pytest.raises(ValueError):
            tiny_spec(channels=2)

    def test_doubling_temperature_halves_logits(self, tiny64, rng):
        x = random_encoded(rng, 4, 16)
        spec = tiny_spec(2.0, 2, 8, 4)
        spec.temperature *= 2
        twin = BcosNetwork(spec, weights=[l.weight.data for l in tiny64.layers], dtype=np.float64)
        np.testing.assert_allclose(twin(x).data, tiny64(x).data / 2, rtol=1e-15)

    @pytest.mark.parametrize("alpha", [0.1, 2.0, 37.0])
    def test_homogeneous(self, tiny64, rng, alpha):
        x = random_encoded(rng, 3, 16)
        np.testing.assert_allclose(tiny64(alpha * x).data, alpha * tiny64(x).data, rtol=1e-11)

    def test_b1_piecewise_linear(self, rng):
        net = build_tiny(1.0, maxout=1, channels=8, seed=3, dtype=np.float64)
        a, b = random_encoded(rng, 1, 16), random_encoded(rng, 1, 16)
        # without MaxOut a B=1 stack is exactly linear
        np.testing.assert_allclose(net(a + b).data, net(a).data + net(b).data, rtol=1e-10)


class TestBias:
    def test_ten_classes(self):
        assert stable_sigmoid(uniform_output_bias(10)) == pytest.approx(0.1, abs=1e-15)

    @pytest.mark.parametrize("K", [2, 4, 7, 50])
    def test_uniform(self, K):
        assert stable_sigmoid(uniform_output_bias(K)) == pytest.approx(1 / K, abs=1e-12)

    def test_many_classes(self):
        assert uniform_output_bias(1000) == pytest.approx(math.log(0.01 / 0.99))


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        net = build_tiny(2.0, maxout=2, channels=8, seed=11)
        path = tmp_path / "m.bcos"
        save_checkpoint(net, path)
        return net, path

    def test_round_trip_bit_exact(self, saved, rng):
        net, path = saved
        back = load_checkpoint(path)
        x = random_encoded(rng, 3, 16, np.float32)
        assert back(x).data.tobytes() == net(x).data.tobytes()
        assert back.spec == net.spec

    def test_corrupted_byte(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_truncated(self, saved):
        _, path = saved
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)
        path.write_bytes(raw[:6])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_bad_version(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_expected_b_mismatch(self, saved):
        _, path = saved
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path, expect_B=1.5)

    def test_header_b_disagrees_with_layers(self, tmp_path):
        net = build_tiny(2.0, channels=8)
        net.spec.B = 2.5
        path = tmp_path / "m.bcos"
        save_checkpoint(net, path)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_errors_share_base(self):
        for cls in (CheckpointChecksumError, CheckpointTruncatedError, CheckpointVersionError):
            assert issubclass(cls, CheckpointError)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        save_checkpoint(build_tiny(2.0, channels=8, seed=4), a)
        save_checkpoint(build_tiny(2.0, channels=8, seed=4), b)
        assert a.read_bytes() == b.read_bytes()
