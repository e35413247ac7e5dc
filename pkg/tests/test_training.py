import math

import numpy as np
import pytest

from bcos.errors import NaNLossError, ShapeError
from bcos.models import BcosNetwork, build_tiny, stable_sigmoid, tiny_spec, uniform_output_bias
from bcos.training import (AdamState, TrainConfig, accuracy, adam_step, bce_one_vs_all_loss,
                           cosine_lr, train, uniform_bce)

from conftest import check_gradients


def bce_reference(z, labels, b):
    """Naive float64 BCE through explicit probabilities."""
    p = 1 / (1 + np.exp(-(z + b)))
    y = np.eye(z.shape[1])[labels]
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


class TestLoss:
    def test_zero_logits_ten_classes(self):
        b = math.log(0.1 / 0.9)
        assert stable_sigmoid(np.zeros(10) + b) == pytest.approx(np.full(10, 0.1), abs=1e-15)
        loss = bce_one_vs_all_loss(np.zeros((3, 10)), [0, 4, 9], b).item()
        assert loss == pytest.approx(uniform_bce(10), rel=1e-12)

    @pytest.mark.parametrize("K", [2, 4, 10])
    def test_uniform_closed_form(self, K):
        expected = -(math.log(1 / K) + (K - 1) * math.log(1 - 1 / K)) / K
        assert uniform_bce(K) == pytest.approx(expected)
        got = bce_one_vs_all_loss(np.zeros((5, K)), np.arange(5) % K, uniform_output_bias(K))
        assert got.item() == pytest.approx(expected, rel=1e-12)

    def test_matches_reference(self, rng):
        z = rng.normal(0, 3, size=(6, 4))
        labels = rng.integers(0, 4, 6)
        assert bce_one_vs_all_loss(z, labels, -1.1).item() == pytest.approx(
            bce_reference(z, labels, -1.1), rel=1e-12)

    def test_saturated(self):
        z = np.full((4, 5), -50.0)
        z[np.arange(4), [0, 1, 2, 3]] = 50
        loss = bce_one_vs_all_loss(z, [0, 1, 2, 3], 0.0).item()
        assert np.isfinite(loss) and loss <= 1e-10

    def test_no_overflow(self):
        z = np.array([[800.0, -800.0]])
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            loss = bce_one_vs_all_loss(z, [1], 0.0)
        assert loss.item() == pytest.approx(800.0)

    def test_gradient(self, rng):
        labels = rng.integers(0, 3, 5)
        check_gradients(lambda z: bce_one_vs_all_loss(z, labels, -0.7),
                        [rng.normal(0, 2, size=(5, 3))], rng, rel_tol=1e-6)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            bce_one_vs_all_loss(np.zeros((3, 4)), [0, 1], 0.0)


class TestAdam:
    def test_first_step_is_sign(self, rng):
        p = rng.normal(size=(4, 3))
        g = rng.normal(size=(4, 3))
        (new,) = adam_step([p], [g], AdamState(), lr=0.01)
        np.testing.assert_allclose(new - p, -0.01 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_fixed_point(self, rng):
        p = rng.normal(size=5)
        state = AdamState()
        for _ in range(3):
            (p2,) = adam_step([p], [np.zeros(5)], state, lr=0.1)
        np.testing.assert_array_equal(p2, p)

    def test_matches_textbook(self, rng):
        p = rng.normal(size=3)
        grads = [rng.normal(size=3) for _ in range(4)]
        state, m, v, q = AdamState(), np.zeros(3), np.zeros(3), p.copy()
        for t, g in enumerate(grads, 1):
            (p,) = adam_step([p], [g], state, lr=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            q = q - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, q, rtol=1e-12)

    def test_deterministic(self, rng):
        runs = []
        for _ in range(2):
            r = np.random.default_rng(5)
            p, state = r.normal(size=(3, 3)), AdamState()
            for _ in range(10):
                (p,) = adam_step([p], [r.normal(size=(3, 3))], state, lr=1e-2)
            runs.append(p.tobytes())
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([np.zeros(3)], [np.zeros(4)], AdamState(), 0.1)


class TestSchedule:
    def test_ends(self):
        assert cosine_lr(0, 20, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(20, 20, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)

    def test_midpoint(self):
        assert cosine_lr(10, 20, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_monotone(self):
        lrs = [cosine_lr(e, 7, 1.0, 0.1) for e in np.linspace(0, 7, 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0),
                                        dict(lr_init=1e-6, lr_final=1e-5),
                                        dict(precision="float16")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def small_data():
    from bcos.data import synth_split
    return synth_split(11, 96, 32, 4, 16)


class TestTrain:
    def test_csv_and_determinism(self, small_data, tmp_path):
        tr, te = small_data
        cfg = TrainConfig(epochs=2, batch_size=32, seed=3, hflip=True, pad_crop=2)
        paths = []
        for name in ("a.csv", "b.csv"):
            net = build_tiny(2.0, 1, 8, 4, seed=3)
            train(net, tr, cfg, test=te, metrics_path=tmp_path / name)
            paths.append(tmp_path / name)
        text = paths[0].read_text()
        assert text.splitlines()[0] == "epoch,lr,loss,train_acc,test_acc"
        assert len(text.splitlines()) == 3
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_learns(self, small_data):
        tr, _ = small_data
        net = build_tiny(2.0, 1, 8, 4, seed=0)
        before = accuracy(net, tr)
        net, rows = train(net, tr, TrainConfig(epochs=6, batch_size=16, lr_init=3e-3))
        assert rows[-1]["loss"] < rows[0]["loss"]
        assert rows[-1]["train_acc"] > max(before, 0.5)

    def test_step_zero_loss_near_uniform(self, small_data):
        """With T enlarged so the initial logits are ~0, the first loss is the uniform BCE."""
        tr, _ = small_data
        spec = tiny_spec(2.0, 1, 8, 4)
        spec.temperature = 1e6
        net = BcosNetwork(spec, seed=0)
        loss = bce_one_vs_all_loss(net(tr.images[:64]), tr.labels[:64], net.bias).item()
        assert loss == pytest.approx(uniform_bce(4), rel=1e-4)

    def test_checkpoint_every(self, small_data, tmp_path):
        from bcos.models import load_checkpoint
        tr, _ = small_data
        cfg = TrainConfig(epochs=2, batch_size=48, checkpoint_every=1)
        net, _ = train(build_tiny(2.0, 1, 8, 4), tr, cfg, checkpoint_path=tmp_path / "c.bcos")
        back = load_checkpoint(tmp_path / "c.bcos")
        assert back.meta["epoch"] == 2
        x = tr.images[:4]
        assert back(x).data.tobytes() == net(x).data.tobytes()

    def test_nan_abort(self, small_data):
        tr, _ = small_data
        net = build_tiny(2.0, 1, 8, 4)
        net.layers[2].weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(NaNLossError) as err:
            train(net, tr, TrainConfig(epochs=1))
        assert err.value.tensor_name == "layer3.weight" and err.value.step == 0

    def test_float64_precision(self, small_data):
        tr, _ = small_data
        net, _ = train(build_tiny(2.0, 1, 8, 4), tr, TrainConfig(epochs=1, precision="float64"))
        assert net.dtype == np.float64

    def test_rescaled_rows_same_forward(self, small_data):
        tr, _ = small_data
        net, _ = train(build_tiny(2.0, 2, 8, 4, seed=2), tr, TrainConfig(epochs=1))
        x = tr.images[:8]
        before = net(x).data
        r = np.random.default_rng(0)
        for layer in net.layers:
            w = layer.weight.data
            layer.weight.data = (w * r.uniform(0.2, 5, size=(w.shape[0], 1, 1, 1))).astype(w.dtype)
        assert np.abs(net(x).data - before).max() <= 1e-6 * max(1.0, np.abs(before).max())

    def test_no_bias_parameters(self):
        net = build_tiny(2.0, 2, 8, 4)
        assert all(p.ndim == 4 for p in net.parameters())
        assert len(net.parameters()) == len(net.layers)
