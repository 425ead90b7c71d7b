"""Loss values, optimizer behavior, and loop contracts."""

import math

import numpy as np
import pytest

from haaseg.data import SegSample
from haaseg.network import HAANet, NetConfig
from haaseg.tensor import Tensor, finite_diff_check
from haaseg.training import AdamState, TrainConfig, adam_step, bce_loss, fit


def toy_net(seed=1):
    return HAANet(
        NetConfig(
            stem_channels=(2, 4),
            encoder_channels=(4,),
            decoder_channels=(4, 4, 2, 2, 2),
            image_size=8,
            k_clip=2,
            seed=seed,
        )
    )


def toy_sample(seed=0, size=8):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(1, size, size))
    mask = np.zeros((1, size, size))
    mask[0, 2:5, 2:5] = 1.0
    return SegSample(Tensor(img), Tensor(mask), f"toy{seed}")


class TestBceLoss:
    def test_perfect_prediction_near_zero(self):
        g = np.zeros((1, 4, 4))
        g[0, :2] = 1.0
        loss = bce_loss(Tensor(g.copy()), Tensor(g))
        assert 0.0 <= loss.data.item() < 1e-6

    def test_half_everywhere_is_ln2(self):
        y = Tensor(np.full((1, 4, 4), 0.5))
        g = Tensor((np.random.default_rng(0).uniform(size=(1, 4, 4)) > 0.5).astype(float))
        assert abs(bce_loss(y, g).data.item() - math.log(2.0)) < 1e-12

    def test_single_pixel_value(self):
        loss = bce_loss(Tensor(np.full((1, 1, 1), 0.25)), Tensor(np.ones((1, 1, 1))))
        assert abs(loss.data.item() - (-math.log(0.25))) < 1e-12

    def test_non_binary_ground_truth_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            bce_loss(Tensor(np.full((1, 2, 2), 0.5)), Tensor(np.full((1, 2, 2), 0.25)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        g = Tensor((rng.uniform(size=(1, 3, 3)) > 0.4).astype(float))
        y = Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 3)), requires_grad=True)
        err = finite_diff_check(lambda t: bce_loss(t, g), y)
        assert err < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            y = Tensor(rng.uniform(size=(1, 4, 4)))
            g = Tensor((rng.uniform(size=(1, 4, 4)) > 0.5).astype(float))
            assert bce_loss(y, g).data.item() >= 0.0


class TestAdam:
    def test_zero_grad_zero_decay_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.zeros(3)
        cfg = TrainConfig(weight_decay=0.0)
        adam_step([("p", p)], AdamState(), cfg)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        p.grad = np.array([0.5, -2.0])
        adam_step([("p", p)], AdamState(), cfg)
        np.testing.assert_allclose(p.data, [1.0 - cfg.lr, 1.0 + cfg.lr], atol=1e-8)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            p = Tensor(rng.normal(size=(4,)), requires_grad=True)
            state = AdamState()
            cfg = TrainConfig()
            for _ in range(5):
                p.grad = rng.normal(size=(4,))
                adam_step([("p", p)], state, cfg)
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_state_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.zeros(3)
        state = AdamState(m={"p": np.zeros(2)}, v={"p": np.zeros(2)})
        with pytest.raises(ValueError, match="shape"):
            adam_step([("p", p)], state, TrainConfig())

    def test_decay_shrinks_without_grad(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.zeros(1)
        cfg = TrainConfig(weight_decay=0.1)
        adam_step([("p", p)], AdamState(), cfg)
        assert p.data[0] == 10.0 - cfg.lr * 0.1 * 10.0


class TestFit:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            fit(toy_net(), [], TrainConfig(epochs=1))

    def test_zero_lr_keeps_parameters(self):
        net = toy_net()
        before = {n: t.data.copy() for n, t in net.named_parameters()}
        fit(net, [toy_sample()], TrainConfig(epochs=2, lr=0.0, weight_decay=0.0))
        for n, t in net.named_parameters():
            np.testing.assert_array_equal(t.data, before[n])

    def test_loss_finite_and_decreasing_trend(self):
        net = toy_net()
        history = fit(net, [toy_sample()], TrainConfig(epochs=30, seed=4))
        losses = [row["mean_loss"] for row in history]
        assert all(np.isfinite(losses))
        assert min(losses[15:]) < losses[0]

    def test_history_columns_and_log(self, tmp_path):
        net = toy_net()
        sample = toy_sample()
        log = tmp_path / "log.csv"
        history = fit(net, [sample], TrainConfig(epochs=2), val_samples=[sample], log_path=log)
        assert len(history) == 2
        for row in history:
            assert set(row) == {"epoch", "mean_loss", "val_dice", "gamma1_mean", "gamma2_mean"}
            assert np.isfinite(row["val_dice"])
        header = log.read_text().splitlines()[0]
        assert header == "epoch,mean_loss,val_dice,gamma1_mean,gamma2_mean"

    def test_determinism_across_runs(self):
        def run():
            net = toy_net(seed=7)
            fit(net, [toy_sample(1), toy_sample(2)], TrainConfig(epochs=3, seed=5))
            return {n: t.data.copy() for n, t in net.named_parameters()}

        a, b = run(), run()
        for n in a:
            assert np.array_equal(a[n], b[n]), n
