import numpy as np
import pytest

from ecrflab import toynet
from ecrflab.ecrf import EcrfParams
from ecrflab.errors import ParameterError
from ecrflab.superpixel import SlicParams, slic_segment
from ecrflab.toynet import (
    ConvLayer,
    NetConfig,
    SynthConfig,
    ToyNet,
    TrainConfig,
    cell_cross_entropy,
    conv_backward,
    conv_forward,
    features_backward,
    features_forward,
    gen_synthetic_dataset,
    poly_lr,
)


class TestSyntheticDataset:
    def test_deterministic(self):
        cfg = SynthConfig(num_images=4, size=32, seed=9)
        a = gen_synthetic_dataset(cfg)
        b = gen_synthetic_dataset(cfg)
        for (ia, la), (ib, lb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(la, lb)

    def test_every_class_covered_with_mass(self):
        for seed in range(5):
            data = gen_synthetic_dataset(SynthConfig(num_images=6, size=48, num_classes=5, seed=seed))
            hist = np.bincount(np.concatenate([lab.ravel() for _, lab in data]), minlength=5)
            assert (hist > 0).all()
            assert hist[0] <= 0.7 * hist.sum()

    def test_images_in_unit_range(self):
        data = gen_synthetic_dataset(SynthConfig(num_images=2, size=32, texture_noise=0.5, seed=0))
        for image, labels in data:
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert labels.min() >= 0 and labels.max() < 6


class TestConvLayers:
    def test_forward_shape_and_stride(self):
        rng = np.random.default_rng(0)
        net = ToyNet.initialize(NetConfig(num_classes=4), rng)
        image = rng.uniform(size=(32, 32, 3))
        feats, caches = features_forward(net, image)
        assert feats.shape == (8, 8, net.config.feature_channels)
        assert net.config.feature_stride == 4

    def test_conv_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        layer = ConvLayer(
            weight=rng.normal(size=(3, 3, 2, 3)) * 0.3,
            bias=rng.normal(size=3) * 0.1,
            stride=2,
        )
        x = rng.normal(size=(6, 6, 2))
        out, cache = conv_forward(x, layer)
        upstream = rng.normal(size=out.shape)
        dx, dw, db = conv_backward(upstream, layer, cache)

        eps = 1e-6

        def loss():
            return float((upstream * conv_forward(x, layer)[0]).sum())

        for tensor, grad in ((x, dx), (layer.weight, dw), (layer.bias, db)):
            it = np.nditer(tensor, flags=["multi_index"])
            checked = 0
            while not it.finished and checked < 40:
                idx = it.multi_index
                orig = tensor[idx]
                tensor[idx] = orig + eps
                lp = loss()
                tensor[idx] = orig - eps
                lm = loss()
                tensor[idx] = orig
                assert grad[idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)
                checked += 1
                it.iternext()

    def test_backbone_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        net = ToyNet.initialize(NetConfig(num_classes=3, layers=[(4, 3, 2), (6, 3, 2)]), rng)
        image = rng.uniform(size=(8, 8, 3))
        feats, caches = features_forward(net, image)
        upstream = rng.normal(size=feats.shape)
        grads = features_backward(net, upstream, caches)

        eps = 1e-6
        w = net.conv[0].weight
        for idx in [(0, 0, 0, 0), (1, 2, 1, 3), (2, 1, 2, 2)]:
            orig = w[idx]
            w[idx] = orig + eps
            lp = float((upstream * features_forward(net, image)[0]).sum())
            w[idx] = orig - eps
            lm = float((upstream * features_forward(net, image)[0]).sum())
            w[idx] = orig
            assert grads["conv0.weight"][idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)


class TestSchedule:
    def test_poly_lr_endpoints(self):
        cfg = TrainConfig(mode="baseline", lr0=0.01, total_iters=100, poly_power=0.9)
        assert poly_lr(0, cfg) == pytest.approx(0.01)
        assert poly_lr(100, cfg) == 0.0
        assert poly_lr(50, cfg) == pytest.approx(0.01 * 0.5**0.9)

    def test_poly_lr_beyond_schedule(self):
        cfg = TrainConfig(mode="baseline", total_iters=10)
        with pytest.raises(ParameterError):
            poly_lr(11, cfg)


class TestCellCrossEntropy:
    def test_loss_value_and_gradient(self):
        logits = np.zeros((1, 1, 3))
        labels = np.zeros((1, 1), dtype=int)
        loss, dlogits = cell_cross_entropy(logits, labels)
        assert loss == pytest.approx(np.log(3))
        np.testing.assert_allclose(dlogits[0, 0], [1 / 3 - 1, 1 / 3, 1 / 3])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 3, 4))
        labels = rng.integers(0, 4, size=(2, 3))
        _, dlogits = cell_cross_entropy(logits, labels)
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 2, 3), (0, 1, 2)]:
            orig = logits[idx]
            logits[idx] = orig + eps
            lp = cell_cross_entropy(logits, labels)[0]
            logits[idx] = orig - eps
            lm = cell_cross_entropy(logits, labels)[0]
            logits[idx] = orig
            assert dlogits[idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-8)


class TestModeBackward:
    @pytest.mark.parametrize("mode", ["baseline", "joint", "ecrf"])
    def test_loss_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(5)
        net = ToyNet.initialize(NetConfig(num_classes=3, layers=[(4, 3, 2), (5, 3, 2)]), rng)
        image = rng.uniform(size=(16, 16, 3))
        labels = rng.integers(0, 3, size=(4, 4))
        cfg = TrainConfig(mode=mode, joint_window=1)
        ecrf_params = None
        sp = None
        if mode == "ecrf":
            ecrf_params = EcrfParams.initialize(5, d_k=4, pos_dim=4, rng=rng, embed_scale=0.5, window_radius=1)
            sp = slic_segment(image, SlicParams(target_blocks=4))

        def run():
            fwd = toynet.forward(net, image, mode, sp=sp, ecrf_params=ecrf_params, train_cfg=cfg)
            return toynet.mode_loss_backward(net, fwd, labels)

        loss, grads = run()
        eps = 1e-6
        checks = [("classifier.weight", net.classifier, (0, 0)), ("conv0.weight", net.conv[0].weight, (1, 1, 0, 2))]
        if mode == "ecrf":
            checks.append(("ecrf.compat_w", ecrf_params.compat_w, (3,)))
            checks.append(("ecrf.embed_w", ecrf_params.embed_w, (0, 1)))
        for name, tensor, idx in checks:
            orig = tensor[idx]
            tensor[idx] = orig + eps
            lp = run()[0]
            tensor[idx] = orig - eps
            lm = run()[0]
            tensor[idx] = orig
            numeric = (lp - lm) / (2 * eps)
            assert np.asarray(grads[name])[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9), name


class TestTraining:
    def test_loss_decreases(self):
        data = gen_synthetic_dataset(SynthConfig(num_images=4, size=32, texture_noise=0.1, seed=0))
        rng = np.random.default_rng(0)
        net = ToyNet.initialize(NetConfig(num_classes=6), rng)
        result = toynet.train(TrainConfig(mode="baseline", total_iters=60, seed=0), data, net)
        assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])

    def test_deterministic_given_seed(self):
        data = gen_synthetic_dataset(SynthConfig(num_images=2, size=32, seed=1))
        nets = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            net = ToyNet.initialize(NetConfig(num_classes=6), rng)
            toynet.train(TrainConfig(mode="baseline", total_iters=10, seed=3), data, net)
            nets.append(net)
        np.testing.assert_array_equal(nets[0].classifier, nets[1].classifier)

    def test_ecrf_mode_requires_params(self):
        data = gen_synthetic_dataset(SynthConfig(num_images=2, size=32, seed=0))
        rng = np.random.default_rng(0)
        net = ToyNet.initialize(NetConfig(num_classes=6), rng)
        with pytest.raises(ParameterError):
            toynet.train(TrainConfig(mode="ecrf", total_iters=5, seed=0), data, net)

    def test_predict_shape(self):
        rng = np.random.default_rng(0)
        net = ToyNet.initialize(NetConfig(num_classes=6), rng)
        image = rng.uniform(size=(32, 32, 3))
        pred = toynet.predict(net, image, "baseline")
        assert pred.shape == (32, 32)
        assert pred.min() >= 0 and pred.max() < 6

    def test_unknown_mode_rejected(self):
        with pytest.raises(ParameterError):
            TrainConfig(mode="bogus")
