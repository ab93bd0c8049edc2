import numpy as np
import pytest

from ecrflab import oracles
from ecrflab.errors import ParameterError
from ecrflab.gradtheory import (
    PixelCase,
    angle_experiment,
    baseline_weight_grad,
    ecrf_weight_grad,
    jointcrf_weight_grad,
    softmax_ce,
)


def random_case(rng, c=None, n_neighbors=None):
    c = c or int(rng.integers(2, 6))
    n_neighbors = int(rng.integers(0, 4)) if n_neighbors is None else n_neighbors
    return PixelCase(
        feature=rng.normal(size=c),
        label=0,
        neighbors=tuple((float(rng.uniform(0, 2)), rng.normal(size=c)) for _ in range(n_neighbors)),
    )


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-2)


class TestSoftmaxCe:
    def test_uniform_logits(self):
        loss, probs = softmax_ce(np.zeros(4), 1)
        np.testing.assert_allclose(probs, 0.25)
        np.testing.assert_allclose(loss, np.log(4))

    def test_overflow_safe(self):
        loss, probs = softmax_ce(np.array([1000.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            softmax_ce(np.zeros(3), 5)


class TestPixelCase:
    def test_rejects_negative_weight(self):
        with pytest.raises(ParameterError):
            PixelCase(feature=np.ones(2), label=0, neighbors=((-0.5, np.ones(2)),))


class TestGradientsAgainstOracles:
    @pytest.mark.parametrize(
        "name,fn",
        [
            ("baseline_weight_grad", baseline_weight_grad),
            ("jointcrf_weight_grad", jointcrf_weight_grad),
            ("ecrf_weight_grad", ecrf_weight_grad),
        ],
    )
    def test_matches_finite_differences(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(20):
            case = random_case(rng)
            weights = rng.normal(size=(len(case.feature), int(rng.integers(2, 5))))
            analytic = fn(case, weights).grad
            numeric = oracles.finite_diff_grad(name, case, weights, eps=1e-5)
            assert rel_err(analytic, numeric) < 1e-8

    def test_baseline_scale_is_one_minus_prob(self):
        rng = np.random.default_rng(0)
        case = random_case(rng, n_neighbors=0)
        weights = rng.normal(size=(len(case.feature), 3))
        report = baseline_weight_grad(case, weights)
        _, probs = softmax_ce(weights.T @ case.feature, case.label)
        assert report.scale == pytest.approx(1.0 - probs[case.label])
        np.testing.assert_allclose(report.grad, report.scale * case.feature)


class TestCollinearityDichotomy:
    def test_baseline_and_joint_collinear_with_feature(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            case = random_case(rng)
            weights = rng.normal(size=(len(case.feature), 3))
            for fn in (baseline_weight_grad, jointcrf_weight_grad):
                g = fn(case, weights).grad
                cross = np.outer(g, case.feature) - np.outer(case.feature, g)
                assert np.linalg.norm(cross) <= 1e-12 * max(1.0, np.linalg.norm(g))

    def test_ecrf_direction_follows_neighbors(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            case = random_case(rng, n_neighbors=2)
            weights = rng.normal(size=(len(case.feature), 3))
            g = ecrf_weight_grad(case, weights).grad
            f = case.feature
            cos = abs(g @ f) / (np.linalg.norm(g) * np.linalg.norm(f))
            # generic random neighbors are not collinear with the feature
            assert cos < 1.0 - 1e-9

    def test_joint_relieves_scale_when_neighbors_agree(self):
        # confident same-class neighbors shrink the (1 - P) factor
        rng = np.random.default_rng(3)
        feature = rng.normal(size=3)
        weights = rng.normal(size=(3, 3))
        strong = weights[:, 0] * 5.0  # a neighbor the classifier is sure about
        base = baseline_weight_grad(PixelCase(feature, 0, ()), weights)
        joint = jointcrf_weight_grad(PixelCase(feature, 0, ((2.0, strong),)), weights)
        assert joint.scale < base.scale


class TestAngleExperiment:
    def test_canonical_ordering(self):
        w1 = np.array([1.0, 0.0])
        theta = np.deg2rad(80.0)
        w2 = np.array([np.cos(theta), np.sin(theta)])
        t1, t2, t3 = angle_experiment(w1, w2)
        assert t1 < t2 < t3
        np.testing.assert_allclose([t1, t2, t3], [1.3723, 1.3769, 1.3889], atol=2e-4)

    def test_rejects_collinear_classes(self):
        with pytest.raises(ParameterError):
            angle_experiment(np.array([1.0, 1.0]), np.array([2.0, 2.0]))

    def test_zero_step_angles_equal(self):
        w1 = np.array([1.0, 0.2])
        w2 = np.array([0.1, 1.0])
        t1, t2, t3 = angle_experiment(w1, w2, step=0.0)
        assert t1 == pytest.approx(t2) == pytest.approx(t3)
