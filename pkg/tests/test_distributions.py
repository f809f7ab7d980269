import math

import numpy as np
import pytest
from scipy.stats import norm

from emslam.distributions import (
    AngleEncoding,
    ClassPriorTable,
    LatentGaussian,
    ObjectnessPrior,
    angle_gaussian_logpdf,
    class_logpdf,
    decode_angle,
    encode_angle,
    kl_bernoulli,
    kl_gaussian_diagonal,
    kl_gaussian_isotropic,
)
from emslam.geometry import EulerAngles


def kl_monte_carlo(q: LatentGaussian, p_mean, n=1_000_000, seed=0):
    """Sampling estimate of KL(q || N(p_mean, I)), independent of the closed form.

    Antithetic pairs keep the estimator noise well under the test tolerance.
    """
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n // 2, q.dim))

    def mean_log_ratio(z):
        log_q = norm.logpdf(z, loc=q.mean, scale=q.stddev).sum(axis=1)
        log_p = norm.logpdf(z, loc=np.asarray(p_mean), scale=1.0).sum(axis=1)
        return np.mean(log_q - log_p)

    return float(
        0.5 * mean_log_ratio(q.mean + q.stddev * noise)
        + 0.5 * mean_log_ratio(q.mean - q.stddev * noise)
    )


class TestKlGaussianIsotropic:
    def test_identical_distributions_give_zero(self):
        q = LatentGaussian(np.full(16, 0.3), np.ones(16))
        assert kl_gaussian_isotropic(q, np.full(16, 0.3)) == 0.0

    def test_unit_offset_gives_half(self):
        mean = np.zeros(16)
        mean[0] = 1.0
        q = LatentGaussian(mean, np.ones(16))
        np.testing.assert_allclose(kl_gaussian_isotropic(q, np.zeros(16)), 0.5)
        np.testing.assert_allclose(
            kl_monte_carlo(q, np.zeros(16)), 0.5, atol=1e-2
        )

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        for seed in range(3):
            p_mean = rng.normal(0, 1, 8)
            q = LatentGaussian(p_mean + rng.normal(0, 0.3, 8), rng.uniform(0.7, 1.5, 8))
            closed = kl_gaussian_isotropic(q, p_mean)
            sampled = kl_monte_carlo(q, p_mean, seed=seed)
            np.testing.assert_allclose(closed, sampled, atol=1e-2)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            q = LatentGaussian(rng.normal(0, 2, 6), rng.uniform(0.2, 3.0, 6))
            p = rng.normal(0, 2, 6)
            kl = kl_gaussian_isotropic(q, p)
            assert kl >= 0.0
            equal = np.allclose(q.mean, p) and np.allclose(q.stddev, 1.0)
            if kl < 1e-12:
                assert equal

    def test_dimension_mismatch(self):
        q = LatentGaussian(np.zeros(4), np.ones(4))
        with pytest.raises(ValueError):
            kl_gaussian_isotropic(q, np.zeros(5))


class TestKlBernoulli:
    def test_matching_distribution_gives_zero(self):
        prior = ObjectnessPrior(0.01)
        assert kl_bernoulli(1.0 - 0.01, prior, label_is_object=True) == pytest.approx(0.0)

    def test_half_matches_two_term_sum(self):
        eps = 0.01
        prior = ObjectnessPrior(eps)
        expected = 0.5 * math.log(0.5 / (1 - eps)) + 0.5 * math.log(0.5 / eps)
        np.testing.assert_allclose(kl_bernoulli(0.5, prior, True), expected, atol=1e-15)

    def test_opposite_extreme_is_large_but_finite(self):
        eps = 0.01
        prior = ObjectnessPrior(eps)
        value = kl_bernoulli(eps, prior, True)
        expected = (1 - 2 * eps) * math.log((1 - eps) / eps)
        np.testing.assert_allclose(value, expected, atol=1e-12)
        assert math.isfinite(value)

    def test_degenerate_inputs_use_zero_log_zero(self):
        prior = ObjectnessPrior(0.01)
        assert math.isfinite(kl_bernoulli(0.0, prior, True))
        assert math.isfinite(kl_bernoulli(1.0, prior, True))

    def test_background_label_side(self):
        prior = ObjectnessPrior(0.01)
        assert kl_bernoulli(0.01, prior, label_is_object=False) == pytest.approx(0.0)


class TestEncodeAngle:
    def test_degenerate_noise(self):
        e = encode_angle(0.0, 0.0)
        assert (e.mu_sin, e.mu_cos, e.sigma_sin, e.sigma_cos) == (0.0, 1.0, 0.0, 0.0)

    def test_small_sigma_at_zero(self):
        e = encode_angle(0.0, 0.05)
        np.testing.assert_allclose(e.mu_cos, math.exp(-0.00125), atol=1e-15)
        assert e.mu_sin == 0.0

    def test_moments_match_monte_carlo(self):
        rng = np.random.default_rng(13)
        base = np.random.default_rng(14).standard_normal(1_000_000)
        for sigma in (0.01, 0.05, 0.2):
            for v in rng.uniform(-np.pi, np.pi, 5):
                z = v + sigma * base
                e = encode_angle(v, sigma)
                np.testing.assert_allclose(e.mu_sin, np.sin(z).mean(), atol=1e-3)
                np.testing.assert_allclose(e.mu_cos, np.cos(z).mean(), atol=1e-3)
                np.testing.assert_allclose(e.sigma_sin, np.sin(z).var(), atol=1e-3)
                np.testing.assert_allclose(e.sigma_cos, np.cos(z).var(), atol=1e-3)

    def test_shrinkage_identity(self):
        rng = np.random.default_rng(15)
        for _ in range(300):
            v = rng.uniform(-np.pi, np.pi)
            sigma = rng.uniform(0.0, 0.5)
            e = encode_angle(v, sigma)
            np.testing.assert_allclose(
                e.mu_sin**2 + e.mu_cos**2, math.exp(-(sigma**2)), atol=1e-12
            )

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            encode_angle(0.0, -0.1)


class TestDecodeAngle:
    def test_zero_angle(self):
        assert decode_angle(AngleEncoding(0.0, 0.9, 0.0, 0.0)) == 0.0

    def test_round_trip(self):
        np.testing.assert_allclose(decode_angle(encode_angle(1.0, 0.05)), 1.0, atol=1e-9)

    def test_round_trip_sweep(self):
        rng = np.random.default_rng(16)
        for _ in range(500):
            v = rng.uniform(-np.pi, np.pi)
            sigma = rng.uniform(0.0, 0.2)
            decoded = decode_angle(encode_angle(v, sigma))
            np.testing.assert_allclose(decoded, v, atol=1e-9)

    def test_zero_magnitude_rejected(self):
        with pytest.raises(ValueError):
            decode_angle(AngleEncoding(0.0, 0.0, 0.1, 0.1))


class TestAngleGaussianLogpdf:
    def test_peak_value(self):
        v = EulerAngles(0.3, 0.1, -0.2)
        sigma = 0.05
        expected = 3.0 * math.log(1.0 / (sigma * math.sqrt(2 * math.pi)))
        np.testing.assert_allclose(angle_gaussian_logpdf(v, v, sigma), expected, atol=1e-12)

    def test_wrapping(self):
        base = angle_gaussian_logpdf(
            EulerAngles(0.1, 0.0, 0.0), EulerAngles(0.1, 0.0, 0.0), 0.05
        )
        shifted = angle_gaussian_logpdf(
            EulerAngles(0.1 + 2 * np.pi, 0.0, 0.0), EulerAngles(0.1, 0.0, 0.0), 0.05
        )
        np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_matches_per_component_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            a = EulerAngles.from_array(rng.uniform(-1.5, 1.5, 3))
            b = EulerAngles.from_array(rng.uniform(-1.5, 1.5, 3))
            sigma = rng.uniform(0.02, 0.5)
            expected = sum(
                norm.logpdf(x, loc=y, scale=sigma)
                for x, y in zip(a.as_array(), b.as_array())
            )
            np.testing.assert_allclose(
                angle_gaussian_logpdf(a, b, sigma), expected, atol=1e-12
            )


class TestClassLogpdf:
    def make_table(self, rng, num_classes=5, dim=16):
        return ClassPriorTable(
            {i: rng.normal(0, 4, dim) for i in range(num_classes)}
        )

    def test_peak_of_unit_gaussian(self):
        rng = np.random.default_rng(18)
        table = self.make_table(rng)
        value = class_logpdf(table, 2, table.center(2))
        np.testing.assert_allclose(value, -8.0 * math.log(2 * math.pi), atol=1e-12)

    def test_one_unit_offset(self):
        rng = np.random.default_rng(19)
        table = self.make_table(rng)
        z = table.center(1).copy()
        z[3] += 1.0
        peak = class_logpdf(table, 1, table.center(1))
        np.testing.assert_allclose(class_logpdf(table, 1, z), peak - 0.5, atol=1e-12)

    def test_matches_generic_evaluator(self):
        rng = np.random.default_rng(20)
        table = self.make_table(rng)
        for _ in range(50):
            z = rng.normal(0, 5, 16)
            label = int(rng.integers(0, 5))
            expected = norm.logpdf(z, loc=table.center(label), scale=1.0).sum()
            np.testing.assert_allclose(class_logpdf(table, label, z), expected, atol=1e-12)

    def test_argmax_is_nearest_center(self):
        rng = np.random.default_rng(21)
        table = self.make_table(rng, num_classes=8)
        centers = table.center_matrix()
        for _ in range(200):
            z = rng.normal(0, 5, 16)
            by_logpdf = max(table.ids, key=lambda l: class_logpdf(table, l, z))
            by_distance = table.ids[
                int(np.argmin(np.sum((centers - z) ** 2, axis=1)))
            ]
            assert by_logpdf == by_distance

    def test_unknown_class(self):
        table = ClassPriorTable({0: np.zeros(4)})
        with pytest.raises(KeyError):
            class_logpdf(table, 7, np.zeros(4))


class TestClassPriorTable:
    def test_json_round_trip(self):
        rng = np.random.default_rng(22)
        table = ClassPriorTable({i: rng.normal(0, 4, 16) for i in range(10)})
        doc = table.to_json_dict()
        assert set(doc) == {"dim", "centers"}
        assert doc["dim"] == 16
        recovered = ClassPriorTable.from_json_dict(doc)
        assert recovered.ids == table.ids
        for i in table.ids:
            np.testing.assert_array_equal(recovered.center(i), table.center(i))

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(ValueError):
            ClassPriorTable({0: np.zeros(3), 1: np.zeros(4)})

    def test_declared_dim_checked(self):
        with pytest.raises(ValueError):
            ClassPriorTable.from_json_dict({"dim": 5, "centers": {"0": [0.0, 1.0]}})


class TestKlGaussianDiagonal:
    def test_zero_for_identical(self):
        assert kl_gaussian_diagonal([0.1, 0.2], [0.3, 0.4], [0.1, 0.2], [0.3, 0.4]) == 0.0

    def test_matches_isotropic_special_case(self):
        rng = np.random.default_rng(23)
        mean = rng.normal(0, 1, 6)
        std = rng.uniform(0.5, 2.0, 6)
        p_mean = rng.normal(0, 1, 6)
        q = LatentGaussian(mean, std)
        np.testing.assert_allclose(
            kl_gaussian_diagonal(mean, std**2, p_mean, np.ones(6)),
            kl_gaussian_isotropic(q, p_mean),
            atol=1e-12,
        )

    def test_requires_positive_variance(self):
        with pytest.raises(ValueError):
            kl_gaussian_diagonal([0.0], [0.0], [0.0], [1.0])
