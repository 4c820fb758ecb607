"""Tests for qmimo.quantizers."""

import numpy as np
import pytest
from scipy.stats import chi2

from qmimo import quantizers as qz
from qmimo.errors import (
    ConfigError,
    DegenerateThresholdError,
    DomainError,
    ShapeError,
)

# CDF oracle value: Pr(middle region) for s=0, sigma=1, tau2=1
# = Q(sqrt2) - Q(-sqrt2), frozen from extended precision.
PR_MIDDLE = 0.84270079294971487

T_SPEC = qz.QuantizerSpec.symmetric("ternary", 1.0)
PO_SPEC = qz.QuantizerSpec.symmetric("parallel_one_bit", 1.0)


class TestSpec:
    def test_symmetric_enforced(self):
        with pytest.raises(ConfigError):
            qz.QuantizerSpec(kind="ternary", tau1=-0.5, tau2=1.0)
        with pytest.raises(ConfigError):
            qz.QuantizerSpec(kind="ternary", tau1=1.0, tau2=2.0)

    def test_labeled_fields_all_or_none(self):
        with pytest.raises(ConfigError):
            qz.QuantizerSpec(kind="ternary", tau1=-1.0, tau2=1.0, label_delta=1.0)

    def test_labeled_alpha_validated(self):
        good = qz.QuantizerSpec.symmetric(
            "ternary", 1.0, label_delta=1.0, input_power=2.0
        )
        assert good.scale_alpha == pytest.approx(
            qz.labeled_scale("ternary", 2.0, -1.0, 1.0), rel=1e-12
        )
        with pytest.raises(ConfigError):
            qz.QuantizerSpec(
                kind="ternary",
                tau1=-1.0,
                tau2=1.0,
                label_delta=1.0,
                scale_alpha=good.scale_alpha * 1.01,
                input_power=2.0,
            )


class TestScalarRules:
    def test_regions(self):
        assert np.array_equal(qz.quantize_ternary(-5.0, T_SPEC), [0, 0])
        assert np.array_equal(qz.quantize_ternary(0.0, T_SPEC), [1, 0])
        # boundary inclusive at the upper threshold
        assert np.array_equal(qz.quantize_ternary(1.0, T_SPEC), [1, 1])

    def test_po_can_produce_01(self):
        assert np.array_equal(qz.quantize_po(0.0, -2.0, 2.0, PO_SPEC), [0, 1])

    def test_po_zero_noise_reduces_to_ternary(self):
        for v in (-3.0, -0.2, 0.0, 0.7, 4.0):
            assert np.array_equal(
                qz.quantize_po(v, 0.0, 0.0, PO_SPEC), qz.quantize_ternary(v, T_SPEC)
            )

    def test_po_saturates(self):
        rng = np.random.default_rng(0)
        n = rng.uniform(-0.99, 0.99, size=(50, 2))
        bits = qz.quantize_po(5.0, n[:, 0], n[:, 1], PO_SPEC)
        assert np.all(bits == 1)

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            qz.quantize_ternary(np.nan, T_SPEC)
        with pytest.raises(DomainError):
            qz.quantize_po(0.0, np.inf, 0.0, PO_SPEC)


class TestBlock:
    def test_saturation(self):
        s = np.full(6, 1e6)
        out = qz.quantize_block(s, np.zeros(6), T_SPEC)
        assert np.all(out.zbar == 1)

    def test_ternary_never_01(self):
        rng = np.random.default_rng(1)
        s = rng.normal(0, 2, size=100_000)
        out = qz.quantize_block(s, rng.normal(0, 1, size=s.size), T_SPEC)
        assert not np.any((out.zbar[:, 0] == 0) & (out.zbar[:, 1] == 1))

    def test_middle_probability_matches_cdf_oracle(self):
        # s=0, sigma=1 so each real dim noise std is 1/sqrt2; standardized
        # args are +-sqrt2 and Pr[1,0] = Q(sqrt2)-Q(-sqrt2).
        rng = np.random.default_rng(2)
        n_draws = 400_000
        noise = rng.normal(0, 1.0 / np.sqrt(2.0), size=n_draws)
        out = qz.quantize_block(np.zeros(n_draws), noise, T_SPEC)
        mid = np.mean((out.zbar[:, 0] == 1) & (out.zbar[:, 1] == 0))
        se = np.sqrt(PR_MIDDLE * (1 - PR_MIDDLE) / n_draws)
        assert abs(mid - PR_MIDDLE) < 4 * se

    def test_po_noise_shape_checked(self):
        with pytest.raises(ShapeError):
            qz.quantize_block(np.zeros(4), np.zeros(4), PO_SPEC)
        with pytest.raises(ShapeError):
            qz.quantize_block(np.zeros(4), np.zeros((4, 2)), T_SPEC)

    def test_po_with_shared_noise_matches_ternary_distribution(self):
        # Feeding identical draws to both branches must reproduce the
        # ternary output law; chi-square over the three admissible patterns.
        rng = np.random.default_rng(3)
        n_draws = 100_000
        s = 0.3 * np.ones(n_draws)
        noise = rng.normal(0, 0.8, size=n_draws)
        po = qz.quantize_block(s, np.stack([noise, noise], axis=1), PO_SPEC)
        code = po.zbar[:, 0] + po.zbar[:, 1]
        counts = np.bincount(code, minlength=3)
        from qmimo import numerics as nm

        a1 = (0.3 - T_SPEC.tau1) / 0.8
        a2 = (0.3 - T_SPEC.tau2) / 0.8
        probs = np.array(
            [
                nm.std_normal_cdf(-a1),
                nm.std_normal_cdf(a1) - nm.std_normal_cdf(a2),
                nm.std_normal_cdf(a2),
            ]
        )
        expected = probs * n_draws
        stat = np.sum((counts - expected) ** 2 / expected)
        assert stat < chi2.ppf(0.9999, df=2)


class TestLabels:
    def test_label_regions(self):
        spec = qz.QuantizerSpec.symmetric(
            "ternary", 1.0, label_delta=1.0, input_power=3.0
        )
        a = spec.label_value
        assert qz.labeled_quantize(-2.0, spec) == -a
        assert qz.labeled_quantize(0.0, spec) == 0.0
        assert qz.labeled_quantize(2.0, spec) == a

    def test_labels_commute_with_bits(self):
        spec = qz.QuantizerSpec.symmetric(
            "ternary", 0.7, label_delta=2.0, input_power=1.5
        )
        rng = np.random.default_rng(4)
        v = rng.normal(0, 1.5, size=100_000)
        direct = qz.labeled_quantize(v, spec)
        via_bits = qz.labels_from_bits(
            qz.QuantizedBits(qz.quantize_ternary(v, spec), "ternary"), spec
        )
        assert np.array_equal(direct, via_bits)

    def test_labeled_variance_matches_input_power(self):
        # Complex zero-mean Gaussian input of power P: the label variance
        # must reproduce P within MC error (validates the alpha scaling).
        power = 2.3
        spec = qz.QuantizerSpec.symmetric(
            "ternary", 0.9, label_delta=1.0, input_power=power
        )
        rng = np.random.default_rng(5)
        n_draws = 1_000_000
        re = rng.normal(0, np.sqrt(power / 2), size=n_draws)
        im = rng.normal(0, np.sqrt(power / 2), size=n_draws)
        z = qz.labeled_quantize(re, spec) + 1j * qz.labeled_quantize(im, spec)
        assert np.mean(np.abs(z) ** 2) == pytest.approx(power, rel=0.02)

    def test_two_level_variance_matches_input_power(self):
        power = 1.7
        spec = qz.QuantizerSpec.symmetric(
            "parallel_one_bit", 0.9, label_delta=1.0, input_power=power
        )
        rng = np.random.default_rng(6)
        re = rng.normal(0, np.sqrt(power / 2), size=500_000)
        im = rng.normal(0, np.sqrt(power / 2), size=500_000)
        lab_re = qz.labeled_quantize(re, spec)[:, 0]
        lab_im = qz.labeled_quantize(im, spec)[:, 0]
        z = lab_re + 1j * lab_im
        assert np.mean(np.abs(z) ** 2) == pytest.approx(power, rel=0.02)


class TestDynamicThresholds:
    def test_arithmetic(self):
        Y = np.zeros((2, 3))
        Y[0, 0] = 12.0
        t1, t2 = qz.dynamic_thresholds(Y, 2.0)
        assert t2 == pytest.approx(1.0)
        assert t1 == -t2

    def test_homogeneity(self):
        rng = np.random.default_rng(7)
        Y = rng.normal(size=(4, 5))
        _, t2 = qz.dynamic_thresholds(Y, 3.0)
        _, t2_scaled = qz.dynamic_thresholds(10 * Y, 3.0)
        assert t2_scaled == pytest.approx(10 * t2, rel=1e-12)

    def test_zero_block_rejected(self):
        with pytest.raises(DegenerateThresholdError):
            qz.dynamic_thresholds(np.zeros((2, 2)), 3.0)

    def test_realized_matches_analytic_expectation(self):
        # Frobenius-norm moment oracle: for M=64, T=60 and unit signal+noise
        # power the realized tau2 concentrates on the analytic value.
        rng = np.random.default_rng(8)
        M, T, c = 64, 60, 3.0
        p_sig, s2 = 1.0, 1.0
        taus = []
        for _ in range(20):
            Y = rng.normal(
                0, np.sqrt((p_sig + s2) / 2), size=(M, T)
            ) + 1j * rng.normal(0, np.sqrt((p_sig + s2) / 2), size=(M, T))
            taus.append(qz.dynamic_thresholds(Y, c)[1])
        _, analytic = qz.analytic_dynamic_thresholds(M, T, p_sig, s2, c)
        assert np.mean(taus) == pytest.approx(analytic, rel=0.05)

    def test_default_input_power(self):
        assert qz.default_input_power(4, 2.0, 1.0) == pytest.approx(9.0)
