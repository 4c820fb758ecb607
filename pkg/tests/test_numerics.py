"""Tests for qmimo.numerics against independently computed oracle values.

Frozen constants below were produced by external oracles (extended-precision
evaluation, erfc-based CDF, bisection, rejection-sampling Monte Carlo) before
the module was written.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmimo import numerics as nm
from qmimo.errors import DegenerateIntervalError, DomainError

# Extended-precision oracle values (50 significant digits, rounded here).
PDF_AT_0 = 0.39894228040143268
PDF_AT_2 = 0.053990966513188052
CDF_AT_196 = 0.97500210485177957  # 0.5*erfc(-1.96/sqrt(2))
LOG_CDF_AT_M10 = -53.231285150512471
LOG_CDF_AT_5 = -2.8665161296376359e-7
INV_CDF_AT_075 = 0.67448975019608174  # bisection oracle
LN_HALF = -0.69314718055994531

# Rejection-sampling oracle, 1e7 draws, seed 20260823: mean of the standard
# normal truncated to [0, inf).
HALF_NORMAL_MEAN_MC = 0.7977881945617618


class TestScalarFunctions:
    def test_pdf_at_zero(self):
        assert nm.std_normal_pdf(0.0) == pytest.approx(PDF_AT_0, abs=1e-15)

    def test_pdf_even_symmetry(self):
        assert nm.std_normal_pdf(1.5) == nm.std_normal_pdf(-1.5)

    def test_pdf_at_two_vs_oracle(self):
        assert nm.std_normal_pdf(2.0) == pytest.approx(PDF_AT_2, abs=1e-12)

    def test_cdf_at_zero(self):
        assert nm.std_normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)

    def test_cdf_reflection(self):
        x = 0.7
        assert nm.std_normal_cdf(x) + nm.std_normal_cdf(-x) == pytest.approx(
            1.0, abs=1e-15
        )

    def test_cdf_at_196(self):
        assert nm.std_normal_cdf(1.96) == pytest.approx(0.9750, abs=1e-4)
        assert nm.std_normal_cdf(1.96) == pytest.approx(CDF_AT_196, abs=1e-12)

    def test_log_cdf_values(self):
        assert nm.log_std_normal_cdf(0.0) == pytest.approx(LN_HALF, abs=1e-12)
        assert nm.log_std_normal_cdf(-10.0) == pytest.approx(
            LOG_CDF_AT_M10, rel=1e-8
        )
        assert nm.log_std_normal_cdf(5.0) == pytest.approx(LOG_CDF_AT_5, rel=1e-6)

    def test_log_cdf_finite_deep_tail(self):
        # Beyond -38 the asymptotic branch must still give a finite value.
        for x in (-40.0, -100.0, -300.0):
            v = nm.log_std_normal_cdf(x)
            assert np.isfinite(v)
            assert v < -700.0 if x <= -40 else True

    def test_inv_cdf_values(self):
        assert nm.inv_std_normal_cdf(0.5) == pytest.approx(0.0, abs=1e-12)
        assert nm.inv_std_normal_cdf(0.75) == pytest.approx(
            INV_CDF_AT_075, abs=1e-5
        )

    def test_inv_cdf_roundtrip(self):
        p = 0.123
        assert nm.std_normal_cdf(nm.inv_std_normal_cdf(p)) == pytest.approx(
            p, abs=1e-9
        )

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_nonfinite_rejected(self, bad):
        with pytest.raises(DomainError):
            nm.std_normal_pdf(bad)
        with pytest.raises(DomainError):
            nm.std_normal_cdf(bad)
        with pytest.raises(DomainError):
            nm.log_std_normal_cdf(bad)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.4])
    def test_inv_cdf_domain(self, bad):
        with pytest.raises(DomainError):
            nm.inv_std_normal_cdf(bad)

    def test_gaussian_tail_bundle(self):
        gt = nm.gaussian_tail(0.0)
        assert gt.log_cdf == pytest.approx(LN_HALF, abs=1e-12)
        assert gt.mills_ratio == pytest.approx(PDF_AT_0 / 0.5, rel=1e-12)
        assert nm.gaussian_tail(3.0).log_cdf <= 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-38.0, max_value=38.0))
def test_log_cdf_consistent_with_cdf(x):
    cdf = nm.std_normal_cdf(x)
    assert abs(np.exp(nm.log_std_normal_cdf(x)) - cdf) <= 1e-12 * cdf


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=-6.0, max_value=6.0),
    st.floats(min_value=-6.0, max_value=6.0),
)
def test_cdf_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert nm.std_normal_cdf(lo) <= nm.std_normal_cdf(hi)


def test_mills_ratio_positive_and_decreasing():
    xs = np.linspace(-30.0, 8.0, 400)
    r = nm.cdf_ratio(xs)
    assert np.all(r > 0.0)
    assert np.all(np.diff(r) < 0.0)


def test_log_cdf_derivative_matches_ratio():
    # d/dx ln Q(x) == q(x)/Q(x), central differences with step 1e-5.
    xs = np.linspace(-8.0, 8.0, 161)
    h = 1e-5
    fd = (nm.log_std_normal_cdf(xs + h) - nm.log_std_normal_cdf(xs - h)) / (2 * h)
    ratio = nm.cdf_ratio(xs)
    assert np.all(np.abs(fd - ratio) <= 1e-6 * np.abs(ratio))


class TestIntervalProb:
    def test_matches_direct_difference(self):
        a, b = -0.3, 1.2
        expected = nm.std_normal_cdf(b) - nm.std_normal_cdf(a)
        assert np.exp(nm.log_interval_prob(a, b)) == pytest.approx(
            expected, rel=1e-12
        )

    def test_right_tail_no_cancellation(self):
        # Both endpoints deep in the right tail: naive Q(b)-Q(a) is 0-0.
        a, b = 20.0, 21.0
        lp = nm.log_interval_prob(a, b)
        # Mass is dominated by the left endpoint's upper tail.
        assert lp == pytest.approx(nm.log_std_normal_cdf(-a), abs=1.0)
        assert np.isfinite(lp)

    def test_symmetry(self):
        # Q(b)-Q(a) == Q(-a)-Q(-b)
        assert nm.log_interval_prob(-2.0, 0.5) == pytest.approx(
            nm.log_interval_prob(-0.5, 2.0), rel=1e-12
        )

    def test_floor_applies(self):
        lp = nm.log_interval_prob(500.0, 501.0, floor=nm.LOG_PROB_FLOOR)
        assert lp == nm.LOG_PROB_FLOOR

    def test_rejects_bad_order(self):
        with pytest.raises(DomainError):
            nm.log_interval_prob(1.0, 1.0)


class TestTruncatedMean:
    def test_no_truncation(self):
        assert nm.truncated_gaussian_mean(
            1.3, 0.4, -np.inf, np.inf
        ) == pytest.approx(1.3, abs=1e-12)

    def test_symmetric_truncation(self):
        assert nm.truncated_gaussian_mean(0.0, 1.0, -0.8, 0.8) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_half_normal_vs_rejection_oracle(self):
        val = nm.truncated_gaussian_mean(0.0, 1.0, 0.0, np.inf)
        assert val == pytest.approx(HALF_NORMAL_MEAN_MC, abs=1e-3)

    def test_strictly_inside_interval(self):
        for lo, hi in [(-1.0, 2.0), (5.0, 6.0), (-9.0, -8.5)]:
            v = nm.truncated_gaussian_mean(0.0, 1.0, lo, hi)
            assert lo < v < hi

    def test_monotone_in_center(self):
        centers = np.linspace(-3.0, 3.0, 31)
        vals = [nm.truncated_gaussian_mean(c, 0.7, -1.0, 1.5) for c in centers]
        assert np.all(np.diff(vals) > 0.0)

    def test_degenerate_interval_raises_with_midpoint(self):
        with pytest.raises(DegenerateIntervalError) as exc:
            nm.truncated_gaussian_mean(0.0, 1.0, 60.0, 61.0)
        assert exc.value.midpoint is not None

    def test_matches_rejection_sampling(self):
        # Reduced-scale version of the oracle sweep; the full 50-tuple, 1e6
        # sample run lives in the acceptance suite.
        rng = np.random.default_rng(7)
        for _ in range(10):
            c = rng.uniform(-2, 2)
            s = rng.uniform(0.3, 2.0)
            lo = c + s * rng.uniform(-2.5, 0.5)
            hi = lo + s * rng.uniform(0.5, 3.0)
            draws = rng.normal(c, s, size=200_000)
            kept = draws[(draws >= lo) & (draws <= hi)]
            assert kept.size > 50
            mc = kept.mean()
            se = kept.std(ddof=1) / np.sqrt(kept.size)
            assert abs(nm.truncated_gaussian_mean(c, s, lo, hi) - mc) <= 4 * se

    def test_vectorized_matches_scalar(self):
        cs = np.array([-0.5, 0.0, 1.2])
        out = nm.truncated_gaussian_mean(cs, 1.0, -1.0, 2.0)
        for i, c in enumerate(cs):
            assert out[i] == pytest.approx(
                nm.truncated_gaussian_mean(float(c), 1.0, -1.0, 2.0), rel=1e-14
            )


class TestTruncatedVariance:
    def test_no_truncation(self):
        assert nm.truncated_gaussian_variance(
            0.3, 1.7, -np.inf, np.inf
        ) == pytest.approx(1.7**2, rel=1e-10)

    def test_truncation_reduces_variance(self):
        full = 1.0
        assert nm.truncated_gaussian_variance(0.0, 1.0, -1.0, 1.0) < full

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        draws = rng.normal(0.4, 1.3, size=400_000)
        kept = draws[(draws >= -0.5) & (draws <= 2.0)]
        mc = kept.var(ddof=1)
        val = nm.truncated_gaussian_variance(0.4, 1.3, -0.5, 2.0)
        assert val == pytest.approx(mc, rel=0.02)
