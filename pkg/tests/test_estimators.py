"""Tests for qmimo.estimators."""

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from qmimo import bounds as bd
from qmimo import estimators as est
from qmimo.errors import (
    ConfigError,
    DegenerateEstimateError,
    DomainError,
    IdentifiabilityError,
    ShapeError,
    SingularPilotError,
    UnsupportedConfigError,
)
from qmimo.quantizers import (
    QuantizerSpec,
    default_input_power,
    labels_from_bits,
    quantize_block,
)
from qmimo.signal_model import (
    SystemConfig,
    draw_channel,
    draw_noise,
    draw_pilots,
    draw_symbols,
    complex_to_real_vec,
    make_constellation,
    substream,
    to_bivariate_real,
)

T_SPEC = QuantizerSpec.symmetric("ternary", 1.0)

# Closed-form oracle for bit frequencies (3/4, 1/4) in both groups with
# tau = -+1: theta = invPhi(3/4) = 0.674489750196, sigma = sqrt2 / theta.
FROZEN_SIGMA_31 = 2.0967161650150614


def bit_block(Xbar, gbar, cfg, spec, rng):
    """Quantize Xbar @ gbar with fresh complex noise from rng."""
    T = Xbar.shape[0] // 2
    n = complex_to_real_vec(draw_noise(cfg, (T,), rng))
    if spec.kind != "ternary":
        n = np.stack([n, complex_to_real_vec(draw_noise(cfg, (T,), rng))], axis=1)
    return quantize_block(Xbar @ gbar, n, spec)


def labeled_block(Xbar, gbar, cfg, spec, rng):
    """Labeled (complex) quantizer output column-stacked back to (T,)."""
    T = Xbar.shape[0] // 2
    n = complex_to_real_vec(draw_noise(cfg, (T,), rng))
    lab = labels_from_bits(quantize_block(Xbar @ gbar, n, spec), spec)
    return lab[:T] + 1j * lab[T:]


def group_rows(counts):
    """Ternary bit rows with the given (low, middle, high) pattern counts."""
    return (
        [[0, 0]] * counts[0] + [[1, 0]] * counts[1] + [[1, 1]] * counts[2]
    )


class TestSolverOptions:
    def test_validation(self):
        with pytest.raises(ConfigError):
            est.SolverOptions(max_newton_iters=0)
        with pytest.raises(ConfigError):
            est.SolverOptions(grad_tol=0.0)
        with pytest.raises(ConfigError):
            est.SolverOptions(posterior_prune_tol=1.0)
        with pytest.raises(ConfigError):
            est.SolverOptions(sigma_floor=2.0, sigma_ceiling=1.0)


class TestNewtonRaphson:
    def test_constant_outcome_raises(self):
        Z = np.tile([1, 1], (40, 1)).astype(np.uint8)
        Xb = to_bivariate_real(np.ones((1, 20), dtype=complex))
        with pytest.raises(IdentifiabilityError):
            est.newton_raphson_ml(Z, Xb, T_SPEC)

    def test_sign_only_outcomes_raise(self):
        # mixed saturated patterns but no middle rows: sigma unidentifiable
        Z = np.array(([[0, 0]] * 20 + [[1, 1]] * 20), dtype=np.uint8)
        Xb = to_bivariate_real((1 + 1j) * np.ones((1, 20), dtype=complex))
        with pytest.raises(IdentifiabilityError):
            est.newton_raphson_ml(Z, Xb, T_SPEC)

    def test_row_count_checked(self):
        Z = np.array(group_rows((1, 2, 1)), dtype=np.uint8)
        with pytest.raises(ShapeError):
            est.newton_raphson_ml(Z, np.ones((6, 2)), T_SPEC)

    def test_matches_closed_form_when_groups_imply_equal_scale(self):
        # identical pattern counts in both real dimensions make the two
        # group-wise scale estimates coincide, so joint ML and the
        # frequency-inversion closed form solve the same equations
        Z = np.array(
            group_rows((50, 120, 30)) + group_rows((50, 120, 30)),
            dtype=np.uint8,
        )
        Tp = 200
        Xb = to_bivariate_real(np.full((1, Tp), 1.0 + 1.0j))
        rc = est.siso_ml_closed_form(Z, -1.0, 1.0, 1.0, Tp)
        rn = est.newton_raphson_ml(Z, Xb, T_SPEC)
        assert rn.converged
        assert rn.gbar_hat == pytest.approx(rc.gbar_hat, abs=1e-6)
        assert rn.sigma_hat == pytest.approx(rc.sigma_hat, abs=1e-6)

    def test_solution_is_stationary(self):
        Z = np.array(
            group_rows((50, 120, 30)) + group_rows((40, 110, 50)),
            dtype=np.uint8,
        )
        Xb = to_bivariate_real(np.full((1, 200), 1.0 + 1.0j))
        r = est.newton_raphson_ml(Z, Xb, T_SPEC)
        assert r.converged

        def llf(vs1, vs2, xi):
            eta = bd.ParameterVector.from_reparam(np.array([vs1, vs2]), xi)
            return bd.llf_ternary(Z, Xb, eta, T_SPEC)

        p = np.array([*(r.gbar_hat / r.sigma_hat), 1.0 / r.sigma_hat])
        h = 1e-5
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (llf(*(p + e)) - llf(*(p - e))) / (2 * h)
            assert abs(fd) < 5e-5

    def test_llf_trace_increases(self):
        Z = np.array(
            group_rows((50, 120, 30)) + group_rows((40, 110, 50)),
            dtype=np.uint8,
        )
        Xb = to_bivariate_real(np.full((1, 200), 1.0 + 1.0j))
        r = est.newton_raphson_ml(Z, Xb, T_SPEC)
        assert np.all(np.diff(r.llf_trace) >= -1e-9)

    def test_efficiency_near_crlb(self):
        # K=2, long pilots: empirical MSE of the per-antenna ML within 20%
        # of the unknown-sigma bound (the tight margin is checked at the
        # acceptance level with more trials)
        Ps = 10**0.5
        cfg = SystemConfig(
            num_bs_antennas=1,
            num_users=2,
            pilot_len=2000,
            symbol_power=Ps,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        rng = substream(777, 0)
        H = draw_channel(cfg, rng)
        g = np.concatenate([H[0].real, H[0].imag])
        Xb = to_bivariate_real(draw_pilots(cfg, rng))
        eta = bd.ParameterVector(gbar=g, sigma=1.0)
        crlb = bd.crlb_pa(bd.fim_ternary(Xb, eta, T_SPEC)).channel_mse_bound
        errs = []
        for tr in range(150):
            Z = bit_block(Xb, g, cfg, T_SPEC, substream(777, 1, tr))
            r = est.newton_raphson_ml(Z, Xb, T_SPEC)
            errs.append(np.sum((r.gbar_hat - g) ** 2))
        ratio = np.mean(errs) / crlb
        assert 0.8 < ratio < 1.2


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-2.0, max_value=2.0), min_size=6, max_size=6
    ),
    st.floats(min_value=0.3, max_value=2.5),
    st.floats(min_value=0.3, max_value=2.5),
)
def test_reparameterized_llf_midpoint_concave(vals, xi_a, xi_b):
    # concavity in phi = [varsigma; xi] underwrites the global Newton
    # convergence claim; check the midpoint inequality on random segments
    Z = np.array(group_rows((2, 3, 1)) + group_rows((1, 3, 2)), dtype=np.uint8)
    Xb = to_bivariate_real(np.full((1, 6), 1.0 + 1.0j))

    def llf(vs, xi):
        eta = bd.ParameterVector.from_reparam(np.asarray(vs), xi)
        return bd.llf_ternary(Z, Xb, eta, T_SPEC)

    a = (np.array(vals[:2]), xi_a)
    b = (np.array(vals[2:4]), xi_b)
    mid = (0.5 * (a[0] + b[0]), 0.5 * (xi_a + xi_b))
    assert llf(*mid) >= 0.5 * (llf(*a) + llf(*b)) - 1e-9


class TestSisoClosedForm:
    def test_frozen_bit_frequency_example(self):
        # both real dimensions see frequencies (3/4, 1/4): level estimate 0,
        # scale sqrt2 * 2 / (2 invPhi(3/4))
        Z = np.array([[1, 1], [1, 0], [1, 0], [0, 0]] * 2, dtype=np.uint8)
        r = est.siso_ml_closed_form(Z, -1.0, 1.0, 1.0, 4)
        assert r.gbar_hat == pytest.approx([0.0, 0.0], abs=1e-12)
        assert r.sigma_hat == pytest.approx(FROZEN_SIGMA_31, rel=1e-12)
        assert r.converged

    def test_balanced_frequencies_degenerate(self):
        Z = np.array([[1, 1], [1, 1], [0, 0], [0, 0]] * 2, dtype=np.uint8)
        with pytest.raises(DegenerateEstimateError):
            est.siso_ml_closed_form(Z, -1.0, 1.0, 1.0, 4)

    def test_threshold_order_checked(self):
        Z = np.array([[1, 1], [1, 0], [1, 0], [0, 0]] * 2, dtype=np.uint8)
        with pytest.raises(DegenerateEstimateError):
            est.siso_ml_closed_form(Z, 1.0, -1.0, 1.0, 4)

    def test_row_count_checked(self):
        Z = np.array([[1, 0]] * 6, dtype=np.uint8)
        with pytest.raises(ShapeError):
            est.siso_ml_closed_form(Z, -1.0, 1.0, 1.0, 4)

    def test_consistency_large_sample(self):
        g = np.array([0.3, -0.5])
        Tp = 100_000
        cfg = SystemConfig(
            num_bs_antennas=1,
            num_users=1,
            pilot_len=Tp,
            symbol_power=1.0,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        Xb = to_bivariate_real(np.full((1, Tp), 1.0 + 1.0j))
        Z = bit_block(Xb, g, cfg, T_SPEC, substream(32, 0))
        r = est.siso_ml_closed_form(Z, -1.0, 1.0, 1.0, Tp)
        var, _ = bd.crlb_siso_via_fim(g, 1.0, -1.0, 1.0, 1.0, Tp, "ternary")
        assert np.all(np.abs(r.gbar_hat - g) < 3.0 * np.sqrt(var))
        assert abs(r.sigma_hat - 1.0) < 0.01


class TestEmFamily:
    def test_pilot_only_single_antenna_matches_newton(self):
        cfg = SystemConfig(
            num_bs_antennas=1,
            num_users=1,
            pilot_len=40,
            data_len=0,
            symbol_power=1.0,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        rng = substream(33, 0)
        H = draw_channel(cfg, rng)
        Xp = draw_pilots(cfg, rng)
        Xb = to_bivariate_real(Xp)
        g = np.concatenate([H[0].real, H[0].imag])
        Z = bit_block(Xb, g, cfg, T_SPEC, rng)
        rn = est.newton_raphson_ml(Z, Xb, T_SPEC)
        rg = est.gpem_deterministic(
            Z.zbar[None],
            np.zeros((1, 0, 2), dtype=np.uint8),
            Xp,
            cfg,
            T_SPEC,
            group_count=1,
        )
        # no data block: the M-step is exactly the pilot ML problem
        assert rg.gbar_hat[0] == pytest.approx(rn.gbar_hat, abs=1e-9)
        assert rg.sigma_hat == pytest.approx(rn.sigma_hat, abs=1e-9)

    def test_group_counts_monotone_and_accurate(self):
        # thresholds at the per-dimension received RMS keep every antenna's
        # scale identifiable; all group counts must then track the channel
        Ps = 10.0
        M, K = 16, 2
        cfg = SystemConfig(
            num_bs_antennas=M,
            num_users=K,
            pilot_len=30,
            data_len=30,
            symbol_power=Ps,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        spec = QuantizerSpec.symmetric(
            "ternary", float(np.sqrt((Ps * K + 1.0) / 2.0))
        )
        rng = substream(781, 0)
        H = draw_channel(cfg, rng)
        Xp = draw_pilots(cfg, rng, orthogonal=True)
        Xd = draw_symbols(cfg, cfg.data_len, rng)
        Xbp, Xbd = to_bivariate_real(Xp), to_bivariate_real(Xd)
        G = np.stack(
            [np.concatenate([H[m].real, H[m].imag]) for m in range(M)]
        )
        Zp = np.stack(
            [bit_block(Xbp, G[m], cfg, spec, rng).zbar for m in range(M)]
        )
        Zd = np.stack(
            [bit_block(Xbd, G[m], cfg, spec, rng).zbar for m in range(M)]
        )
        den = np.sum(np.abs(H) ** 2)
        for N, cap in ((1, 0.05), (2, 0.05), (16, 0.12)):
            r = est.gpem_deterministic(Zp, Zd, Xp, cfg, spec, group_count=N)
            assert np.all(np.diff(r.llf_trace) >= -1e-9)
            nmse = np.sum(np.abs(r.H_hat - H) ** 2) / den
            assert nmse < cap

    def test_noiseless_limit_detection_exact(self):
        # SNR 30 dB, QPSK: decisions must be exact essentially always
        Ps = 10**3.0
        cfg = SystemConfig(
            num_bs_antennas=8,
            num_users=1,
            pilot_len=8,
            data_len=10,
            symbol_power=Ps,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        hits = tot = 0
        for tr in range(100):
            rng = substream(778, tr)
            H = draw_channel(cfg, rng)
            Xp = draw_pilots(cfg, rng)
            Xd = draw_symbols(cfg, cfg.data_len, rng)
            Xbp, Xbd = to_bivariate_real(Xp), to_bivariate_real(Xd)
            Zp = np.stack(
                [
                    bit_block(
                        Xbp,
                        np.concatenate([H[m].real, H[m].imag]),
                        cfg,
                        T_SPEC,
                        rng,
                    ).zbar
                    for m in range(8)
                ]
            )
            Zd = np.stack(
                [
                    bit_block(
                        Xbd,
                        np.concatenate([H[m].real, H[m].imag]),
                        cfg,
                        T_SPEC,
                        rng,
                    ).zbar
                    for m in range(8)
                ]
            )
            r = est.em_deterministic(Zp, Zd, Xp, cfg, T_SPEC)
            hits += int(np.sum(np.abs(r.Xd_hat - Xd) < 1e-9))
            tot += Xd.size
        assert hits / tot >= 0.99

    def test_group_count_exceeds_antennas(self):
        cfg = SystemConfig(
            num_bs_antennas=1, num_users=1, pilot_len=4, data_len=0
        )
        Zp = np.array(group_rows((2, 4, 2)), dtype=np.uint8)[None]
        Zd = np.zeros((1, 0, 2), dtype=np.uint8)
        Xp = np.ones((1, 4), dtype=complex)
        with pytest.raises(ConfigError):
            est.gpem_deterministic(Zp, Zd, Xp, cfg, T_SPEC, group_count=2)

    def test_candidate_enumeration_cap(self):
        cfg = SystemConfig(
            num_bs_antennas=1,
            num_users=5,
            pilot_len=5,
            data_len=1,
            constellation="qam16",
        )
        Zp = np.array(group_rows((3, 4, 3)), dtype=np.uint8)[None]
        Zd = np.array([[1, 0], [1, 0]], dtype=np.uint8)[None]
        Xp = np.ones((5, 5), dtype=complex)
        with pytest.raises(UnsupportedConfigError):
            est.em_deterministic(Zp, Zd, Xp, cfg, T_SPEC)


class TestZfAndDetection:
    def test_zf_recovers_channel_without_quantization(self):
        rng = np.random.default_rng(10)
        H = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
        X = rng.normal(size=(2, 8)) + 1j * rng.normal(size=(2, 8))
        assert est.zf_init(H @ X, X) == pytest.approx(H, abs=1e-10)

    def test_zf_rejects_singular_pilots(self):
        X = np.ones((2, 6), dtype=complex)  # duplicate rows
        Z = np.ones((3, 6), dtype=complex)
        with pytest.raises(SingularPilotError):
            est.zf_init(Z, X)

    def test_zf_shape_mismatch(self):
        with pytest.raises(ShapeError):
            est.zf_init(np.ones((3, 5), dtype=complex), np.ones((2, 6)))

    def test_detect_exact_symbols(self):
        const = make_constellation("qpsk", 2.0)
        soft = const.symbols[np.array([[0, 2], [3, 1]])]
        out = est.detect_symbols(soft + 1e-12, const)
        assert out == pytest.approx(soft)

    def test_detect_tie_takes_lowest_index(self):
        const = make_constellation("qpsk", 1.0)
        out = est.detect_symbols(np.array([0.0 + 0.0j]), const)
        assert out[0] == const.symbols[0]


class TestViem:
    @staticmethod
    def _instance(tr):
        Ps = 10.0
        cfg = SystemConfig(
            num_bs_antennas=8,
            num_users=2,
            pilot_len=20,
            data_len=20,
            symbol_power=Ps,
            noise_variance=1.0,
            channel_kind="gaussian_prior",
        )
        pw = default_input_power(2, Ps, 1.0)
        spec = QuantizerSpec.symmetric(
            "ternary", 1.0, label_delta=1.0, input_power=pw
        )
        rng = substream(990, tr)
        H = draw_channel(cfg, rng)
        Xp = draw_pilots(cfg, rng)
        Xd = draw_symbols(cfg, cfg.data_len, rng)
        Xbp, Xbd = to_bivariate_real(Xp), to_bivariate_real(Xd)
        mk = lambda Xb: np.stack(  # noqa: E731
            [
                labeled_block(
                    Xb, np.concatenate([H[m].real, H[m].imag]), cfg, spec, rng
                )
                for m in range(8)
            ]
        )
        return cfg, spec, H, Xp, mk(Xbp), mk(Xbd)

    def test_refines_zf_and_joint_beats_pilot_only(self):
        nz, npa, njpd = [], [], []
        for tr in range(10):
            cfg, spec, H, Xp, Zp, Zd = self._instance(tr)
            den = np.sum(np.abs(H) ** 2)
            Hz = est.zf_init(Zp, Xp)
            ra = est.viem_random(
                Zp, Zd, Xp, cfg, spec, mode="pa", rng=substream(991, tr)
            )
            rj = est.viem_random(
                Zp, Zd, Xp, cfg, spec, mode="jpd", rng=substream(991, tr)
            )
            assert ra.Xd_hat is not None  # pilot-only mode still detects
            nz.append(np.sum(np.abs(Hz - H) ** 2) / den)
            npa.append(np.sum(np.abs(ra.H_hat - H) ** 2) / den)
            njpd.append(np.sum(np.abs(rj.H_hat - H) ** 2) / den)
        db = lambda v: 10 * np.log10(np.mean(v))  # noqa: E731
        # measured: ZF -8.65, pilot-only -10.58, joint -12.15 dB
        assert db(npa) <= db(nz) - 1.0
        assert db(njpd) <= db(npa) - 1.0

    def test_converged_point_is_stable_under_one_more_iteration(self):
        cfg, spec, H, Xp, Zp, Zd = self._instance(0)
        opts = replace(est.SolverOptions(), max_em_iters=800)
        rA = est.viem_random(
            Zp, Zd, Xp, cfg, spec, opts, mode="pa", sigma_init=1.0
        )
        assert rA.converged
        optsB = replace(
            opts, max_em_iters=rA.iterations + 1, em_rel_tol=1e-30
        )
        rB = est.viem_random(
            Zp, Zd, Xp, cfg, spec, optsB, mode="pa", sigma_init=1.0
        )
        rel = np.linalg.norm(rB.H_hat - rA.H_hat) / np.linalg.norm(rA.H_hat)
        assert rel <= 10 * est.SolverOptions().em_rel_tol

    def test_deterministic_given_sigma_init(self):
        cfg, spec, H, Xp, Zp, Zd = self._instance(1)
        r1 = est.viem_random(Zp, Zd, Xp, cfg, spec, mode="jpd", sigma_init=1.0)
        r2 = est.viem_random(Zp, Zd, Xp, cfg, spec, mode="jpd", sigma_init=1.0)
        assert np.array_equal(r1.gbar_hat, r2.gbar_hat)
        assert r1.sigma_hat == r2.sigma_hat

    def test_mode_and_spec_validated(self):
        cfg, spec, H, Xp, Zp, Zd = self._instance(2)
        with pytest.raises(DomainError):
            est.viem_random(Zp, Zd, Xp, cfg, spec, mode="both")
        with pytest.raises(DomainError):
            est.viem_random(Zp, Zd, Xp, cfg, T_SPEC, mode="pa")


class TestPosteriorInternals:
    def test_channel_posterior_scalar(self):
        Omega, m = est._channel_posterior(
            np.array([[1.0 + 0j]]), np.array([2.0 + 0j]), 1.0, np.array([1.0])
        )
        assert Omega[0, 0] == pytest.approx(0.5)
        assert m[0] == pytest.approx(1.0)

    def test_lambda_update_floor(self):
        lam = est._lambda_update(
            np.zeros((1, 2, 2), dtype=complex), np.zeros((1, 2), dtype=complex)
        )
        assert lam == pytest.approx(np.full((1, 2), 1e-10))
        lam = est._lambda_update(
            np.eye(2, dtype=complex)[None], np.zeros((1, 2), dtype=complex)
        )
        assert lam == pytest.approx(np.ones((1, 2)))

    def test_safe_truncated_moments_normal_case(self):
        from qmimo import numerics as nm

        c = np.array([0.3])
        lo, hi = np.array([-1.0]), np.array([0.5])
        mean, var = est._safe_truncated_moments(c, 0.7, lo, hi)
        assert mean[0] == pytest.approx(
            nm.truncated_gaussian_mean(c, 0.7, lo, hi)[0]
        )
        assert var[0] > 0

    def test_safe_truncated_moments_underflow_fallback(self):
        c = np.array([-100.0, -100.0])
        lo = np.array([5.0, 5.0])
        hi = np.array([6.0, np.inf])
        mean, var = est._safe_truncated_moments(c, 1.0, lo, hi)
        assert mean == pytest.approx([5.5, 5.0])
        assert var == pytest.approx([0.0, 0.0])
