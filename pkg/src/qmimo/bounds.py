"""Log-likelihoods, Fisher information matrices and CRLB variants.

Parameterizations
-----------------
Per antenna the estimation target is eta = [gbar; sigma] with gbar the
2K-dimensional bivariate-real channel and sigma the noise scale. Stacked
over antennas the target is chi = [gbar_1; ...; gbar_M; sigma]
(2MK+1 coordinates).

Standardized arguments are [A]_{i,j} = sqrt(2) ([Xbar gbar]_i - tau_j) / sigma
for the 2T real dimensions i and the two thresholds j; column 1 always
dominates column 2 since tau1 < tau2.

All probability work happens in the log domain. Middle-interval
probabilities are floored at 1e-300; a row whose middle region underflows
degrades to its limiting one-bit information instead of producing NaN.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numerics as nm
from . import signal_model as sm
from .errors import (
    DegenerateThresholdError,
    DomainError,
    InsufficientSamplesError,
    PreconditionError,
    QmimoError,
    ShapeError,
    SingularInformationError,
    UnsupportedConfigError,
)
from .quantizers import QuantizerSpec

__all__ = [
    "ParameterVector",
    "ChiVector",
    "StandardizedArgs",
    "InfoMatrix",
    "CrlbResult",
    "standardized_args",
    "llf_po",
    "llf_ternary",
    "score_po",
    "score_ternary",
    "fim_po",
    "fim_ternary",
    "crlb_pa",
    "crlb_channel_dual_path",
    "siso_theta",
    "siso_group_fim",
    "crlb_siso_closed_form",
    "crlb_siso_via_fim",
    "hybrid_crlb",
    "assemble_chi_fim",
    "fim_npa",
    "fim_jpd",
    "prob_distinct_regions",
    "fullres_crlb_trace",
    "pattern_tables",
]

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class ParameterVector:
    """Per-antenna parameter eta = [gbar; sigma] with its reparameterized
    form (varsigma = gbar/sigma, xi = 1/sigma) available on demand."""

    gbar: np.ndarray
    sigma: float

    def __post_init__(self):
        g = np.asarray(self.gbar, dtype=float).reshape(-1)
        object.__setattr__(self, "gbar", g)
        if g.size % 2 != 0 or g.size == 0:
            raise ShapeError("gbar must have even positive length 2K")
        if not np.all(np.isfinite(g)):
            raise DomainError("gbar must be finite")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError("sigma must be positive and finite")

    @property
    def varsigma(self) -> np.ndarray:
        return self.gbar / self.sigma

    @property
    def xi(self) -> float:
        return 1.0 / self.sigma

    @classmethod
    def from_reparam(cls, varsigma: np.ndarray, xi: float) -> "ParameterVector":
        if not xi > 0:
            raise DomainError("xi must be positive")
        return cls(gbar=np.asarray(varsigma, dtype=float) / xi, sigma=1.0 / xi)


@dataclass(frozen=True)
class ChiVector:
    """Stacked parameter chi = [gbar_1; ...; gbar_M; sigma]."""

    gbars: np.ndarray  # (M, 2K)
    sigma: float

    def __post_init__(self):
        g = np.asarray(self.gbars, dtype=float)
        if g.ndim != 2 or g.shape[1] % 2 != 0:
            raise ShapeError("gbars must have shape (M, 2K)")
        object.__setattr__(self, "gbars", g)
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError("sigma must be positive and finite")

    @property
    def num_antennas(self) -> int:
        return self.gbars.shape[0]

    @property
    def dim(self) -> int:
        return self.gbars.size + 1

    def antenna(self, m: int) -> ParameterVector:
        return ParameterVector(gbar=self.gbars[m], sigma=self.sigma)


@dataclass(frozen=True)
class StandardizedArgs:
    """A matrix of standardized threshold arguments, columns (tau1, tau2)."""

    A: np.ndarray  # (2T, 2)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[1] != 2:
            raise ShapeError("A must have shape (2T, 2)")
        if not np.all(A[:, 0] > A[:, 1]):
            raise DomainError("column ordering [A]_{i,1} > [A]_{i,2} violated")
        object.__setattr__(self, "A", A)


@dataclass(frozen=True)
class InfoMatrix:
    """Symmetric PSD information matrix with provenance kind."""

    matrix: np.ndarray
    kind: str
    std_err: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        F = np.asarray(self.matrix, dtype=float)
        if F.ndim != 2 or F.shape[0] != F.shape[1]:
            raise ShapeError("information matrix must be square")
        scale = max(1.0, float(np.max(np.abs(F))))
        if np.max(np.abs(F - F.T)) > 1e-10 * scale:
            raise QmimoError("information matrix is not symmetric")
        eig = np.linalg.eigvalsh(F)
        if eig.min() < -1e-8 * scale:
            raise QmimoError(
                f"information matrix has negative eigenvalue {eig.min():g}"
            )
        object.__setattr__(self, "matrix", F)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class CrlbResult:
    """CRLB summary: channel-block trace of the full inverse, the full
    inverse itself, and the known-sigma companion bound."""

    channel_mse_bound: float
    full_matrix: np.ndarray | None
    known_sigma_bound: float


def standardized_args(
    Xbar: np.ndarray, eta: ParameterVector, spec: QuantizerSpec
) -> StandardizedArgs:
    """[A]_{i,j} = sqrt(2) ([Xbar gbar]_i - tau_j) / sigma."""
    Xbar = np.asarray(Xbar, dtype=float)
    if Xbar.ndim != 2 or Xbar.shape[1] != eta.gbar.size:
        raise ShapeError(
            f"Xbar columns ({Xbar.shape}) must match gbar length {eta.gbar.size}"
        )
    s = Xbar @ eta.gbar
    taus = np.array([spec.tau1, spec.tau2])
    A = np.sqrt(2.0) * (s[:, None] - taus[None, :]) / eta.sigma
    return StandardizedArgs(A=A)


# ---------------------------------------------------------------------------
# Per-row outcome tables shared by likelihoods, scores and the EM machinery.
# Pattern index conventions:
#   ternary:          0 -> [0,0], 1 -> [1,0], 2 -> [1,1]   (index = z1+z2)
#   parallel_one_bit: index = 2*z1 + z2 over the four bit pairs
# ---------------------------------------------------------------------------


def pattern_tables(A1, A2, kind: str, order: int = 1, logp_floor=nm.LOG_PROB_FLOOR):
    """Log-probabilities and d/dA derivatives for every outcome pattern.

    Returns dict with arrays shaped like broadcast(A1, A2) plus a trailing
    pattern axis: 'logp' (order 0), plus 'd1', 'd2' (order 1), plus 'd11',
    'd12', 'd22' (order 2). The middle-interval log-probability is floored
    at logp_floor; pass None for the exact value (solvers need the true
    quadratic tail penalty). Derivative tables keep an internal floor so
    they stay finite either way.
    """
    A1 = np.asarray(A1, dtype=float)
    A2 = np.asarray(A2, dtype=float)
    A1, A2 = np.broadcast_arrays(A1, A2)
    if kind == "ternary":
        lp0 = nm.log_std_normal_cdf(-A1)
        lp2 = nm.log_std_normal_cdf(A2)
        lpD = nm.log_interval_prob(A2, A1, floor=logp_floor)
        out = {"logp": np.stack([lp0, lpD, lp2], axis=-1)}
        if order >= 1:
            lpDf = np.maximum(lpD, nm.LOG_PROB_FLOOR)
            lq1 = nm.log_std_normal_pdf(A1)
            lq2 = nm.log_std_normal_pdf(A2)
            r0 = nm.cdf_ratio(-A1)
            r2 = nm.cdf_ratio(A2)
            q1_D = np.exp(lq1 - lpDf)
            q2_D = np.exp(lq2 - lpDf)
            zeros = np.zeros_like(A1)
            out["d1"] = np.stack([-r0, q1_D, zeros], axis=-1)
            out["d2"] = np.stack([zeros, -q2_D, r2], axis=-1)
            if order >= 2:
                out["d11"] = np.stack(
                    [-r0 * (r0 - A1), -A1 * q1_D - q1_D**2, zeros], axis=-1
                )
                out["d22"] = np.stack(
                    [zeros, A2 * q2_D - q2_D**2, -r2 * (A2 + r2)], axis=-1
                )
                out["d12"] = np.stack([zeros, q1_D * q2_D, zeros], axis=-1)
        return out
    if kind == "parallel_one_bit":
        # independent branches: pattern (z1, z2) factorizes
        lc1p = nm.log_std_normal_cdf(A1)
        lc1m = nm.log_std_normal_cdf(-A1)
        lc2p = nm.log_std_normal_cdf(A2)
        lc2m = nm.log_std_normal_cdf(-A2)
        out = {
            "logp": np.stack(
                [lc1m + lc2m, lc1m + lc2p, lc1p + lc2m, lc1p + lc2p], axis=-1
            )
        }
        if order >= 1:
            r1p = nm.cdf_ratio(A1)
            r1m = nm.cdf_ratio(-A1)
            r2p = nm.cdf_ratio(A2)
            r2m = nm.cdf_ratio(-A2)
            out["d1"] = np.stack([-r1m, -r1m, r1p, r1p], axis=-1)
            out["d2"] = np.stack([-r2m, r2p, -r2m, r2p], axis=-1)
            if order >= 2:
                zeros = np.zeros_like(A1)
                c1m = -r1m * (r1m - A1)
                c1p = -r1p * (A1 + r1p)
                c2m = -r2m * (r2m - A2)
                c2p = -r2p * (A2 + r2p)
                out["d11"] = np.stack([c1m, c1m, c1p, c1p], axis=-1)
                out["d22"] = np.stack([c2m, c2p, c2m, c2p], axis=-1)
                out["d12"] = np.stack([zeros, zeros, zeros, zeros], axis=-1)
        return out
    raise DomainError(f"unknown quantizer kind {kind!r}")


def pattern_index(zbar: np.ndarray, kind: str) -> np.ndarray:
    """Map bit rows (..., 2) to the pattern index convention above."""
    z = np.asarray(zbar)
    if z.shape[-1] != 2:
        raise ShapeError("bit rows must have trailing dimension 2")
    if kind == "ternary":
        if np.any((z[..., 0] == 0) & (z[..., 1] == 1)):
            raise DomainError("invalid outcome [0,1] for ternary kind")
        return (z[..., 0] + z[..., 1]).astype(np.intp)
    return (2 * z[..., 0] + z[..., 1]).astype(np.intp)


def _zbar_array(zbar) -> np.ndarray:
    z = zbar.zbar if hasattr(zbar, "zbar") else np.asarray(zbar)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ShapeError("zbar must have shape (2T, 2)")
    return z


def llf_po(zbar, Xbar, eta: ParameterVector, spec: QuantizerSpec) -> float:
    """Log-likelihood of the independent-branch model,
    sum_{i,j} ln Q((2 z_{i,j} - 1) [A]_{i,j}).

    Ternary-generated bit rows are admissible here (the model simply never
    produces [0,1] with positive noise correlation).
    """
    z = _zbar_array(zbar)
    A = standardized_args(Xbar, eta, spec).A
    if z.shape[0] != A.shape[0]:
        raise ShapeError("zbar rows must match 2T")
    signs = 2.0 * z.astype(float) - 1.0
    return float(np.sum(nm.log_std_normal_cdf(signs * A)))


def llf_ternary(zbar, Xbar, eta: ParameterVector, spec: QuantizerSpec) -> float:
    """Log-likelihood of the shared-noise (ternary) model.

    Row terms by pattern: ln Q(-A1) for [0,0], ln(Q(A1)-Q(A2)) for [1,0],
    ln Q(A2) for [1,1]. Pattern [0,1] is rejected.
    """
    z = _zbar_array(zbar)
    A = standardized_args(Xbar, eta, spec).A
    if z.shape[0] != A.shape[0]:
        raise ShapeError("zbar rows must match 2T")
    idx = pattern_index(z, "ternary")
    tables = pattern_tables(A[:, 0], A[:, 1], "ternary", order=0)
    return float(
        np.sum(np.take_along_axis(tables["logp"], idx[:, None], axis=-1))
    )


def _grad_vectors(Xbar: np.ndarray, eta: ParameterVector, A: np.ndarray):
    """dA/d eta for both threshold columns: channel part shared, sigma part
    is -A_j/sigma. Returns (V1, V2) with shape (2T, 2K+1)."""
    chan = np.sqrt(2.0) * Xbar / eta.sigma  # (2T, 2K)
    v1 = np.concatenate([chan, (-A[:, 0] / eta.sigma)[:, None]], axis=1)
    v2 = np.concatenate([chan, (-A[:, 1] / eta.sigma)[:, None]], axis=1)
    return v1, v2


def _score_from_tables(zbar, Xbar, eta, spec, kind):
    z = _zbar_array(zbar)
    A = standardized_args(Xbar, eta, spec).A
    idx = pattern_index(z, kind)
    tables = pattern_tables(A[:, 0], A[:, 1], kind)
    d1 = np.take_along_axis(tables["d1"], idx[:, None], axis=-1)[:, 0]
    d2 = np.take_along_axis(tables["d2"], idx[:, None], axis=-1)[:, 0]
    v1, v2 = _grad_vectors(Xbar, eta, A)
    return d1 @ v1 + d2 @ v2


def score_po(zbar, Xbar, eta: ParameterVector, spec: QuantizerSpec) -> np.ndarray:
    """Gradient of llf_po with respect to eta = [gbar; sigma]."""
    return _score_from_tables(zbar, Xbar, eta, spec, "parallel_one_bit")


def score_ternary(
    zbar, Xbar, eta: ParameterVector, spec: QuantizerSpec
) -> np.ndarray:
    """Gradient of llf_ternary with respect to eta = [gbar; sigma]."""
    return _score_from_tables(zbar, Xbar, eta, spec, "ternary")


def _po_lambda(A: np.ndarray) -> np.ndarray:
    """q(A)^2 / (Q(A) Q(-A)), evaluated in the log domain."""
    return np.exp(
        2.0 * nm.log_std_normal_pdf(A)
        - nm.log_std_normal_cdf(A)
        - nm.log_std_normal_cdf(-A)
    )


def _ternary_abd(A1: np.ndarray, A2: np.ndarray):
    """Expected-outer-product coefficients of the ternary per-row FIM:
    a = q1^2 (1/Q(-A1) + 1/D), b = q1 q2 / D, d = q2^2 (1/D + 1/Q(A2)),
    with D = Q(A1) - Q(A2) floored at 1e-300."""
    lq1 = nm.log_std_normal_pdf(A1)
    lq2 = nm.log_std_normal_pdf(A2)
    lD = nm.log_interval_prob(A2, A1, floor=nm.LOG_PROB_FLOOR)
    a = np.exp(2 * lq1 - nm.log_std_normal_cdf(-A1)) + np.exp(2 * lq1 - lD)
    b = np.exp(lq1 + lq2 - lD)
    d = np.exp(2 * lq2 - lD) + np.exp(2 * lq2 - nm.log_std_normal_cdf(A2))
    return a, b, d


def fim_po(Xbar, eta: ParameterVector, spec: QuantizerSpec) -> InfoMatrix:
    """Fisher information of the independent-branch model over eta.

    Sum over rows and thresholds of lambda(A) v v^T with
    lambda = q^2/(Q Q(-.)) and v the gradient of A.
    """
    A = standardized_args(Xbar, eta, spec).A
    v1, v2 = _grad_vectors(np.asarray(Xbar, dtype=float), eta, A)
    lam1 = _po_lambda(A[:, 0])
    lam2 = _po_lambda(A[:, 1])
    F = (v1 * lam1[:, None]).T @ v1 + (v2 * lam2[:, None]).T @ v2
    return InfoMatrix(matrix=0.5 * (F + F.T), kind="deterministic_po")


def fim_ternary(Xbar, eta: ParameterVector, spec: QuantizerSpec) -> InfoMatrix:
    """Fisher information of the shared-noise model over eta, including the
    negative cross terms between the two threshold columns."""
    A = standardized_args(Xbar, eta, spec).A
    v1, v2 = _grad_vectors(np.asarray(Xbar, dtype=float), eta, A)
    a, b, d = _ternary_abd(A[:, 0], A[:, 1])
    F = (
        (v1 * a[:, None]).T @ v1
        - (v1 * b[:, None]).T @ v2
        - (v2 * b[:, None]).T @ v1
        + (v2 * d[:, None]).T @ v2
    )
    return InfoMatrix(matrix=0.5 * (F + F.T), kind="deterministic_t")


def _guarded_inverse(F: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(F)
    scale = float(eigval.max()) if eigval.size else 0.0
    if scale <= 0 or eigval.min() <= 0 or scale / eigval.min() > _COND_LIMIT:
        raise SingularInformationError(
            "information matrix is singular or too ill-conditioned "
            f"(condition limit {_COND_LIMIT:g}); bound unbounded along the "
            "reported null direction",
            null_direction=eigvec[:, int(np.argmin(eigval))],
        )
    return (eigvec / eigval) @ eigvec.T


def crlb_pa(fim: InfoMatrix, require_full: bool = True) -> CrlbResult:
    """Invert a pilot-aided FIM over eta (or chi).

    channel_mse_bound is the trace of the channel block of the full
    (unknown-sigma) inverse; known_sigma_bound inverts the channel block of
    F alone. The unknown-sigma bound always dominates.

    With require_full=False a singular full matrix yields an infinite
    channel bound instead of raising, so the known-sigma bound stays
    reachable when the noise scale carries no information (zero channel).
    """
    F = fim.matrix
    n = F.shape[0]
    chan = slice(0, n - 1)
    try:
        inv_full = _guarded_inverse(F)
        channel_bound = float(np.trace(inv_full[chan, chan]))
    except SingularInformationError:
        if require_full:
            raise
        inv_full = None
        channel_bound = float("inf")
    inv_known = _guarded_inverse(F[chan, chan])
    return CrlbResult(
        channel_mse_bound=channel_bound,
        full_matrix=inv_full,
        known_sigma_bound=float(np.trace(inv_known)),
    )


def crlb_channel_dual_path(fim: InfoMatrix) -> tuple[float, float]:
    """Channel-block trace of the inverse by two independent routes:
    Schur-complement block inversion and the rank-one update identity.
    Used as a cross-check; both must agree to high precision."""
    F = fim.matrix
    n = F.shape[0]
    Fgg = F[: n - 1, : n - 1]
    fgs = F[: n - 1, n - 1]
    fss = F[n - 1, n - 1]
    if fss <= 0:
        raise DomainError("sigma information must be positive")
    # Path 1: invert the Schur complement directly.
    schur = Fgg - np.outer(fgs, fgs) / fss
    path1 = float(np.trace(_guarded_inverse(schur)))
    # Path 2: rank-one update of the channel-block inverse.
    inv_gg = _guarded_inverse(Fgg)
    u = inv_gg @ fgs
    denom = fss - fgs @ u
    if denom <= 0:
        raise DomainError("noise-scale Schur complement must be positive")
    path2 = float(np.trace(inv_gg) + (u @ u) / denom)
    return path1, path2


# ---------------------------------------------------------------------------
# SISO closed forms
# ---------------------------------------------------------------------------


def siso_theta(
    gbar: np.ndarray, sigma: float, tau1: float, tau2: float, symbol_power: float
) -> np.ndarray:
    """Group argument vectors theta_j, shape (2 groups, 2 thresholds).

    With the constant pilot sqrt(Ps)(1+1j), the noiseless real dimensions
    take two values s = sqrt(Ps) (g1 - g2, g1 + g2); each group j has
    theta_j = sqrt(2) (s_j - (tau1, tau2)) / sigma.
    """
    g = np.asarray(gbar, dtype=float).reshape(-1)
    if g.size != 2:
        raise ShapeError("SISO gbar must have length 2")
    if not tau1 < tau2:
        raise DegenerateThresholdError("tau1 < tau2 required")
    s = np.sqrt(symbol_power) * np.array([g[0] - g[1], g[0] + g[1]])
    taus = np.array([tau1, tau2])
    return np.sqrt(2.0) * (s[:, None] - taus[None, :]) / sigma


def _c_factor(x: np.ndarray) -> np.ndarray:
    """c(x) = Q(x) Q(-x) / q(x)^2."""
    return np.exp(
        nm.log_std_normal_cdf(x)
        + nm.log_std_normal_cdf(-x)
        - 2.0 * nm.log_std_normal_pdf(x)
    )


def crlb_siso_closed_form(
    gbar: np.ndarray,
    sigma: float,
    tau1: float,
    tau2: float,
    symbol_power: float,
    pilot_len: int,
    kind: str,
) -> tuple[float, float]:
    """Closed-form per-coefficient CRLBs for the single-antenna single-user
    constant-pilot system. Both bivariate-real coefficients share the same
    bound; the pair is returned for interface symmetry.

    The independent-branch bound is
        sum_j sigma^2 (th_j2^2 c(th_j1) + th_j1^2 c(th_j2))
              / (8 Ps T_p (th_j1 - th_j2)^2)
    and the shared-noise bound subtracts
        prefactor * 2 th_j1 th_j2 Q(-th_j1) Q(th_j2) / (q(th_j1) q(th_j2))
    inside the bracket, so their difference carries the sign of th_j1*th_j2.
    """
    theta = siso_theta(gbar, sigma, tau1, tau2, symbol_power)
    th1, th2 = theta[:, 0], theta[:, 1]
    if np.any(th1 == th2):
        raise DegenerateThresholdError("theta components coincide")
    bracket = th2**2 * _c_factor(th1) + th1**2 * _c_factor(th2)
    if kind == "ternary":
        cross = 2.0 * th1 * th2 * np.exp(
            nm.log_std_normal_cdf(-th1)
            + nm.log_std_normal_cdf(th2)
            - nm.log_std_normal_pdf(th1)
            - nm.log_std_normal_pdf(th2)
        )
        bracket = bracket - cross
    elif kind != "parallel_one_bit":
        raise DomainError(f"unknown quantizer kind {kind!r}")
    pref = sigma**2 / (8.0 * symbol_power * pilot_len * (th1 - th2) ** 2)
    value = float(np.sum(pref * bracket))
    return value, value


def siso_group_fim(theta_j: np.ndarray, pilot_len: int, kind: str) -> np.ndarray:
    """2x2 FIM of one pilot group in theta coordinates.

    theta enters the per-row arguments directly, so the gradient vectors are
    unit vectors and the generic per-row coefficients reduce to this 2x2.
    """
    t1, t2 = float(theta_j[0]), float(theta_j[1])
    if not t1 > t2:
        raise DomainError("theta ordering t1 > t2 violated")
    if kind == "parallel_one_bit":
        return pilot_len * np.diag(
            [_po_lambda(np.array(t1))[()], _po_lambda(np.array(t2))[()]]
        )
    if kind == "ternary":
        a, b, d = _ternary_abd(np.array(t1), np.array(t2))
        return pilot_len * np.array([[a, -b], [-b, d]], dtype=float)
    raise DomainError(f"unknown quantizer kind {kind!r}")


def crlb_siso_via_fim(
    gbar: np.ndarray,
    sigma: float,
    tau1: float,
    tau2: float,
    symbol_power: float,
    pilot_len: int,
    kind: str,
) -> tuple[float, float]:
    """Per-coefficient CRLBs by numerically inverting the per-group 2x2
    FIMs and mapping through the estimator's parameter transform
    (independent path used to validate the closed forms)."""
    theta = siso_theta(gbar, sigma, tau1, tau2, symbol_power)
    var_s = []
    for j in range(2):
        t1, t2 = theta[j]
        F = siso_group_fim(theta[j], pilot_len, kind)
        C = np.linalg.inv(F)
        # s_j = (t1 tau2 - t2 tau1)/(t1 - t2); gradient wrt (t1, t2)
        dt1 = -t2 * (tau2 - tau1) / (t1 - t2) ** 2
        dt2 = t1 * (tau2 - tau1) / (t1 - t2) ** 2
        grad = np.array([dt1, dt2])
        var_s.append(float(grad @ C @ grad))
    # g1 = (s1+s2)/(2 sqrt(Ps)), g2 = (s2-s1)/(2 sqrt(Ps)); groups independent
    value = (var_s[0] + var_s[1]) / (4.0 * symbol_power)
    return value, value


# ---------------------------------------------------------------------------
# Hybrid bound, stacked-parameter FIMs, joint pilot-data information
# ---------------------------------------------------------------------------


def hybrid_crlb(
    cfg: sm.SystemConfig,
    spec: QuantizerSpec,
    num_mc: int,
    rng: np.random.Generator,
    *,
    Xbar: np.ndarray | None = None,
    strict: bool = False,
) -> InfoMatrix:
    """Hybrid information matrix for the Gaussian-prior channel:
    Monte Carlo average of the per-antenna FIM over channel draws plus the
    prior information block diag(I/prior_variance, 0).

    When Xbar is omitted a fresh random pilot block is drawn per channel
    draw, matching the experiment protocol. Entry-wise MC standard errors
    ride along in std_err.
    """
    if cfg.channel_kind != "gaussian_prior":
        raise PreconditionError("hybrid_crlb requires channel_kind=gaussian_prior")
    if num_mc < 100:
        msg = f"hybrid_crlb with num_mc={num_mc} < 100 is unreliable"
        if strict:
            raise InsufficientSamplesError(msg)
        warnings.warn(msg, stacklevel=2)
    fim_fn = fim_ternary if spec.kind == "ternary" else fim_po
    n = 2 * cfg.num_users + 1
    acc = np.zeros((n, n))
    acc_sq = np.zeros((n, n))
    for _ in range(num_mc):
        if Xbar is None:
            Xb = sm.to_bivariate_real(sm.draw_pilots(cfg, rng))
        else:
            Xb = Xbar
        h = sm.draw_channel(cfg, rng)[0]  # single antenna draw
        eta = ParameterVector(gbar=sm.complex_to_real_vec(h), sigma=np.sqrt(cfg.noise_variance))
        F = fim_fn(Xb, eta, spec).matrix
        acc += F
        acc_sq += F * F
    mean = acc / num_mc
    var = np.maximum(acc_sq / num_mc - mean**2, 0.0)
    std_err = np.sqrt(var / num_mc)
    prior = np.zeros((n, n))
    prior[: n - 1, : n - 1] = np.eye(n - 1) / cfg.prior_variance
    H = mean + prior
    return InfoMatrix(matrix=0.5 * (H + H.T), kind="hybrid", std_err=std_err)


def assemble_chi_fim(per_antenna: list[InfoMatrix], kind: str) -> InfoMatrix:
    """Stack per-antenna FIMs over eta_m into the chi FIM: channel blocks on
    the diagonal, sigma couplings in the last row/column, sigma information
    summed."""
    if not per_antenna:
        raise ShapeError("need at least one antenna FIM")
    k2 = per_antenna[0].dim - 1
    M = len(per_antenna)
    n = M * k2 + 1
    F = np.zeros((n, n))
    for m, fm in enumerate(per_antenna):
        if fm.dim != k2 + 1:
            raise ShapeError("antenna FIMs must share dimensions")
        blk = slice(m * k2, (m + 1) * k2)
        F[blk, blk] = fm.matrix[:k2, :k2]
        F[blk, n - 1] = fm.matrix[:k2, k2]
        F[n - 1, blk] = fm.matrix[k2, :k2]
        F[n - 1, n - 1] += fm.matrix[k2, k2]
    return InfoMatrix(matrix=F, kind=kind)


def _column_candidate_tables(
    cand: np.ndarray, chi: ChiVector, spec: QuantizerSpec
):
    """Per-candidate tables for one data column across all antennas.

    Returns (logp, gsum, gsig, xbars, A) where, with q = (m, d) indexing the
    2M real dimensions and P the pattern count:
      logp  (L, 2M, P)  log outcome probabilities
      gsum  (L, 2M, P)  d1+d2 (shared channel chain factor)
      gsig  (L, 2M, P)  sigma chain contribution d1*(-A1/s) + d2*(-A2/s)
      xbars (L, 2, 2K)  bivariate forms of the candidate columns
    """
    L = cand.shape[0]
    M = chi.num_antennas
    k2 = chi.gbars.shape[1]
    xbars = np.stack(
        [sm.to_bivariate_real(cand[l][:, None]) for l in range(L)]
    )  # (L, 2, 2K)
    # noiseless real signal per (antenna, candidate, dim)
    s = np.einsum("ldk,mk->lmd", xbars, chi.gbars)  # (L, M, 2)
    taus = np.array([spec.tau1, spec.tau2])
    A = np.sqrt(2.0) * (s[..., None] - taus) / chi.sigma  # (L, M, 2, 2)
    tabs = pattern_tables(A[..., 0], A[..., 1], spec.kind)
    P = tabs["logp"].shape[-1]
    logp = tabs["logp"].reshape(L, 2 * M, P)
    gsum = (tabs["d1"] + tabs["d2"]).reshape(L, 2 * M, P)
    gsig = (
        tabs["d1"] * (-A[..., 0, None] / chi.sigma)
        + tabs["d2"] * (-A[..., 1, None] / chi.sigma)
    ).reshape(L, 2 * M, P)
    return logp, gsum, gsig, xbars, A


def _mixture_scores_for_digits(
    digits: np.ndarray,
    logp: np.ndarray,
    gsum: np.ndarray,
    gsig: np.ndarray,
    xbars: np.ndarray,
    chi: ChiVector,
):
    """Posterior-weighted mixture scores for a batch of outcomes.

    digits: (C, 2M) pattern indices. Returns (scores (C, dim), log_mix (C,))
    where log_mix is the log mixture probability of each outcome under the
    uniform candidate prior.
    """
    C, twoM = digits.shape
    L = logp.shape[0]
    M = chi.num_antennas
    k2 = chi.gbars.shape[1]
    n = chi.dim
    log_pl = np.zeros((L, C))
    for q in range(twoM):
        log_pl += logp[:, q, :][:, digits[:, q]]
    log_mix = logsumexp(log_pl, axis=0) - np.log(L)
    w = np.exp(log_pl - (log_mix + np.log(L)))  # posterior weights (L, C)
    scores = np.zeros((C, n))
    chain = np.sqrt(2.0) / chi.sigma
    for m in range(M):
        blk = slice(m * k2, (m + 1) * k2)
        for d in range(2):
            q = 2 * m + d
            g_at = gsum[:, q, :][:, digits[:, q]]  # (L, C)
            weighted = w * g_at
            # chain through the candidate-specific channel direction
            scores[:, blk] += chain * (weighted.T @ xbars[:, d, :])
            sig_at = gsig[:, q, :][:, digits[:, q]]
            scores[:, n - 1] += np.sum(w * sig_at, axis=0)
    return scores, log_mix


def fim_npa(
    cfg: sm.SystemConfig,
    chi: ChiVector,
    spec: QuantizerSpec,
    mode: str,
    *,
    rng: np.random.Generator | None = None,
    num_draws: int = 100_000,
    Xp: np.ndarray | None = None,
    enumeration_chunk: int = 1 << 16,
) -> InfoMatrix:
    """Fisher information of the unknown-data mixture model over chi,
    scaled by the data length (columns are i.i.d.).

    Modes:
      exact_enumeration     enumerate every joint outcome; capped at
                            2M <= 16 real branches.
      mc_scores             Monte Carlo average of score outer products
                            over num_draws sampled outcomes (per column).
      high_snr_equivalence  return the pilot-aided FIM of the supplied
                            block Xp (valid when the candidate posterior
                            concentrates; refuses otherwise with the
                            distinct-region probability as diagnostic).
    """
    const = sm.make_constellation(cfg.constellation, cfg.symbol_power)
    cand = sm.candidate_matrix(const, cfg.num_users)
    L = cand.shape[0]
    M = chi.num_antennas
    T_d = cfg.data_len
    n = chi.dim
    if T_d == 0:
        return InfoMatrix(matrix=np.zeros((n, n)), kind="npa")

    if mode == "high_snr_equivalence":
        if Xp is None:
            raise PreconditionError(
                "high_snr_equivalence needs the pilot block Xp (data reuses it)"
            )
        if rng is None:
            rng = np.random.default_rng(0)
        frac = _posterior_concentration(cfg, chi, spec, cand, rng)
        if frac < 0.99:
            _, lower = prob_distinct_regions(M, cfg.num_users, const.size)
            raise PreconditionError(
                "posterior does not concentrate (fraction "
                f"{frac:.3f} < 0.99); high-SNR equivalence refused",
                diagnostic=lower,
            )
        fim_fn = fim_ternary if spec.kind == "ternary" else fim_po
        Xbar = sm.to_bivariate_real(np.asarray(Xp))
        per_ant = [fim_fn(Xbar, chi.antenna(m), spec) for m in range(M)]
        return assemble_chi_fim(per_ant, kind="npa")

    logp, gsum, gsig, xbars, _ = _column_candidate_tables(cand, chi, spec)
    P = logp.shape[-1]

    if mode == "exact_enumeration":
        if 2 * M > 16:
            raise UnsupportedConfigError(
                f"enumeration over {P}^{2*M} outcomes exceeds the 2M <= 16 "
                "cap; use mc_scores"
            )
        total = P ** (2 * M)
        F = np.zeros((n, n))
        mass = 0.0
        base = np.array([P**q for q in range(2 * M)], dtype=np.int64)
        for start in range(0, total, enumeration_chunk):
            codes = np.arange(start, min(start + enumeration_chunk, total))
            digits = (codes[:, None] // base[None, :]) % P
            scores, log_mix = _mixture_scores_for_digits(
                digits, logp, gsum, gsig, xbars, chi
            )
            pr = np.exp(log_mix)
            F += (scores * pr[:, None]).T @ scores
            mass += float(pr.sum())
        if abs(mass - 1.0) > 1e-8:
            raise QmimoError(f"outcome probabilities sum to {mass}, not 1")
        F = 0.5 * (F + F.T)
        return InfoMatrix(matrix=T_d * F, kind="npa")

    if mode == "mc_scores":
        if rng is None:
            raise PreconditionError("mc_scores mode needs an rng")
        F = np.zeros((n, n))
        F_sq = np.zeros((n, n))
        done = 0
        chunk = min(num_draws, 1 << 14)
        while done < num_draws:
            c = min(chunk, num_draws - done)
            digits = _draw_outcome_digits(cand, chi, spec, c, rng)
            scores, _ = _mixture_scores_for_digits(
                digits, logp, gsum, gsig, xbars, chi
            )
            outer = np.einsum("ci,cj->cij", scores, scores)
            F += outer.sum(axis=0)
            F_sq += (outer**2).sum(axis=0)
            done += c
        mean = F / num_draws
        var = np.maximum(F_sq / num_draws - mean**2, 0.0)
        std_err = np.sqrt(var / num_draws)
        mean = 0.5 * (mean + mean.T)
        # MC noise can leave tiny negative eigenvalues; project them out.
        eigval, eigvec = np.linalg.eigh(mean)
        mean = (eigvec * np.maximum(eigval, 0.0)) @ eigvec.T
        return InfoMatrix(
            matrix=T_d * mean, kind="npa", std_err=T_d * std_err
        )

    raise DomainError(f"unknown fim_npa mode {mode!r}")


def _draw_outcome_digits(cand, chi, spec, count, rng):
    """Sample `count` joint column outcomes from the mixture model,
    returning pattern digits of shape (count, 2M)."""
    L = cand.shape[0]
    M = chi.num_antennas
    pick = rng.integers(0, L, size=count)
    xbars = np.stack([sm.to_bivariate_real(cand[l][:, None]) for l in range(L)])
    s = np.einsum("ldk,mk->lmd", xbars, chi.gbars)  # (L, M, 2)
    s_draw = s[pick]  # (count, M, 2)
    noise_std = chi.sigma / np.sqrt(2.0)
    digits = np.empty((count, 2 * M), dtype=np.intp)
    if spec.kind == "ternary":
        v = s_draw + rng.normal(0.0, noise_std, size=s_draw.shape)
        pat = (v >= spec.tau1).astype(np.intp) + (v >= spec.tau2).astype(np.intp)
    else:
        n1 = rng.normal(0.0, noise_std, size=s_draw.shape)
        n2 = rng.normal(0.0, noise_std, size=s_draw.shape)
        b1 = (s_draw + n1 >= spec.tau1).astype(np.intp)
        b2 = (s_draw + n2 >= spec.tau2).astype(np.intp)
        pat = 2 * b1 + b2
    digits[:, 0::2] = pat[:, :, 0]
    digits[:, 1::2] = pat[:, :, 1]
    return digits


def _posterior_concentration(cfg, chi, spec, cand, rng, samples: int = 2000):
    """Fraction of sampled outcomes whose max posterior weight exceeds
    1 - 1e-6 (empirical high-SNR criterion)."""
    logp, gsum, gsig, xbars, _ = _column_candidate_tables(cand, chi, spec)
    digits = _draw_outcome_digits(cand, chi, spec, samples, rng)
    L = logp.shape[0]
    log_pl = np.zeros((L, samples))
    for q in range(digits.shape[1]):
        log_pl += logp[:, q, :][:, digits[:, q]]
    log_mix = logsumexp(log_pl, axis=0)
    w_max = np.exp(np.max(log_pl, axis=0) - log_mix)
    return float(np.mean(w_max > 1.0 - 1e-6))


def fim_jpd(
    cfg: sm.SystemConfig,
    chi: ChiVector,
    spec: QuantizerSpec,
    Xp: np.ndarray,
    *,
    npa_mode: str = "exact_enumeration",
    rng: np.random.Generator | None = None,
    num_draws: int = 100_000,
) -> InfoMatrix:
    """Joint pilot-and-data information: pilot-aided FIM of Xp plus the
    unknown-data mixture FIM."""
    fim_fn = fim_ternary if spec.kind == "ternary" else fim_po
    Xbar = sm.to_bivariate_real(np.asarray(Xp))
    per_ant = [fim_fn(Xbar, chi.antenna(m), spec) for m in range(chi.num_antennas)]
    F_pa = assemble_chi_fim(per_ant, kind="jpd").matrix
    F_npa = fim_npa(
        cfg, chi, spec, npa_mode, rng=rng, num_draws=num_draws, Xp=Xp
    )
    total = F_pa + F_npa.matrix
    return InfoMatrix(
        matrix=0.5 * (total + total.T), kind="jpd", std_err=F_npa.std_err
    )


def prob_distinct_regions(
    M: int, K: int, constellation_size: int, index_convention: str = "literal"
) -> tuple[float, float]:
    """Probability that all candidate columns map to distinct quantized
    region tuples, with its closed-form lower bound.

    Returns (exact_product, lower_bound), both computed in the log domain.
    The literal product runs c = 0..L over factors (3^M - c + 1)/3^M, whose
    first factor exceeds one; the 'corrected' convention starts at c = 1,
    which is almost surely the intended range. The lower bound
    (1 - (L-1)/3^M)^L is identical under both conventions.
    """
    if M < 1 or K < 1 or constellation_size < 1:
        raise DomainError("M, K and constellation size must be positive")
    L = float(constellation_size) ** K
    log3M = M * np.log(3.0)
    if L > 2**52:
        raise DomainError("candidate count too large to enumerate factors")
    start = {"literal": 0, "corrected": 1}.get(index_convention)
    if start is None:
        raise DomainError(f"unknown index convention {index_convention!r}")
    cs = np.arange(start, int(L) + 1, dtype=float)
    # factor_c = (3^M - c + 1)/3^M = 1 + (1-c)/3^M; log1p keeps precision.
    # More candidates than regions gives a -inf log term, hence probability 0.
    with np.errstate(divide="ignore"):
        terms = np.log1p((1.0 - cs) * np.exp(-log3M))
        lower_log = L * np.log1p(-(L - 1.0) * np.exp(-log3M))
    exact = float(np.exp(np.sum(terms)))
    lower = float(np.exp(lower_log))
    return exact, lower


def fullres_crlb_trace(
    num_users: int, noise_variance: float, symbol_power: float, pilot_len: int
) -> float:
    """Per-antenna channel MSE of unquantized ML with orthogonal pilots,
    K sigma^2 / (2 Ps T_p); reference point for quantization-loss ratios."""
    return num_users * noise_variance / (2.0 * symbol_power * pilot_len)
