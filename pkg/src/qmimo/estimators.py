"""Channel and noise-scale estimators for two-threshold quantized arrays.

The maximum-likelihood solvers work in the reparameterized coordinates
phi = [varsigma; xi] = [gbar/sigma; 1/sigma], where every standardized
argument A_ij = sqrt(2) x_i . varsigma - sqrt(2) tau_j xi is affine in phi
and the log-likelihood is concave. Damped Newton steps with backtracking
therefore converge globally whenever the maximizer is finite.

The expectation-maximization family treats unknown data columns as a
uniform mixture over the candidate symbol matrix. Grouped noise tracking
splits the array into N contiguous antenna groups with one noise scale
each; N=1 recovers plain EM and N=M the fully per-antenna variant. All
group counts run exact EM on the corresponding extended model, so the
observed log-likelihood trace is non-decreasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numerics as nm
from . import signal_model as sm
from .bounds import pattern_index, pattern_tables
from .errors import (
    ConfigError,
    DegenerateEstimateError,
    DomainError,
    IdentifiabilityError,
    ShapeError,
    SingularPilotError,
    UnsupportedConfigError,
)
from .quantizers import QuantizerSpec

__all__ = [
    "SolverOptions",
    "EstimateResult",
    "newton_raphson_ml",
    "siso_ml_closed_form",
    "em_deterministic",
    "pem_deterministic",
    "gpem_deterministic",
    "zf_init",
    "detect_symbols",
    "viem_random",
]

_XI_DIVERGENCE = 1e9
_MAX_BACKTRACKS = 30


@dataclass(frozen=True)
class SolverOptions:
    max_newton_iters: int = 100
    grad_tol: float = 1e-8
    max_em_iters: int = 50
    em_rel_tol: float = 1e-6
    posterior_prune_tol: float = 1e-12
    group_count: int = 1
    # sigma bounds inside EM M-steps; keep the constrained M-step well
    # posed when the weighted outcomes are separable (boundary at sigma=0)
    # or carry no scale information (boundary at sigma=inf)
    sigma_floor: float = 1e-6
    sigma_ceiling: float = 1e6

    def __post_init__(self):
        if self.max_newton_iters < 1 or self.max_em_iters < 1:
            raise ConfigError("iteration limits must be positive")
        if self.grad_tol <= 0 or self.em_rel_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if not 0 <= self.posterior_prune_tol < 1:
            raise ConfigError("posterior_prune_tol must lie in [0, 1)")
        if self.group_count < 1:
            raise ConfigError("group_count must be positive")
        if not 0 < self.sigma_floor < self.sigma_ceiling:
            raise ConfigError("need 0 < sigma_floor < sigma_ceiling")


@dataclass(frozen=True)
class EstimateResult:
    """Estimator output. gbar_hat is (2K,) for single-antenna solvers and
    (M, 2K) for array estimators; H_hat exposes the complex view."""

    gbar_hat: np.ndarray
    sigma_hat: float
    iterations: int
    converged: bool
    llf_trace: np.ndarray | None = None
    Xd_hat: np.ndarray | None = field(default=None, repr=False)

    @property
    def H_hat(self) -> np.ndarray:
        g = np.atleast_2d(self.gbar_hat)
        K = g.shape[1] // 2
        H = g[:, :K] + 1j * g[:, K:]
        return H[0] if self.gbar_hat.ndim == 1 else H


def _bits(z) -> np.ndarray:
    arr = z.zbar if hasattr(z, "zbar") else np.asarray(z)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError("bit blocks must have shape (2T, 2)")
    return arr


def _concave_newton(
    x_rows: np.ndarray,
    ant_of_row: np.ndarray,
    patt: np.ndarray,
    weights: np.ndarray,
    spec: QuantizerSpec,
    varsigma0: np.ndarray,
    xi0: float,
    opts: SolverOptions,
    xi_bounds: tuple[float, float] | None = None,
):
    """Maximize the weighted pattern log-likelihood over per-antenna
    varsigma vectors and one shared xi. Returns (varsigmas, xi, trace,
    iterations, converged).

    Without xi_bounds this is unconstrained ML and separable outcome sets
    raise IdentifiabilityError once the iterates run away. With
    xi_bounds=(lo, hi) the search is restricted to lo <= xi <= hi, so a
    boundary maximizer stalls there instead of raising; EM M-steps use
    this mode."""
    G, k2 = varsigma0.shape
    n = G * k2 + 1
    phi = np.concatenate([varsigma0.reshape(-1), [xi0]])
    taus = np.array([spec.tau1, spec.tau2])
    root2 = np.sqrt(2.0)

    def unpack(p):
        return p[:-1].reshape(G, k2), p[-1]

    def args_of(p):
        vs, xi = unpack(p)
        s = np.einsum("rk,rk->r", x_rows, vs[ant_of_row])
        return root2 * s[:, None] - root2 * taus[None, :] * xi

    def value(p):
        A = args_of(p)
        # wild trial points overflow or round the two columns together;
        # report -inf so backtracking shrinks the step
        if not np.all(A[:, 0] > A[:, 1]):
            return -np.inf
        # exact log-probabilities: the floored variant saturates the tail
        # penalty and manufactures runaway plateau directions
        tabs = pattern_tables(A[:, 0], A[:, 1], spec.kind, order=0, logp_floor=None)
        lp = np.take_along_axis(tabs["logp"], patt[:, None], axis=-1)[:, 0]
        return float(np.sum(weights * lp))

    cur = value(phi)
    trace = [cur]
    converged = False
    it = 0
    for it in range(1, opts.max_newton_iters + 1):
        A = args_of(phi)
        tabs = pattern_tables(A[:, 0], A[:, 1], spec.kind, order=2)
        take = lambda name: np.take_along_axis(  # noqa: E731
            tabs[name], patt[:, None], axis=-1
        )[:, 0]
        d1, d2 = take("d1"), take("d2")
        d11, d12, d22 = take("d11"), take("d12"), take("d22")
        grad = np.zeros(n)
        H = np.zeros((n, n))
        wch = weights * (d1 + d2)
        wxi = -root2 * weights * (taus[0] * d1 + taus[1] * d2)
        hcc = 2.0 * weights * (d11 + 2.0 * d12 + d22)
        hcx = -2.0 * weights * (
            taus[0] * (d11 + d12) + taus[1] * (d12 + d22)
        )
        hxx = 2.0 * weights * (
            taus[0] ** 2 * d11 + 2 * taus[0] * taus[1] * d12 + taus[1] ** 2 * d22
        )
        for g in range(G):
            blk = slice(g * k2, (g + 1) * k2)
            sel = ant_of_row == g
            X = x_rows[sel]
            grad[blk] = root2 * (wch[sel] @ X)
            H[blk, blk] = (X * hcc[sel, None]).T @ X
            cross = hcx[sel] @ X
            H[blk, n - 1] = cross
            H[n - 1, blk] = cross
        grad[n - 1] = float(np.sum(wxi))
        H[n - 1, n - 1] = float(np.sum(hxx))
        if np.max(np.abs(grad)) <= opts.grad_tol:
            converged = True
            break
        # -H is PSD (concavity); ridge only guards exact numerical ties
        neg = -H
        try:
            step = np.linalg.solve(neg, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(neg + 1e-10 * np.eye(n), grad)
        # magnitude cap keeps the derivative tables finite (A**2 overflows
        # near 1e154); the unconstrained mode leaves room above the
        # divergence threshold so the raise below can still fire
        mag_limit = _XI_DIVERGENCE if xi_bounds else _XI_DIVERGENCE * 1e3
        t = 1.0
        improved = False
        for _ in range(_MAX_BACKTRACKS):
            cand = phi + t * step
            if xi_bounds is None:
                feasible = cand[-1] > 0
            else:
                feasible = xi_bounds[0] <= cand[-1] <= xi_bounds[1]
            feasible = feasible and np.max(np.abs(cand)) <= mag_limit
            if feasible:
                v = value(cand)
                if v > cur:
                    phi, cur = cand, v
                    improved = True
                    break
            t *= 0.5
        trace.append(cur)
        if not improved:
            break
        if phi[-1] > _XI_DIVERGENCE or np.max(np.abs(phi[:-1])) > _XI_DIVERGENCE:
            if xi_bounds is None:
                raise IdentifiabilityError(
                    "likelihood has no finite maximizer (outcomes are "
                    "separable); iterates diverged"
                )
            break  # bounded mode: stall at the runaway iterate
    vs, xi = unpack(phi)
    return vs, xi, np.array(trace), it, converged


def newton_raphson_ml(
    Zbar,
    Xbar: np.ndarray,
    spec: QuantizerSpec,
    opts: SolverOptions = SolverOptions(),
    init=None,
) -> EstimateResult:
    """Per-antenna ML estimate of [gbar; sigma] from one quantized block.

    init may be a (gbar0, sigma0) pair; default starts at zero channel with
    the scale set by the outer threshold. A constant outcome across all
    rows identifies nothing and raises IdentifiabilityError, as does
    iterate divergence on separable outcome sets.
    """
    z = _bits(Zbar)
    Xbar = np.asarray(Xbar, dtype=float)
    if z.shape[0] != Xbar.shape[0]:
        raise ShapeError("bit rows must match pilot rows")
    patt = pattern_index(z, spec.kind)
    if np.all(patt == patt[0]):
        raise IdentifiabilityError(
            "constant outcome pattern across all rows; the maximizer sits "
            "on the parameter-space boundary"
        )
    # scale information needs draws localized between the thresholds:
    # ternary middle rows, or branch-disagreement rows for the parallel
    # kind. Without them the block reduces to sign data and (gbar, sigma)
    # ML diverges whenever those signs are linearly separable.
    if spec.kind == "ternary":
        has_scale_rows = np.any(patt == 1)
    else:
        has_scale_rows = np.any((patt == 1) | (patt == 2))
    if not has_scale_rows:
        raise IdentifiabilityError(
            "no outcomes between the thresholds; sigma is not identifiable "
            "from sign-only data"
        )
    if init is not None:
        g0, s0 = init
        vs0 = np.asarray(g0, dtype=float).reshape(1, -1) / s0
        xi0 = 1.0 / s0
    else:
        vs0 = np.zeros((1, Xbar.shape[1]))
        xi0 = 1.0 / spec.tau2
    vs, xi, trace, it, conv = _concave_newton(
        Xbar,
        np.zeros(Xbar.shape[0], dtype=np.intp),
        patt,
        np.ones(Xbar.shape[0]),
        spec,
        vs0,
        xi0,
        opts,
    )
    return EstimateResult(
        gbar_hat=vs[0] / xi,
        sigma_hat=1.0 / xi,
        iterations=it,
        converged=conv,
        llf_trace=trace,
    )


def siso_ml_closed_form(
    Zbar, tau1: float, tau2: float, symbol_power: float, pilot_len: int
) -> EstimateResult:
    """Closed-form ML for one antenna, one user and the constant pilot
    sqrt(Ps)(1+1j): invert the per-group bit frequencies through the normal
    CDF, then solve the two-threshold linear system for level and scale.

    Frequencies are clamped to [1/(2T_p), 1 - 1/(2T_p)] so saturated
    groups stay finite. Equal (or inverted) frequency pair within a group
    leaves the system degenerate."""
    z = _bits(Zbar).astype(float)
    if not tau1 < tau2:
        raise DegenerateEstimateError("tau1 < tau2 required")
    if z.shape[0] != 2 * pilot_len:
        raise ShapeError("expected 2*pilot_len bit rows")
    lo, hi = 1.0 / (2 * pilot_len), 1.0 - 1.0 / (2 * pilot_len)
    s_hat = np.empty(2)
    sig_hat = np.empty(2)
    for j, rows in enumerate((z[:pilot_len], z[pilot_len:])):
        f = np.clip(rows.mean(axis=0), lo, hi)
        th = nm.inv_std_normal_cdf(f)
        if th[0] <= th[1]:
            raise DegenerateEstimateError(
                "bit frequencies leave threshold arguments unordered"
            )
        s_hat[j] = (th[0] * tau2 - th[1] * tau1) / (th[0] - th[1])
        sig_hat[j] = np.sqrt(2.0) * (tau2 - tau1) / (th[0] - th[1])
    root = 2.0 * np.sqrt(symbol_power)
    gbar = np.array([(s_hat[0] + s_hat[1]) / root, (s_hat[1] - s_hat[0]) / root])
    return EstimateResult(
        gbar_hat=gbar,
        sigma_hat=float(sig_hat.mean()),
        iterations=0,
        converged=True,
    )


# ---------------------------------------------------------------------------
# EM family (unknown deterministic data, grouped noise scales)
# ---------------------------------------------------------------------------


def _candidate_xbars(cfg: sm.SystemConfig) -> np.ndarray:
    const = sm.make_constellation(cfg.constellation, cfg.symbol_power)
    if cfg.num_users * np.log2(const.size) > 16:
        raise UnsupportedConfigError(
            "candidate enumeration exceeds the 2^16 cap; reduce users or "
            "constellation size"
        )
    cand = sm.candidate_matrix(const, cfg.num_users)
    return np.stack(
        [sm.to_bivariate_real(cand[l][:, None]) for l in range(cand.shape[0])]
    )  # (L, 2, 2K)


def _group_of_antenna(M: int, N: int) -> np.ndarray:
    if N > M:
        raise ConfigError(f"group count {N} exceeds antenna count {M}")
    size = -(-M // N)  # ceil
    return np.minimum(np.arange(M) // size, N - 1)


def _column_patterns(Zd: np.ndarray, kind: str) -> np.ndarray:
    """(M, 2Td, 2) bits -> (M, 2, Td) pattern indices, dim 0 = real row."""
    M, rows, _ = Zd.shape
    Td = rows // 2
    idx = pattern_index(Zd, kind)  # (M, 2Td)
    return np.stack([idx[:, :Td], idx[:, Td:]], axis=1)


def _cond_logp_tables(xbars, gbars, sigmas_per_ant, spec, logp_floor=nm.LOG_PROB_FLOOR):
    """Per-candidate outcome tables: (M, L, 2, P) log-probs with each
    antenna evaluated at its own group's noise scale."""
    s = np.einsum("ldk,mk->mld", xbars, gbars)  # (M, L, 2)
    taus = np.array([spec.tau1, spec.tau2])
    A = (
        np.sqrt(2.0)
        * (s[..., None] - taus)
        / sigmas_per_ant[:, None, None, None]
    )
    tabs = pattern_tables(
        A[..., 0], A[..., 1], spec.kind, order=0, logp_floor=logp_floor
    )
    return tabs["logp"]  # (M, L, 2, P)


def _columns_cond_logp(logp_cand, col_patt):
    """(M, L, 2, P) tables + (M, 2, Td) patterns -> (Td, L) column sums."""
    M, L, _, _ = logp_cand.shape
    Td = col_patt.shape[2]
    C = np.zeros((Td, L))
    for m in range(M):
        for d in range(2):
            C += logp_cand[m, :, d, :][:, col_patt[m, d]].T
    return C


def gpem_deterministic(
    Zbar_p: np.ndarray,
    Zbar_d: np.ndarray,
    Xp: np.ndarray,
    cfg: sm.SystemConfig,
    spec: QuantizerSpec,
    opts: SolverOptions = SolverOptions(),
    group_count: int | None = None,
) -> EstimateResult:
    """Grouped EM: joint ML of all per-antenna channels, the unknown data
    columns (uniform candidate mixture) and one noise scale per contiguous
    antenna group.

    E-step: column posteriors over candidates using every antenna's current
    parameters, pruned below posterior_prune_tol and renormalized.
    M-step: per group, concave Newton over the member channels and the
    shared scale, with data rows collapsed onto weighted (candidate, dim,
    pattern) counts. The reported sigma_hat averages the group scales.

    The llf_trace holds the observed (mixture) log-likelihood after each
    M-step; exact EM on the extended model makes it non-decreasing.
    """
    Zp = np.asarray(Zbar_p)
    Zd = np.asarray(Zbar_d)
    if Zp.ndim != 3 or Zd.ndim != 3:
        raise ShapeError("expected (M, 2T, 2) bit blocks")
    M = Zp.shape[0]
    N = opts.group_count if group_count is None else group_count
    group = _group_of_antenna(M, N)
    Xbar_p = sm.to_bivariate_real(np.asarray(Xp))
    xbars = _candidate_xbars(cfg)
    L = xbars.shape[0]
    P = 3 if spec.kind == "ternary" else 4
    Td = Zd.shape[1] // 2
    patt_p = np.stack([pattern_index(Zp[m], spec.kind) for m in range(M)])
    col_patt = _column_patterns(Zd, spec.kind) if Td else None
    onehot = None
    if Td:
        onehot = np.zeros((M, 2, Td, P))
        mi, di, ti = np.meshgrid(
            np.arange(M), np.arange(2), np.arange(Td), indexing="ij"
        )
        onehot[mi, di, ti, col_patt] = 1.0

    # init: per-antenna pilot-only ML; draws that pilots alone cannot
    # identify fall back to a least-squares fit of per-region levels,
    # which fixes the sign structure (a zero start is a symmetric
    # stationary point of the mixture and EM would never leave it). The
    # fallback scale makes the implied arguments O(1) so the first E-step
    # stays humble about these antennas.
    gbars = np.zeros((M, 2 * cfg.num_users))
    sig0 = np.full(M, spec.tau2)
    levels = _region_levels(spec)
    for m in range(M):
        try:
            r = newton_raphson_ml(Zp[m], Xbar_p, spec, opts)
            gbars[m] = r.gbar_hat
            sig0[m] = r.sigma_hat
        except IdentifiabilityError:
            g0 = np.linalg.lstsq(Xbar_p, levels[patt_p[m]], rcond=None)[0]
            gbars[m] = g0
            sig0[m] = max(
                float(np.sqrt(np.mean((Xbar_p @ g0) ** 2))),
                1e-3 * spec.tau2,
            )
    xi_bounds = (1.0 / opts.sigma_ceiling, 1.0 / opts.sigma_floor)
    xi_g = np.clip(
        np.array([1.0 / np.mean(sig0[group == g]) for g in range(N)]),
        *xi_bounds,
    )

    def observed_llf():
        sig_ant = 1.0 / xi_g[group]
        total = 0.0
        for m in range(M):
            eta_args = _pilot_args(Xbar_p, gbars[m], sig_ant[m], spec)
            tabs = pattern_tables(
                eta_args[:, 0], eta_args[:, 1], spec.kind, order=0,
                logp_floor=None,
            )
            total += float(
                np.sum(
                    np.take_along_axis(
                        tabs["logp"], patt_p[m][:, None], axis=-1
                    )
                )
            )
        if Td:
            logp_cand = _cond_logp_tables(
                xbars, gbars, sig_ant, spec, logp_floor=None
            )
            C = _columns_cond_logp(logp_cand, col_patt)
            total += float(np.sum(logsumexp(C, axis=1) - np.log(L)))
        return total

    weights = np.full((Td, L), 1.0 / L) if Td else None

    def em_pass(prune: bool) -> float:
        """One E-step + all group M-steps in place; returns observed LLF."""
        nonlocal weights
        sig_ant = 1.0 / xi_g[group]
        counts = None
        if Td:
            # exact log-probabilities: the floored tables can reorder
            # posteriors whenever every candidate holds a deep-tail row,
            # and a mismatched posterior breaks the EM inequality
            logp_cand = _cond_logp_tables(
                xbars, gbars, sig_ant, spec, logp_floor=None
            )
            C = _columns_cond_logp(logp_cand, col_patt)
            lw = C - logsumexp(C, axis=1, keepdims=True)
            weights[:] = np.exp(lw)
            if prune:
                weights[weights < opts.posterior_prune_tol] = 0.0
                weights /= weights.sum(axis=1, keepdims=True)
            counts = np.einsum("tl,mdtp->mldp", weights, onehot)
        for g in range(N):
            members = np.flatnonzero(group == g)
            rows, ants, pats, wts = [], [], [], []
            for slot, m in enumerate(members):
                rows.append(Xbar_p)
                ants.append(np.full(Xbar_p.shape[0], slot, dtype=np.intp))
                pats.append(patt_p[m])
                wts.append(np.ones(Xbar_p.shape[0]))
                if Td:
                    c = counts[m].reshape(-1)  # (L*2*P,)
                    keep = c > 0
                    xr = np.repeat(xbars.reshape(L * 2, -1), P, axis=0)[keep]
                    pr = np.tile(np.arange(P, dtype=np.intp), L * 2)[keep]
                    rows.append(xr)
                    ants.append(np.full(xr.shape[0], slot, dtype=np.intp))
                    pats.append(pr)
                    wts.append(c[keep])
            vs0 = gbars[members] * xi_g[g]
            vs, xi, _, _, _ = _concave_newton(
                np.concatenate(rows),
                np.concatenate(ants),
                np.concatenate(pats),
                np.concatenate(wts),
                spec,
                vs0,
                xi_g[g],
                opts,
                xi_bounds=xi_bounds,
            )
            gbars[members] = vs / xi
            xi_g[g] = xi
        return observed_llf()

    trace = []
    converged = False
    iters = 0
    for iters in range(1, opts.max_em_iters + 1):
        saved = (gbars.copy(), xi_g.copy())
        cur = em_pass(prune=True)
        if trace and cur < trace[-1]:
            # pruning perturbs the maximized objective by up to (pruned
            # mass) x (log-prob range), which can exceed the monotonicity
            # slack; redo the pass on exact posteriors, for which the EM
            # inequality is airtight
            gbars[:], xi_g[:] = saved
            cur = em_pass(prune=False)
        trace.append(cur)
        if (
            len(trace) >= 2
            and abs(trace[-1] - trace[-2])
            <= opts.em_rel_tol * max(1.0, abs(trace[-2]))
        ):
            converged = True
            break

    Xd_hat = None
    if Td:
        const = sm.make_constellation(cfg.constellation, cfg.symbol_power)
        cand = sm.candidate_matrix(const, cfg.num_users)
        best = np.argmax(weights, axis=1)  # ties resolve to lowest index
        Xd_hat = cand[best].T  # (K, Td)
    return EstimateResult(
        gbar_hat=gbars,
        sigma_hat=float(np.mean(1.0 / xi_g)),
        iterations=iters,
        converged=converged,
        llf_trace=np.array(trace),
        Xd_hat=Xd_hat,
    )


def _region_levels(spec: QuantizerSpec) -> np.ndarray:
    """Representative pre-quantization level per outcome pattern (tail
    regions sit one half-gap beyond their threshold)."""
    mid = 0.5 * (spec.tau1 + spec.tau2)
    delta = 0.5 * (spec.tau2 - spec.tau1)
    if spec.kind == "ternary":
        return np.array([spec.tau1 - delta, mid, spec.tau2 + delta])
    # contradictory branch pairs land on the midpoint too
    return np.array([spec.tau1 - delta, mid, mid, spec.tau2 + delta])


def _pilot_args(Xbar, gbar, sigma, spec):
    s = Xbar @ gbar
    taus = np.array([spec.tau1, spec.tau2])
    return np.sqrt(2.0) * (s[:, None] - taus[None, :]) / sigma


def em_deterministic(Zbar_p, Zbar_d, Xp, cfg, spec, opts=SolverOptions()):
    """EM with a single array-wide noise scale (one group)."""
    return gpem_deterministic(Zbar_p, Zbar_d, Xp, cfg, spec, opts, group_count=1)


def pem_deterministic(Zbar_p, Zbar_d, Xp, cfg, spec, opts=SolverOptions()):
    """Per-antenna noise tracking: one group per antenna."""
    M = np.asarray(Zbar_p).shape[0]
    return gpem_deterministic(Zbar_p, Zbar_d, Xp, cfg, spec, opts, group_count=M)


# ---------------------------------------------------------------------------
# Labeled-output estimators
# ---------------------------------------------------------------------------


def zf_init(Ztilde_p: np.ndarray, Xp: np.ndarray) -> np.ndarray:
    """Least-squares channel from labeled pilot observations:
    H = Z X^H (X X^H)^{-1}. Raises SingularPilotError when the pilot Gram
    matrix is not invertible."""
    Z = np.asarray(Ztilde_p)
    X = np.asarray(Xp)
    if Z.ndim != 2 or X.ndim != 2 or Z.shape[1] != X.shape[1]:
        raise ShapeError("Ztilde_p (M, Tp) and Xp (K, Tp) must share Tp")
    gram = X @ X.conj().T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularPilotError(
            f"pilot Gram matrix condition {cond:.3g} exceeds 1e12"
        )
    return np.linalg.solve(gram.T, (Z @ X.conj().T).T).T


def detect_symbols(soft: np.ndarray, const: sm.Constellation) -> np.ndarray:
    """Per-entry nearest-constellation decision; ties take the lowest
    symbol index."""
    s = np.asarray(soft)
    d = np.abs(s[..., None] - const.symbols) ** 2
    return const.symbols[np.argmin(d, axis=-1)]


def _label_regions(labels: np.ndarray, spec: QuantizerSpec, branch: int | None):
    """Map labeled values back to quantization intervals.

    Ternary (branch None): sign of the label picks (-inf, tau1),
    [tau1, tau2) or [tau2, inf). Branch b of the independent pair:
    negative -> (-inf, tau_b), positive -> [tau_b, inf)."""
    lo = np.empty_like(labels, dtype=float)
    hi = np.empty_like(labels, dtype=float)
    if branch is None:
        neg, mid, pos = labels < 0, labels == 0, labels > 0
        lo[neg], hi[neg] = -np.inf, spec.tau1
        lo[mid], hi[mid] = spec.tau1, spec.tau2
        lo[pos], hi[pos] = spec.tau2, np.inf
    else:
        tau = spec.tau1 if branch == 0 else spec.tau2
        neg = labels < 0
        lo[neg], hi[neg] = -np.inf, tau
        lo[~neg], hi[~neg] = tau, np.inf
    return lo, hi


def _safe_truncated_moments(center, stdev, lower, upper):
    """Vectorized truncated-normal moments; intervals whose mass underflows
    fall back to the midpoint (finite intervals) or the nearest edge
    (tails), with variance 0."""
    center = np.asarray(center, dtype=float)
    a = (lower - center) / stdev
    b = (upper - center) / stdev
    log_mass = nm.log_interval_prob(a, b)
    ok = log_mass >= nm.LOG_PROB_FLOOR
    mean = np.empty_like(center)
    var = np.zeros_like(center)
    if np.any(ok):
        mean[ok] = nm.truncated_gaussian_mean(
            center[ok], stdev, lower[ok], upper[ok]
        )
        var[ok] = nm.truncated_gaussian_variance(
            center[ok], stdev, lower[ok], upper[ok]
        )
    bad = ~ok
    if np.any(bad):
        lo, hi = lower[bad], upper[bad]
        mid = np.where(
            np.isfinite(lo) & np.isfinite(hi),
            0.5 * (lo + hi),
            np.where(np.isfinite(hi), hi, lo),
        )
        mean[bad] = mid
    return mean, var


def _channel_posterior(XXh, xy, sigma, lam_m):
    """Gaussian channel posterior for one antenna: covariance
    (sum_t conj(x_t) x_t^T / sigma^2 + diag(1/lam))^{-1} and its mean."""
    prec = XXh / sigma**2 + np.diag(1.0 / lam_m)
    Omega = np.linalg.inv(prec)
    return Omega, Omega @ (xy / sigma**2)


def _lambda_update(Omega, mpost):
    """Per-entry prior variances from the posterior second moment, floored
    so the precision matrix stays invertible when a coefficient collapses."""
    return np.maximum(
        np.real(np.einsum("mkk->mk", Omega)) + np.abs(mpost) ** 2, 1e-10
    )


def viem_random(
    Ztilde_p: np.ndarray,
    Ztilde_d: np.ndarray,
    Xp: np.ndarray,
    cfg: sm.SystemConfig,
    spec: QuantizerSpec,
    opts: SolverOptions = SolverOptions(),
    *,
    mode: str = "jpd",
    rng: np.random.Generator | None = None,
    sigma_init: float | None = None,
) -> EstimateResult:
    """Variational inference for random (Gaussian-prior) channels from
    labeled quantizer outputs.

    Alternates: truncated-Gaussian posterior means of the unquantized
    observations given the region each label encodes; per-antenna Gaussian
    channel posteriors with per-entry prior variances learned from their
    second moments; joint per-column data detection ("jpd" mode only,
    "pa" iterates on the pilot block); and a concave Newton update of the
    noise scale. Convergence is declared on the relative change of the
    posterior-mean channel matrix.

    sigma_init defaults to the configured noise scale perturbed by a
    uniform +-20 percent factor (imperfect knowledge); pass a value to pin
    it.
    """
    if mode not in ("pa", "jpd"):
        raise DomainError(f"unknown viem mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    Zp = np.asarray(Ztilde_p)
    Zd = np.asarray(Ztilde_d)
    Xp = np.asarray(Xp)
    M, Tp = Zp.shape[0], Zp.shape[1]
    Td = Zd.shape[1] if Zd.size else 0
    K = Xp.shape[0]
    if not spec.labeled:
        raise DomainError("viem_random needs a labeled quantizer spec")

    def branch_mean(Z):
        # independent pair carries one label per branch; average them
        return Z.mean(axis=2) if Z.ndim == 3 else Z

    H = zf_init(branch_mean(Zp), Xp)
    lam = np.ones((M, K))
    if sigma_init is None:
        sigma = float(
            np.sqrt(cfg.noise_variance) * rng.uniform(0.8, 1.2)
        )
    else:
        sigma = float(sigma_init)
    Xd_hat = None
    Omega = np.zeros((M, K, K), dtype=complex)
    mpost = H.copy()

    def region_moments(Z, centers):
        """Posterior moments of the unquantized block, one complex entry
        per (antenna, column); returns (means, total variances)."""
        if Z.ndim == 3:  # independent branches, average the two
            means = np.zeros(Z.shape[:2], dtype=complex)
            var = np.zeros(Z.shape[:2])
            for b in range(2):
                m_b = np.empty(Z.shape[:2], dtype=complex)
                for part, comp in ((np.real, 1.0), (np.imag, 1j)):
                    lo, hi = _label_regions(part(Z[:, :, b]), spec, b)
                    mu, vv = _safe_truncated_moments(
                        part(centers), sigma / np.sqrt(2.0), lo, hi
                    )
                    m_b += comp * mu
                    var += vv / 2.0
                means += m_b / 2.0
            return means, var
        means = np.zeros(Z.shape, dtype=complex)
        var = np.zeros(Z.shape)
        for part, comp in ((np.real, 1.0), (np.imag, 1j)):
            lo, hi = _label_regions(part(Z), spec, None)
            mu, vv = _safe_truncated_moments(
                part(centers), sigma / np.sqrt(2.0), lo, hi
            )
            means = means + comp * mu
            var += vv
        return means, var

    iters = 0
    converged = False
    for iters in range(1, opts.max_em_iters + 1):
        if mode == "jpd" and Td:
            X = np.concatenate(
                [Xp, Xd_hat if Xd_hat is not None else np.zeros((K, Td))],
                axis=1,
            )
            Z = np.concatenate([Zp, Zd], axis=1)
        else:
            X, Z = Xp, Zp
        T = X.shape[1]
        centers = mpost @ X
        y_mean, y_var = region_moments(Z, centers)

        XXh = np.conj(X) @ X.T  # sum_t conj(x_t) x_t^T
        S = 0.0
        for m in range(M):
            Omega[m], mpost[m] = _channel_posterior(
                XXh, np.conj(X) @ y_mean[m], sigma, lam[m]
            )
            resid = y_mean[m] - mpost[m] @ X
            quad = np.real(np.einsum("kt,kl,lt->t", X, Omega[m], np.conj(X)))
            S += float(np.sum(np.abs(resid) ** 2) + np.sum(quad))
        S += float(np.sum(y_var))
        lam = _lambda_update(Omega, mpost)

        if mode == "jpd" and Td:
            G = np.sum(np.transpose(Omega, (0, 2, 1)), axis=0) + np.conj(
                mpost
            ).T @ mpost
            centers_d = mpost @ (
                Xd_hat if Xd_hat is not None else np.zeros((K, Td))
            )
            yd_mean, _ = region_moments(Zd, centers_d)
            soft = np.linalg.solve(G, np.conj(mpost).T @ yd_mean)
            const = sm.make_constellation(cfg.constellation, cfg.symbol_power)
            Xd_hat = detect_symbols(soft, const)

        # expected squared residual of the unquantized block anchors the
        # noise scale; concave 1-D Newton on g(xi) = 2MT ln xi - xi^2 S
        S = max(S, 1e-30)
        xi = 1.0 / sigma
        for _ in range(50):
            gp = 2 * M * T / xi - 2 * xi * S
            if abs(gp) < 1e-12 * max(1.0, M * T):
                break
            gpp = -2 * M * T / xi**2 - 2 * S
            xi = max(xi - gp / gpp, 1e-12)
        sigma = float(np.clip(1.0 / xi, opts.sigma_floor, opts.sigma_ceiling))

        prev = H
        H = mpost.copy()
        dH = np.linalg.norm(H - prev) / max(np.linalg.norm(prev), 1e-30)
        if dH <= opts.em_rel_tol:
            converged = True
            break

    if Td and Xd_hat is None:
        # pilot-only mode still reports a detection from the final channel
        centers_d = np.zeros((M, Td), dtype=complex)
        yd_mean, _ = region_moments(Zd, centers_d)
        G = np.sum(np.transpose(Omega, (0, 2, 1)), axis=0) + np.conj(
            mpost
        ).T @ mpost
        soft = np.linalg.solve(G, np.conj(mpost).T @ yd_mean)
        const = sm.make_constellation(cfg.constellation, cfg.symbol_power)
        Xd_hat = detect_symbols(soft, const)

    gbar = np.concatenate([H.real, H.imag], axis=1)
    return EstimateResult(
        gbar_hat=gbar,
        sigma_hat=float(sigma),
        iterations=iters,
        converged=converged,
        Xd_hat=Xd_hat,
    )
