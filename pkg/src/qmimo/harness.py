"""Monte Carlo experiment engine: sweeps, metrics and aggregation.

A sweep is a cartesian product of axis values laid over a template
:class:`~qmimo.signal_model.SystemConfig`. Every (combination, trial) pair
draws its randomness from an independent RNG substream keyed by the plan
seed, so results are bit-identical for any execution order or degree of
parallelism; aggregation walks trials in index order with numpy's pairwise
summation.

Trial errors are expected at operating extremes (saturated quantizers make
the noise scale unidentifiable). They are caught per trial, counted and
excluded; a combination losing more than 5 percent of its trials is marked
invalid rather than aborting the sweep.

Reference bounds ride along where they are computable: deterministic
channel sweeps average the per-realization pilot-aided CRLB over the drawn
channels, Gaussian-prior sweeps attach the hybrid bound computed once per
combination.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from . import bounds as bd
from . import estimators as est
from . import signal_model as sm
from .errors import ConfigError, DomainError, QmimoError, ShapeError
from .quantizers import (
    QuantizedBits,
    QuantizerSpec,
    analytic_dynamic_thresholds,
    default_input_power,
    labels_from_bits,
    quantize_block,
)

__all__ = [
    "SweepPlan",
    "MetricRecord",
    "ResolvedPoint",
    "nmse",
    "ser",
    "snr_to_power",
    "run_sweep",
    "resolve_point",
    "sweep_combinations",
    "estimator_names",
    "parse_threshold_scheme",
]

AXIS_NAMES = (
    "snr_db",
    "M",
    "K",
    "T_p",
    "T_d",
    "constellation",
    "threshold_scheme",
    "estimator",
)

# estimators whose channel error is benchmarked against the deterministic
# per-realization CRLB; labeled-output schemes target the hybrid bound
_DET_BOUND_ESTIMATORS = frozenset({"nr_ml", "em", "pem", "gpem", "oracle"})
_LABELED_ESTIMATORS = frozenset({"zf", "viem", "viem_pa"})


def snr_to_power(snr_db: float, noise_variance: float = 1.0) -> float:
    """Per-user transmit power for a target SNR = P_s / sigma^2."""
    if not noise_variance > 0:
        raise DomainError("noise_variance must be positive")
    return float(noise_variance * 10.0 ** (snr_db / 10.0))


def nmse(H_hat: np.ndarray, H: np.ndarray) -> float:
    """Normalized channel error ||H_hat - H||_F^2 / ||H||_F^2."""
    H_hat = np.asarray(H_hat)
    H = np.asarray(H)
    if H_hat.shape != H.shape:
        raise ShapeError(f"shape mismatch {H_hat.shape} vs {H.shape}")
    den = float(np.sum(np.abs(H) ** 2))
    if den == 0.0:
        raise DomainError("reference channel has zero norm")
    return float(np.sum(np.abs(H_hat - H) ** 2) / den)


def ser(Xd_hat: np.ndarray, Xd: np.ndarray) -> float:
    """Fraction of symbol decisions that differ from the transmitted block."""
    Xd_hat = np.asarray(Xd_hat)
    Xd = np.asarray(Xd)
    if Xd_hat.shape != Xd.shape:
        raise ShapeError(f"shape mismatch {Xd_hat.shape} vs {Xd.shape}")
    if Xd.size == 0:
        raise ShapeError("empty symbol block")
    return float(np.mean(np.abs(Xd_hat - Xd) > 1e-9))


def parse_threshold_scheme(token: str) -> tuple[str, float]:
    """Split a scheme token "fixed:DELTA" / "dynamic:C" into (name, value)."""
    parts = str(token).split(":")
    if len(parts) != 2 or parts[0] not in ("fixed", "dynamic"):
        raise ConfigError(
            f"threshold scheme {token!r} must be 'fixed:<delta>' or "
            "'dynamic:<c>'"
        )
    try:
        value = float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"bad threshold scheme value in {token!r}") from exc
    if not (value > 0 and np.isfinite(value)):
        raise ConfigError("threshold scheme value must be positive and finite")
    return parts[0], value


@dataclass(frozen=True)
class ResolvedPoint:
    """One sweep combination resolved to concrete objects."""

    cfg: sm.SystemConfig
    spec: QuantizerSpec
    estimator: str
    snr_db: float


@dataclass(frozen=True)
class SweepPlan:
    """Cartesian sweep description.

    ``axes`` is an ordered list of (axis name, values); allowed names are
    snr_db, M, K, T_p, T_d, constellation, threshold_scheme and estimator.
    Template-level choices (estimator, quantizer kind, threshold scheme)
    apply wherever the corresponding axis is absent. Every combination is
    resolved at construction time so invalid corners fail before any
    trials run.
    """

    base: sm.SystemConfig
    axes: tuple
    num_realizations: int = 3000
    seed: int = 0
    estimator: str = "nr_ml"
    quantizer_kind: str = "ternary"
    threshold_scheme: str = "fixed:1.0"
    label_delta: float = 1.0
    orthogonal_pilots: bool = True
    solver: est.SolverOptions = field(default_factory=est.SolverOptions)
    ncrlb_draws: int = 1000

    def __post_init__(self):
        axes = tuple((str(n), tuple(v)) for n, v in self.axes)
        object.__setattr__(self, "axes", axes)
        if not axes:
            raise ConfigError("sweep needs at least one axis")
        seen = set()
        for name, values in axes:
            if name not in AXIS_NAMES:
                raise ConfigError(
                    f"unknown axis {name!r}; expected one of {AXIS_NAMES}"
                )
            if name in seen:
                raise ConfigError(f"axis {name!r} listed twice")
            if not values:
                raise ConfigError(f"axis {name!r} has no values")
            seen.add(name)
        if self.num_realizations < 1:
            raise ConfigError("num_realizations must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.ncrlb_draws < 100:
            raise ConfigError("ncrlb_draws below 100 is unreliable")
        for point in sweep_combinations(self):
            rp = resolve_point(self, point)
            if rp.estimator == "gpem":
                groups = self.solver.group_count
                if groups > rp.cfg.num_bs_antennas:
                    raise ConfigError(
                        f"gpem group count {groups} exceeds antenna count "
                        f"{rp.cfg.num_bs_antennas} at {dict(point)}"
                    )


def sweep_combinations(plan: SweepPlan) -> list:
    """Axis-value combinations in axis-major product order."""
    names = [n for n, _ in plan.axes]
    grids = [v for _, v in plan.axes]
    return [tuple(zip(names, combo)) for combo in product(*grids)]


def resolve_point(plan: SweepPlan, point) -> ResolvedPoint:
    """Materialize the SystemConfig / quantizer / estimator for one
    combination, raising ConfigError on invalid corners."""
    values = dict(point)
    cfg = plan.base
    estimator = values.get("estimator", plan.estimator)
    if estimator not in _ESTIMATORS:
        raise ConfigError(
            f"unknown estimator {estimator!r}; known: {estimator_names()}"
        )
    updates = {}
    if "M" in values:
        updates["num_bs_antennas"] = int(values["M"])
    if "K" in values:
        updates["num_users"] = int(values["K"])
    if "T_p" in values:
        updates["pilot_len"] = int(values["T_p"])
    if "T_d" in values:
        updates["data_len"] = int(values["T_d"])
    if "constellation" in values:
        updates["constellation"] = str(values["constellation"])
    snr_db = values.get("snr_db")
    if snr_db is not None:
        updates["symbol_power"] = snr_to_power(
            float(snr_db), cfg.noise_variance
        )
    try:
        cfg = replace(cfg, **updates) if updates else cfg
    except QmimoError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid combination {values}: {exc}") from exc
    if snr_db is None:
        snr_db = 10.0 * math.log10(cfg.symbol_power / cfg.noise_variance)

    scheme, param = parse_threshold_scheme(
        values.get("threshold_scheme", plan.threshold_scheme)
    )
    if scheme == "fixed":
        tau2 = param
    else:
        # gain-control rule evaluated in expectation over the whole frame,
        # keeping thresholds deterministic for a given combination
        block = cfg.pilot_len + cfg.data_len
        _, tau2 = analytic_dynamic_thresholds(
            cfg.num_bs_antennas,
            block,
            cfg.symbol_power * cfg.num_users,
            cfg.noise_variance,
            param,
        )
    if estimator in _LABELED_ESTIMATORS:
        spec = QuantizerSpec.symmetric(
            plan.quantizer_kind,
            tau2,
            label_delta=plan.label_delta,
            input_power=default_input_power(
                cfg.num_users, cfg.symbol_power, cfg.noise_variance
            ),
        )
    else:
        spec = QuantizerSpec.symmetric(plan.quantizer_kind, tau2)
    return ResolvedPoint(
        cfg=cfg, spec=spec, estimator=estimator, snr_db=float(snr_db)
    )


@dataclass(frozen=True)
class MetricRecord:
    """Aggregated metrics for one sweep combination.

    nmse is the mean linear normalized error over the surviving trials and
    nmse_db its decibel form (-inf for an exact estimator). mc_std_err is
    the standard error of the linear mean. ncrlb_db and ser are NaN when
    not computable for the combination. wall_time_s is informational and
    never serialized (output files must be reproducible byte for byte).
    """

    axis_values: tuple
    nmse: float
    nmse_db: float
    ncrlb_db: float
    ser: float
    mc_std_err: float
    realizations_used: int
    failed_trials: int
    valid: bool
    mean_iterations: float
    wall_time_s: float
    error_examples: tuple = ()

    def __post_init__(self):
        if self.realizations_used < 0 or self.failed_trials < 0:
            raise DomainError("trial counts must be nonnegative")
        if np.isfinite(self.ser) and not 0.0 <= self.ser <= 1.0:
            raise DomainError(f"ser {self.ser} outside [0, 1]")
        if np.isnan(self.nmse_db) and self.realizations_used > 0:
            raise DomainError("nmse_db must be defined when trials survive")

    def as_dict(self) -> dict:
        """Flat serializable row; wall time and error strings stay off the
        record so repeated runs serialize identically."""
        out = dict(self.axis_values)
        out.update(
            nmse=self.nmse,
            nmse_db=self.nmse_db,
            ncrlb_db=self.ncrlb_db,
            ser=self.ser,
            mc_std_err=self.mc_std_err,
            realizations_used=self.realizations_used,
            failed_trials=self.failed_trials,
            valid=self.valid,
            mean_iterations=self.mean_iterations,
        )
        return out


# ---------------------------------------------------------------------------
# Estimator registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _TrialData:
    cfg: sm.SystemConfig
    spec: QuantizerSpec
    solver: est.SolverOptions
    H: np.ndarray
    Xp: np.ndarray
    Xd: np.ndarray | None
    Xbar_p: np.ndarray
    bits_p: np.ndarray
    bits_d: np.ndarray
    alg_rng: np.random.Generator


def _labels(bits: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """(M, 2T, 2) bit blocks -> complex labels, (M, T) for the shared-noise
    kind or (M, T, 2) with one slot per branch."""
    M, rows, _ = bits.shape
    T = rows // 2
    out = []
    for m in range(M):
        lab = labels_from_bits(QuantizedBits(zbar=bits[m], kind=spec.kind), spec)
        out.append(lab[:T] + 1j * lab[T:])
    return np.stack(out)


def _est_oracle(d: _TrialData):
    return d.H, d.Xd, 0


def _est_zf(d: _TrialData):
    lab = _labels(d.bits_p, d.spec)
    Z = lab.mean(axis=2) if lab.ndim == 3 else lab
    return est.zf_init(Z, d.Xp), None, 0


def _est_nr_ml(d: _TrialData):
    K = d.cfg.num_users
    rows = []
    iters = 0
    for m in range(d.cfg.num_bs_antennas):
        r = est.newton_raphson_ml(d.bits_p[m], d.Xbar_p, d.spec, d.solver)
        rows.append(r.gbar_hat)
        iters = max(iters, r.iterations)
    G = np.stack(rows)
    return G[:, :K] + 1j * G[:, K:], None, iters


def _em_family(d: _TrialData, group_count: int):
    r = est.gpem_deterministic(
        d.bits_p, d.bits_d, d.Xp, d.cfg, d.spec, d.solver, group_count
    )
    return r.H_hat, r.Xd_hat, r.iterations


def _est_em(d: _TrialData):
    return _em_family(d, 1)


def _est_pem(d: _TrialData):
    return _em_family(d, d.cfg.num_bs_antennas)


def _est_gpem(d: _TrialData):
    return _em_family(d, d.solver.group_count)


def _viem(d: _TrialData, mode: str):
    lab_p = _labels(d.bits_p, d.spec)
    lab_d = _labels(d.bits_d, d.spec)
    r = est.viem_random(
        lab_p, lab_d, d.Xp, d.cfg, d.spec, d.solver, mode=mode, rng=d.alg_rng
    )
    return r.H_hat, r.Xd_hat, r.iterations


_ESTIMATORS = {
    "oracle": _est_oracle,
    "zf": _est_zf,
    "nr_ml": _est_nr_ml,
    "em": _est_em,
    "pem": _est_pem,
    "gpem": _est_gpem,
    "viem": lambda d: _viem(d, "jpd"),
    "viem_pa": lambda d: _viem(d, "pa"),
}


def estimator_names() -> tuple:
    return tuple(sorted(_ESTIMATORS))


# ---------------------------------------------------------------------------
# Trial execution
# ---------------------------------------------------------------------------


def _quantize_antenna(sbar, cfg, spec, rng) -> np.ndarray:
    T = sbar.size // 2
    n = sm.complex_to_real_vec(sm.draw_noise(cfg, (T,), rng))
    if spec.kind != "ternary":
        n = np.stack(
            [n, sm.complex_to_real_vec(sm.draw_noise(cfg, (T,), rng))], axis=1
        )
    return quantize_block(sbar, n, spec).zbar


def _run_trial(rp: ResolvedPoint, plan: SweepPlan, ci: int, ti: int) -> dict:
    cfg, spec = rp.cfg, rp.spec
    data_rng = sm.substream(plan.seed, ci, ti)
    alg_rng = sm.substream(plan.seed, ci, ti, 1)
    M = cfg.num_bs_antennas
    H = sm.draw_channel(cfg, data_rng)
    Xp = sm.draw_pilots(cfg, data_rng, orthogonal=plan.orthogonal_pilots)
    Xd = (
        sm.draw_symbols(cfg, cfg.data_len, data_rng) if cfg.data_len else None
    )
    Xbar_p = sm.to_bivariate_real(Xp)
    G = np.concatenate([H.real, H.imag], axis=1)
    bits_p = np.stack(
        [_quantize_antenna(Xbar_p @ G[m], cfg, spec, data_rng) for m in range(M)]
    )
    if Xd is not None:
        Xbar_d = sm.to_bivariate_real(Xd)
        bits_d = np.stack(
            [
                _quantize_antenna(Xbar_d @ G[m], cfg, spec, data_rng)
                for m in range(M)
            ]
        )
    else:
        bits_d = np.zeros((M, 0, 2), dtype=np.uint8)
    data = _TrialData(
        cfg=cfg,
        spec=spec,
        solver=plan.solver,
        H=H,
        Xp=Xp,
        Xd=Xd,
        Xbar_p=Xbar_p,
        bits_p=bits_p,
        bits_d=bits_d,
        alg_rng=alg_rng,
    )
    H_hat, Xd_hat, iters = _ESTIMATORS[rp.estimator](data)
    out = {
        "ok": True,
        "nmse": nmse(H_hat, H),
        "ser": float("nan"),
        "bound": float("nan"),
        "iters": float(iters),
    }
    if Xd_hat is not None and Xd is not None:
        out["ser"] = ser(Xd_hat, Xd)
    if (
        cfg.channel_kind == "deterministic"
        and rp.estimator in _DET_BOUND_ESTIMATORS
    ):
        out["bound"] = _deterministic_bound(Xbar_p, G, cfg, spec, H)
    return out


def _deterministic_bound(Xbar_p, G, cfg, spec, H) -> float:
    """Per-realization pilot-aided CRLB trace over all antennas, NMSE
    normalized; NaN when any antenna's information is singular."""
    fim_fn = bd.fim_ternary if spec.kind == "ternary" else bd.fim_po
    sigma = float(np.sqrt(cfg.noise_variance))
    total = 0.0
    try:
        for m in range(cfg.num_bs_antennas):
            eta = bd.ParameterVector(gbar=G[m], sigma=sigma)
            total += bd.crlb_pa(fim_fn(Xbar_p, eta, spec)).channel_mse_bound
    except QmimoError:
        return float("nan")
    # gbar stacks [Re h; Im h], so the real-coordinate trace already equals
    # the complex-channel MSE
    return total / float(np.sum(np.abs(H) ** 2))


def _hybrid_bound(rp: ResolvedPoint, plan: SweepPlan, ci: int) -> float:
    """Hybrid-bound NMSE reference for Gaussian-prior sweeps (one antenna
    is representative; the prior makes antennas exchangeable)."""
    cfg = rp.cfg
    Xbar = None
    if plan.orthogonal_pilots:
        Xbar = sm.to_bivariate_real(
            sm.draw_pilots(cfg, sm.substream(plan.seed, ci), orthogonal=True)
        )
    rng = sm.substream(plan.seed, ci, plan.num_realizations)
    try:
        fim = bd.hybrid_crlb(cfg, rp.spec, plan.ncrlb_draws, rng, Xbar=Xbar)
        per_ant = bd.crlb_pa(fim).channel_mse_bound
    except QmimoError:
        return float("nan")
    # E||h_m||^2 = K * prior_variance per antenna; the complex-channel MSE
    # is the full bivariate-real trace
    return per_ant / (cfg.num_users * cfg.prior_variance)


def _aggregate(point, outcomes, ncrlb_db, wall, n_total) -> MetricRecord:
    used = [o for o in outcomes if isinstance(o, dict) and o.get("ok")]
    errors = [o for o in outcomes if not (isinstance(o, dict) and o.get("ok"))]
    n_used = len(used)
    failed = n_total - n_used
    if n_used:
        vals = np.array([o["nmse"] for o in used])
        mean = float(np.mean(vals))
        std_err = (
            float(np.std(vals, ddof=1) / np.sqrt(n_used))
            if n_used > 1
            else float("nan")
        )
        sers = np.array([o["ser"] for o in used])
        ser_mean = (
            float(np.mean(sers[np.isfinite(sers)]))
            if np.any(np.isfinite(sers))
            else float("nan")
        )
        bounds_arr = np.array([o["bound"] for o in used])
        finite_b = bounds_arr[np.isfinite(bounds_arr)]
        if np.isnan(ncrlb_db) and finite_b.size:
            with np.errstate(divide="ignore"):
                ncrlb_db = float(10.0 * np.log10(np.mean(finite_b)))
        iters = float(np.mean([o["iters"] for o in used]))
        with np.errstate(divide="ignore"):
            nmse_db = float(10.0 * np.log10(mean)) if mean >= 0 else float("nan")
    else:
        mean = nmse_db = std_err = ser_mean = iters = float("nan")
    examples = tuple(str(e) for e in errors[:3])
    return MetricRecord(
        axis_values=tuple(point),
        nmse=mean,
        nmse_db=nmse_db,
        ncrlb_db=ncrlb_db,
        ser=ser_mean,
        mc_std_err=std_err,
        realizations_used=n_used,
        failed_trials=failed,
        valid=n_used > 0 and failed <= 0.05 * n_total,
        mean_iterations=iters,
        wall_time_s=wall,
        error_examples=examples,
    )


def run_sweep(plan: SweepPlan, threads: int | None = None) -> list:
    """Execute every combination of the plan and aggregate its metrics.

    threads caps the worker pool; None or 1 runs serially. Results do not
    depend on the thread count.
    """
    if threads is not None and threads < 1:
        raise ConfigError("threads must be positive")
    records = []
    for ci, point in enumerate(sweep_combinations(plan)):
        rp = resolve_point(plan, point)
        t0 = time.perf_counter()
        n = plan.num_realizations
        outcomes: list = [None] * n

        def one(ti: int, _rp=rp, _ci=ci):
            try:
                return _run_trial(_rp, plan, _ci, ti)
            except QmimoError as exc:
                return f"{type(exc).__name__}: {exc}"
            except np.linalg.LinAlgError as exc:
                return f"LinAlgError: {exc}"

        if threads is None or threads == 1:
            for ti in range(n):
                outcomes[ti] = one(ti)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for ti, res in enumerate(pool.map(one, range(n))):
                    outcomes[ti] = res
        ncrlb_db = float("nan")
        if rp.cfg.channel_kind == "gaussian_prior":
            b = _hybrid_bound(rp, plan, ci)
            if np.isfinite(b):
                with np.errstate(divide="ignore"):
                    ncrlb_db = float(10.0 * np.log10(b))
        records.append(
            _aggregate(point, outcomes, ncrlb_db, time.perf_counter() - t0, n)
        )
    return records
