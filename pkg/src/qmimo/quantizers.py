"""Two-threshold quantizer family.

Two hardware variants share the symmetric threshold pair tau1 = -tau2 < 0:

* ternary: one noisy sample v is compared against both thresholds, giving
  bit pairs [0,0] (v < tau1), [1,0] (tau1 <= v < tau2), [1,1] (v >= tau2).
  The pattern [0,1] cannot occur.
* parallel_one_bit: two independently noised copies of the signal are each
  compared against one threshold, bit_i = [v + n_i >= tau_i]; all four bit
  patterns are possible.

Ties at a threshold resolve to 1 (">=" on both boundaries); this is a
measure-zero event fixed only for determinism.

The labeled representation maps regions to {-alpha*delta, 0, +alpha*delta}
with alpha chosen so the label variance of a zero-mean Gaussian input equals
its power (validated by a Monte Carlo variance test). The sqrt(2) inside the
CDF argument of the ternary alpha reflects the per-real-dimension variance
halving of complex signals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DegenerateThresholdError, DomainError, ShapeError

__all__ = [
    "QuantizerSpec",
    "QuantizedBits",
    "labeled_scale",
    "quantize_ternary",
    "quantize_po",
    "quantize_block",
    "labeled_quantize",
    "labels_from_bits",
    "dynamic_thresholds",
    "analytic_dynamic_thresholds",
    "default_input_power",
]

_KINDS = ("ternary", "parallel_one_bit")


def labeled_scale(kind: str, input_power: float, tau1: float, delta: float) -> float:
    """Variance-matching label scale alpha.

    Ternary: alpha^2 = P / (4 delta^2 Q(sqrt(2) tau1 / sqrt(P))) so that
    Var(z~) = P for a zero-mean complex Gaussian input of power P (tau1 < 0
    makes the CDF argument negative). The two-level variant admits the same
    matching with alpha^2 = P / (2 delta^2).
    """
    if input_power <= 0 or not np.isfinite(input_power):
        raise DomainError("input_power must be positive and finite")
    if delta <= 0:
        raise DomainError("delta must be positive")
    if kind == "ternary":
        p_out = nm.std_normal_cdf(np.sqrt(2.0) * tau1 / np.sqrt(input_power))
        return float(np.sqrt(input_power / (4.0 * delta**2 * p_out)))
    if kind == "parallel_one_bit":
        return float(np.sqrt(input_power / (2.0 * delta**2)))
    raise ConfigError(f"unknown quantizer kind {kind!r}")


@dataclass(frozen=True)
class QuantizerSpec:
    """Threshold pair plus optional labeled-mode parameters.

    The symmetric convention tau1 = -tau2 < 0 is enforced. Labeled mode
    requires label_delta, scale_alpha and input_power together, and
    scale_alpha must equal the variance-matching expression for the
    configured input power.
    """

    kind: str
    tau1: float
    tau2: float
    label_delta: float | None = None
    scale_alpha: float | None = None
    input_power: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown quantizer kind {self.kind!r}")
        if not (np.isfinite(self.tau1) and np.isfinite(self.tau2)):
            raise ConfigError("thresholds must be finite")
        if not self.tau1 < self.tau2:
            raise ConfigError("tau1 < tau2 required")
        if self.tau1 != -self.tau2 or not self.tau2 > 0:
            raise ConfigError("symmetric convention tau1 = -tau2 < 0 required")
        labeled_fields = (self.label_delta, self.scale_alpha, self.input_power)
        if any(f is not None for f in labeled_fields):
            if any(f is None for f in labeled_fields):
                raise ConfigError(
                    "labeled mode needs label_delta, scale_alpha and "
                    "input_power together"
                )
            expect = labeled_scale(
                self.kind, self.input_power, self.tau1, self.label_delta
            )
            if abs(self.scale_alpha - expect) > 1e-10 * max(1.0, expect):
                raise ConfigError(
                    f"scale_alpha {self.scale_alpha} does not match the "
                    f"variance-matching value {expect}"
                )

    @classmethod
    def symmetric(
        cls,
        kind: str,
        tau2: float,
        label_delta: float | None = None,
        input_power: float | None = None,
    ) -> "QuantizerSpec":
        """Build a spec from tau2 alone; labeled mode if delta and power given."""
        alpha = None
        if label_delta is not None and input_power is not None:
            alpha = labeled_scale(kind, input_power, -tau2, label_delta)
        return cls(
            kind=kind,
            tau1=-tau2,
            tau2=tau2,
            label_delta=label_delta,
            scale_alpha=alpha,
            input_power=input_power,
        )

    @property
    def labeled(self) -> bool:
        return self.label_delta is not None

    @property
    def label_value(self) -> float:
        if not self.labeled:
            raise ConfigError("quantizer spec has no labeled mode configured")
        return self.scale_alpha * self.label_delta


@dataclass(frozen=True)
class QuantizedBits:
    """Bit-pair outputs, one row of two bits per real dimension."""

    zbar: np.ndarray  # (2T, 2) uint8
    kind: str

    def __post_init__(self):
        z = np.asarray(self.zbar)
        if z.ndim != 2 or z.shape[1] != 2:
            raise ShapeError("zbar must have shape (2T, 2)")
        if not np.all((z == 0) | (z == 1)):
            raise DomainError("zbar entries must be bits")
        if self.kind == "ternary":
            if np.any((z[:, 0] == 0) & (z[:, 1] == 1)):
                raise DomainError("pattern [0,1] cannot occur for ternary kind")
        elif self.kind != "parallel_one_bit":
            raise ConfigError(f"unknown quantizer kind {self.kind!r}")


def _check_finite(name, *vals):
    for v in vals:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise DomainError(f"{name} must be finite")


def quantize_ternary(v, spec: QuantizerSpec):
    """Bit pair(s) for sample(s) v under the ternary rule."""
    _check_finite("v", v)
    arr = np.asarray(v, dtype=float)
    bits = np.stack([arr >= spec.tau1, arr >= spec.tau2], axis=-1).astype(np.uint8)
    return bits


def quantize_po(v, n1, n2, spec: QuantizerSpec):
    """Bit pair(s) for the parallel one-bit rule with caller-supplied
    independent noise draws n1, n2."""
    if spec.kind != "parallel_one_bit":
        raise ConfigError("quantize_po requires a parallel_one_bit spec")
    _check_finite("inputs", v, n1, n2)
    v = np.asarray(v, dtype=float)
    b1 = (v + np.asarray(n1, dtype=float)) >= spec.tau1
    b2 = (v + np.asarray(n2, dtype=float)) >= spec.tau2
    return np.stack([b1, b2], axis=-1).astype(np.uint8)


def quantize_block(sbar: np.ndarray, noise: np.ndarray, spec: QuantizerSpec) -> QuantizedBits:
    """Quantize a noiseless real signal vector with explicit noise draws.

    For the ternary kind ``noise`` has shape (2T,), one shared draw per real
    dimension. For parallel_one_bit it has shape (2T, 2), one independent
    draw per branch.
    """
    sbar = np.asarray(sbar, dtype=float).reshape(-1)
    noise = np.asarray(noise, dtype=float)
    _check_finite("sbar/noise", sbar, noise)
    if spec.kind == "ternary":
        if noise.shape != sbar.shape:
            raise ShapeError(
                f"ternary noise must have shape {sbar.shape}, got {noise.shape}"
            )
        bits = quantize_ternary(sbar + noise, spec)
    else:
        if noise.shape != (sbar.size, 2):
            raise ShapeError(
                f"parallel_one_bit noise must have shape ({sbar.size}, 2), "
                f"got {noise.shape}"
            )
        bits = quantize_po(sbar, noise[:, 0], noise[:, 1], spec)
    return QuantizedBits(zbar=bits, kind=spec.kind)


def labeled_quantize(v, spec: QuantizerSpec):
    """Label value(s) for sample(s) v.

    Ternary: region label in {-alpha*delta, 0, +alpha*delta}. For the
    two-level kind each branch maps its own comparison to -+alpha*delta;
    the returned array has a trailing axis of length 2 (shared v, i.e. the
    zero-added-noise case; noisy branches go through bits instead).
    """
    if not spec.labeled:
        raise ConfigError("labeled mode not configured on this spec")
    _check_finite("v", v)
    arr = np.asarray(v, dtype=float)
    lab = spec.label_value
    if spec.kind == "ternary":
        out = np.where(arr < spec.tau1, -lab, np.where(arr >= spec.tau2, lab, 0.0))
        return float(out) if np.isscalar(v) else out
    b = quantize_ternary(arr, spec).astype(float)
    return (2.0 * b - 1.0) * lab


def labels_from_bits(bits: QuantizedBits, spec: QuantizerSpec) -> np.ndarray:
    """Map bit rows to label values.

    Ternary rows {[0,0],[1,0],[1,1]} map to {-a, 0, +a} (shape (2T,)); for
    parallel_one_bit each bit maps to -+a independently (shape (2T, 2)).
    """
    if not spec.labeled:
        raise ConfigError("labeled mode not configured on this spec")
    z = bits.zbar.astype(int)
    a = spec.label_value
    if spec.kind == "ternary":
        return a * (z[:, 0] + z[:, 1] - 1.0)
    return a * (2.0 * z - 1.0)


def dynamic_thresholds(Y: np.ndarray, c: float) -> tuple[float, float]:
    """Gain-control thresholds tau2 = ||Y||_F / (c M T), tau1 = -tau2.

    Uses the realized Frobenius norm of the received block as the proxy for
    its expectation; see analytic_dynamic_thresholds for the closed-form
    expectation variant used in bound computations.
    """
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.size == 0:
        raise ShapeError("Y must be a nonempty matrix")
    if not c > 0:
        raise DomainError("c must be positive")
    fro = float(np.linalg.norm(Y))
    if fro == 0.0:
        raise DegenerateThresholdError("all-zero received block")
    tau2 = fro / (c * Y.shape[0] * Y.shape[1])
    return -tau2, tau2


def analytic_dynamic_thresholds(
    num_antennas: int,
    block_len: int,
    signal_power: float,
    noise_variance: float,
    c: float,
) -> tuple[float, float]:
    """Expectation form of the dynamic thresholds.

    E||Y||_F is approximated by sqrt(M T (P_s K + sigma^2)) with
    signal_power = P_s K, giving tau2 = sqrt((P_s K + sigma^2)/(M T)) / c.
    """
    if not c > 0:
        raise DomainError("c must be positive")
    total = signal_power + noise_variance
    if total <= 0:
        raise DegenerateThresholdError("nonpositive received power")
    tau2 = float(np.sqrt(total / (num_antennas * block_len)) / c)
    return -tau2, tau2


def default_input_power(
    num_users: int, symbol_power: float, noise_variance: float
) -> float:
    """Per-receive-dimension labeled-mode power default, P_s K + sigma^2."""
    return float(symbol_power * num_users + noise_variance)
