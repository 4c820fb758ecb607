"""System configuration, constellations and deterministic signal transforms.

The complex uplink model Y = HX + N (H: M x K channel, X: K x T transmit
block, N: M x T circularly symmetric noise with per-entry variance sigma^2)
is mapped to bivariate real form per antenna:

    Xbar = [[Re(X^T), -Im(X^T)], [Im(X^T), Re(X^T)]]   (2T x 2K)
    gbar = [Re(h); Im(h)]                              (2K)
    sbar = Xbar @ gbar = [Re(X^T h); Im(X^T h)]        (2T)

so each real dimension carries noise of variance sigma^2 / 2.

Random draws take an explicit numpy Generator. Monte Carlo code derives one
independent substream per (seed, realization index) through
:func:`substream`, which makes parallel trial execution bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "SystemConfig",
    "Constellation",
    "make_constellation",
    "candidate_matrix",
    "to_bivariate_real",
    "complex_to_real_vec",
    "real_vec_to_complex",
    "draw_channel",
    "draw_noise",
    "draw_symbols",
    "draw_pilots",
    "received_signal",
    "substream",
]

_CHANNEL_KINDS = ("deterministic", "gaussian_prior")
_CONSTELLATIONS = ("qpsk", "qam16")


@dataclass(frozen=True)
class SystemConfig:
    """Static description of one uplink scenario.

    ``noise_variance`` is ground truth used by generators and bound
    computations; estimators never read it except through explicit
    initialization options.
    """

    num_bs_antennas: int
    num_users: int
    pilot_len: int
    data_len: int = 0
    symbol_power: float = 1.0
    noise_variance: float = 1.0
    channel_kind: str = "deterministic"
    prior_variance: float = 1.0
    constellation: str = "qpsk"
    seed: int = 0

    def __post_init__(self):
        if self.num_bs_antennas < 1 or self.num_users < 1:
            raise ConfigError("need at least one antenna and one user")
        if self.pilot_len < self.num_users:
            raise ConfigError(
                f"pilot_len must be >= num_users "
                f"({self.pilot_len} < {self.num_users})"
            )
        if self.data_len < 0:
            raise ConfigError("data_len must be nonnegative")
        if not (self.symbol_power > 0.0 and np.isfinite(self.symbol_power)):
            raise ConfigError("symbol_power must be positive and finite")
        if not (self.noise_variance > 0.0 and np.isfinite(self.noise_variance)):
            raise ConfigError("noise_variance must be positive and finite")
        if self.channel_kind not in _CHANNEL_KINDS:
            raise ConfigError(f"unknown channel_kind {self.channel_kind!r}")
        if self.channel_kind == "gaussian_prior" and not self.prior_variance > 0:
            raise ConfigError("prior_variance must be positive")
        if self.constellation not in _CONSTELLATIONS:
            raise ConfigError(f"unknown constellation {self.constellation!r}")


@dataclass(frozen=True)
class Constellation:
    """Symbol set with zero mean and average power symbol_power."""

    name: str
    symbols: np.ndarray = field(repr=False)  # complex, shape (size,)
    gray_labels: tuple  # bit label per point, same order as symbols
    symbol_power: float

    @property
    def size(self) -> int:
        return int(self.symbols.size)


def make_constellation(name: str, symbol_power: float) -> Constellation:
    """Build a unit-average-power constellation scaled to ``symbol_power``.

    QPSK points are (+-sqrt(Ps/2) +- j sqrt(Ps/2)). 16-QAM is the Gray-coded
    4x4 grid with per-axis levels {-3,-1,1,3} scaled so the average power is
    ``symbol_power`` (the constant-modulus identity E|s| = sqrt(Ps) holds
    only for QPSK; 16-QAM is normalized by average power instead).
    """
    if symbol_power <= 0:
        raise ConfigError("symbol_power must be positive")
    if name == "qpsk":
        a = np.sqrt(symbol_power / 2.0)
        symbols = np.array(
            [a + 1j * a, -a + 1j * a, -a - 1j * a, a - 1j * a], dtype=complex
        )
        labels = (0b00, 0b01, 0b11, 0b10)
    elif name == "qam16":
        # Per-axis Gray order over amplitude levels -3,-1,1,3.
        axis_levels = np.array([-3.0, -1.0, 1.0, 3.0])
        axis_gray = (0b00, 0b01, 0b11, 0b10)
        scale = np.sqrt(symbol_power / 10.0)  # E[level^2] per axis = 5
        pts = []
        labels_list = []
        for ii, (li, gi) in enumerate(zip(axis_levels, axis_gray)):
            for qq, (lq, gq) in enumerate(zip(axis_levels, axis_gray)):
                pts.append(scale * (li + 1j * lq))
                labels_list.append((gi << 2) | gq)
        symbols = np.array(pts, dtype=complex)
        labels = tuple(labels_list)
    else:
        raise ConfigError(f"unknown constellation {name!r}")
    return Constellation(
        name=name, symbols=symbols, gray_labels=labels, symbol_power=symbol_power
    )


def candidate_matrix(const: Constellation, num_users: int) -> np.ndarray:
    """All |S|^K candidate transmit columns, shape (|S|^K, K).

    Ordering is lexicographic in the constellation index with user 0 as the
    most significant digit; ties in detection are broken by this index.
    """
    size = const.size
    count = size**num_users
    idx = np.arange(count)
    cols = np.empty((count, num_users), dtype=complex)
    for k in range(num_users - 1, -1, -1):
        cols[:, k] = const.symbols[idx % size]
        idx //= size
    return cols


def to_bivariate_real(X: np.ndarray) -> np.ndarray:
    """Map a complex K x T matrix to its 2T x 2K bivariate real form."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeError("expected a 2-D complex matrix")
    if not np.all(np.isfinite(X)):
        raise ShapeError("entries must be finite")
    Xt = X.T
    top = np.hstack([Xt.real, -Xt.imag])
    bot = np.hstack([Xt.imag, Xt.real])
    return np.vstack([top, bot])


def complex_to_real_vec(v: np.ndarray) -> np.ndarray:
    """[Re(v); Im(v)] stacking of a complex vector."""
    v = np.asarray(v).reshape(-1)
    return np.concatenate([v.real, v.imag])


def real_vec_to_complex(vbar: np.ndarray) -> np.ndarray:
    """Inverse of complex_to_real_vec."""
    vbar = np.asarray(vbar, dtype=float).reshape(-1)
    if vbar.size % 2 != 0:
        raise ShapeError("real stacked vector must have even length")
    half = vbar.size // 2
    return vbar[:half] + 1j * vbar[half:]


def draw_channel(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. circularly symmetric complex Gaussian M x K channel with
    per-entry variance cfg.prior_variance."""
    shape = (cfg.num_bs_antennas, cfg.num_users)
    std = np.sqrt(cfg.prior_variance / 2.0)
    return rng.normal(0.0, std, shape) + 1j * rng.normal(0.0, std, shape)


def draw_noise(
    cfg: SystemConfig, shape: tuple, rng: np.random.Generator
) -> np.ndarray:
    """Complex noise with per-entry variance cfg.noise_variance
    (sigma^2/2 per real dimension)."""
    std = np.sqrt(cfg.noise_variance / 2.0)
    return rng.normal(0.0, std, shape) + 1j * rng.normal(0.0, std, shape)


def draw_symbols(
    cfg: SystemConfig, length: int, rng: np.random.Generator
) -> np.ndarray:
    """K x length matrix of symbols drawn uniformly from the constellation."""
    if length < 0:
        raise ConfigError("length must be nonnegative")
    const = make_constellation(cfg.constellation, cfg.symbol_power)
    idx = rng.integers(0, const.size, size=(cfg.num_users, length))
    return const.symbols[idx]


def draw_pilots(
    cfg: SystemConfig, rng: np.random.Generator, orthogonal: bool = False
) -> np.ndarray:
    """K x T_p pilot block.

    Random mode draws constellation symbols. Orthogonal mode uses scaled
    DFT rows, X[k,t] = sqrt(Ps) exp(-2 pi j k t / T_p), which satisfy
    X X^H = T_p Ps I for K <= T_p.
    """
    if not orthogonal:
        return draw_symbols(cfg, cfg.pilot_len, rng)
    k = np.arange(cfg.num_users)[:, None]
    t = np.arange(cfg.pilot_len)[None, :]
    return np.sqrt(cfg.symbol_power) * np.exp(
        -2j * np.pi * k * t / cfg.pilot_len
    )


def received_signal(H: np.ndarray, X: np.ndarray, N: np.ndarray) -> np.ndarray:
    """Y = H X + N with strict dimension agreement."""
    H = np.asarray(H)
    X = np.asarray(X)
    N = np.asarray(N)
    if H.ndim != 2 or X.ndim != 2 or N.ndim != 2:
        raise ShapeError("H, X, N must be matrices")
    if H.shape[1] != X.shape[0] or N.shape != (H.shape[0], X.shape[1]):
        raise ShapeError(
            f"incompatible shapes H{H.shape} X{X.shape} N{N.shape}"
        )
    return H @ X + N


def substream(seed: int, *indices: int) -> np.random.Generator:
    """Independent, reproducible RNG substream for (seed, *indices).

    Built on numpy's SeedSequence so distinct index tuples give streams that
    are statistically independent and identical across platforms and thread
    schedules.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, indices)]))
