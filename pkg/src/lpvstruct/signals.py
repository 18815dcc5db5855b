"""Time/frequency primitives: uniform grids, unitary DFT, multisines, frequency bases.

Conventions used throughout the package:

* a uniform time grid has points ``t_k = start_time + (k-1) T_s`` for ``k = 1..N``;
* DFT bins are indexed by the integer harmonic ``xi`` running over
  ``K = {-floor(N/2), ..., ceil(N/2)-1}`` in ascending order (negative first);
* the DFT matrix is unitary, ``F(xi, t_k) = N**-0.5 * exp(-2j*pi*xi*t_k/(N*T_s))``,
  so Parseval holds with no extra factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import eval_legendre


class DimensionError(ValueError):
    """Signal/operator shape mismatch."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling grid with N >= 2 points spaced T_s seconds apart."""

    n_samples: int
    sample_period: float
    start_time: float = 0.0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigurationError(f"need at least 2 samples, got {self.n_samples}")
        if not self.sample_period > 0:
            raise ConfigurationError(f"sample period must be > 0, got {self.sample_period}")

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.sample_period

    @property
    def nyquist(self) -> float:
        return 0.5 * self.sample_rate

    @property
    def duration(self) -> float:
        """Length of the periodic window, N * T_s."""
        return self.n_samples * self.sample_period

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.sample_period * np.arange(self.n_samples)

    @property
    def harmonics(self) -> np.ndarray:
        """Bin indices xi in ascending order, negative frequencies first."""
        n = self.n_samples
        return np.arange(-(n // 2), (n + 1) // 2)

    @property
    def angular_frequencies(self) -> np.ndarray:
        """omega_xi = 2*pi*xi / (N*T_s) for each bin."""
        return 2.0 * np.pi * self.harmonics / self.duration

    @property
    def bin_frequencies(self) -> np.ndarray:
        """Bin frequencies in Hz."""
        return self.harmonics / self.duration

    def window(self, t_begin: float, t_end: float) -> "TimeGrid":
        """Sub-grid of samples with t_begin <= t < t_end (half-open)."""
        t = self.times
        eps = 1e-9 * self.sample_period
        mask = (t >= t_begin - eps) & (t < t_end - eps)
        n = int(mask.sum())
        if n < 2:
            raise ConfigurationError(
                f"window [{t_begin}, {t_end}) holds {n} samples of the grid"
            )
        return TimeGrid(n, self.sample_period, float(t[mask][0]))

    def index_of_time(self, t: float) -> int:
        k = round((t - self.start_time) / self.sample_period)
        if not (0 <= k < self.n_samples):
            raise ConfigurationError(f"time {t} outside grid span")
        return int(k)


@dataclass(frozen=True)
class Spectrum:
    """Complex DFT bins over K, stored in ascending-xi order."""

    bins: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        if len(self.bins) != self.grid.n_samples:
            raise DimensionError(
                f"{len(self.bins)} bins but grid has {self.grid.n_samples} samples"
            )

    @property
    def harmonics(self) -> np.ndarray:
        return self.grid.harmonics

    @property
    def angular_frequencies(self) -> np.ndarray:
        return self.grid.angular_frequencies

    def conjugate_symmetry_defect(self) -> float:
        """max |X(-xi) - conj(X(xi))| over bins whose mirror exists."""
        xi = self.harmonics
        lo = int(-xi[0] <= xi[-1])  # skip unpaired -N/2 bin for even N
        fwd = self.bins[lo:] if xi[0] < 0 else self.bins
        return float(np.max(np.abs(fwd - np.conj(fwd[::-1]))))


def dft_matrix(grid: TimeGrid) -> np.ndarray:
    """Explicit unitary DFT matrix; rows ordered by ascending xi."""
    xi = grid.harmonics[:, None]
    t = grid.times[None, :]
    n = grid.n_samples
    return np.exp(-2j * np.pi * xi * t / grid.duration) / np.sqrt(n)


def dft(x: np.ndarray, grid: TimeGrid) -> Spectrum:
    """Unitary DFT of a sampled signal, bins in ascending-xi order.

    Computed with the FFT but matching the explicit matrix definition
    (including the N**-0.5 normalisation and the start-time phase).
    """
    x = np.asarray(x)
    if x.shape != (grid.n_samples,):
        raise DimensionError(f"signal shape {x.shape} != ({grid.n_samples},)")
    n = grid.n_samples
    raw = np.fft.fftshift(np.fft.fft(x)) / np.sqrt(n)
    # fft assumes t starts at 0; fold in the start-time phase of the definition
    phase = np.exp(-2j * np.pi * grid.harmonics * grid.start_time / grid.duration)
    return Spectrum(raw * phase, grid)


def idft(s: Spectrum, enforce_real: bool | None = None, tol: float = 1e-10) -> np.ndarray:
    """Inverse unitary DFT.

    With ``enforce_real=None`` the imaginary part is discarded automatically when
    the input is conjugate-symmetric (defect below ``tol`` relative to the signal
    scale); pass True/False to force the behaviour.
    """
    grid = s.grid
    n = grid.n_samples
    phase = np.exp(+2j * np.pi * grid.harmonics * grid.start_time / grid.duration)
    x = np.fft.ifft(np.fft.ifftshift(s.bins * phase)) * np.sqrt(n)
    if enforce_real is None:
        scale = max(float(np.max(np.abs(s.bins))), 1.0)
        enforce_real = s.conjugate_symmetry_defect() <= tol * scale
    if enforce_real:
        imag = float(np.max(np.abs(x.imag)))
        scale = max(float(np.max(np.abs(x.real))), 1.0)
        if imag > 1e-8 * scale:
            raise DimensionError(
                f"spectrum claimed conjugate-symmetric but iDFT has imag {imag:.2e}"
            )
        return x.real
    return x


@dataclass(frozen=True)
class MultisineSpec:
    """Flat-amplitude multisine: cosines at harmonics of f_0 with seeded random phases."""

    fundamental_hz: float
    harmonic_indices: tuple[int, ...]
    target_rms: float
    phase_seed: int = 0

    def __post_init__(self):
        if not self.target_rms > 0:
            raise ConfigurationError("target_rms must be > 0")
        if len(self.harmonic_indices) == 0:
            raise ConfigurationError("need at least one excited harmonic")
        if any(h <= 0 for h in self.harmonic_indices):
            raise ConfigurationError("harmonic indices must be positive integers")
        if len(set(self.harmonic_indices)) != len(self.harmonic_indices):
            raise ConfigurationError("harmonic indices must be distinct")

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.fundamental_hz * np.asarray(self.harmonic_indices, dtype=float)


@dataclass(frozen=True)
class MultisineSignal:
    """Realised multisine with analytic derivatives of every order.

    ``value(t, order)`` evaluates the order-th time derivative at arbitrary
    times; ``order=0`` is the signal itself.
    """

    amplitudes: np.ndarray
    omegas: np.ndarray  # rad/s
    phases: np.ndarray

    def value(self, t, order: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        # d^m/dt^m cos(w t + p) = w^m cos(w t + p + m*pi/2)
        arg = np.multiply.outer(t, self.omegas) + self.phases + order * np.pi / 2.0
        gain = self.amplitudes * self.omegas**order
        return np.tensordot(np.cos(arg), gain, axes=([-1], [0]))

    def __call__(self, t, order: int = 0):
        return self.value(t, order)


def synth_multisine(spec: MultisineSpec, grid: TimeGrid) -> MultisineSignal:
    """Synthesise a multisine whose sample RMS on ``grid`` equals target_rms exactly.

    Every excited frequency must sit on the DFT grid of ``grid`` and below
    Nyquist; phases are uniform on [0, 2*pi) drawn from ``phase_seed``.
    """
    freqs = spec.frequencies_hz
    df = 1.0 / grid.duration
    bins = freqs / df
    if np.max(np.abs(bins - np.round(bins))) > 1e-9:
        raise ConfigurationError(
            f"excited frequencies must lie on the DFT grid (df={df} Hz); got {freqs}"
        )
    if np.any(freqs >= grid.nyquist):
        raise ConfigurationError(
            f"excited frequencies must stay below Nyquist {grid.nyquist} Hz; got max {freqs.max()}"
        )
    rng = np.random.default_rng(spec.phase_seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(freqs))
    amps = np.ones(len(freqs))
    sig = MultisineSignal(amps, 2.0 * np.pi * freqs, phases)
    samples = sig.value(grid.times)
    rms = float(np.sqrt(np.mean(samples**2)))
    if rms == 0.0:
        raise ConfigurationError("degenerate multisine with zero RMS")
    return MultisineSignal(amps * (spec.target_rms / rms), sig.omegas, phases)


@dataclass(frozen=True)
class FrequencyBasis:
    """Frequency-basis family for the transient polynomial and derivative vectors.

    ``monomial`` gives psi_n = (j*omega)**n; ``legendre`` gives the bounded
    substitution j**(n mod 2) * P_n(omega/omega_max).
    """

    kind: str = "monomial"
    max_degree: int = 0
    omega_max: float = 0.0

    def __post_init__(self):
        if self.kind not in ("monomial", "legendre"):
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if self.kind == "legendre" and not self.omega_max > 0:
            raise ConfigurationError("legendre basis needs omega_max > 0")


def psi_basis(basis: FrequencyBasis, omegas: np.ndarray, n: int) -> np.ndarray:
    """Degree-n basis vector evaluated at angular frequencies ``omegas``."""
    if n < 0:
        raise ConfigurationError("degree must be >= 0")
    omegas = np.asarray(omegas, dtype=float)
    if basis.kind == "monomial":
        return (1j * omegas) ** n
    p = eval_legendre(n, omegas / basis.omega_max).astype(complex)
    return 1j * p if n % 2 else p


def save_signals_csv(path, grid: TimeGrid, columns: dict[str, np.ndarray]) -> None:
    """Write time-domain signals to CSV: column 1 is time (s), then named values."""
    names = list(columns)
    for name in names:
        if len(columns[name]) != grid.n_samples:
            raise DimensionError(f"column {name!r} length != grid length")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + names)
        t = grid.times
        for k in range(grid.n_samples):
            w.writerow([repr(float(t[k]))] + [repr(float(columns[n][k])) for n in names])


def load_signals_csv(path) -> tuple[TimeGrid, dict[str, np.ndarray]]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = list(data.dtype.names)
    t = np.asarray(data[names[0]], dtype=float)
    if len(t) < 2:
        raise DimensionError("CSV holds fewer than 2 samples")
    ts = float(np.mean(np.diff(t)))
    grid = TimeGrid(len(t), ts, float(t[0]))
    return grid, {n: np.asarray(data[n], dtype=float) for n in names[1:]}


def save_spectrum_csv(path, spectrum: Spectrum) -> None:
    """Write a spectrum to CSV with columns xi, omega, real, imag."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xi", "omega", "real", "imag"])
        for xi, om, b in zip(
            spectrum.harmonics, spectrum.angular_frequencies, spectrum.bins
        ):
            w.writerow([int(xi), repr(float(om)), repr(float(b.real)), repr(float(b.imag))])
