"""Frequency-domain algebraic form of the linearised (LPV) system.

The windowed ODE becomes, bin by bin over the selected band,

    psi_out . y_F  =  F_band [Omega_1 ... Omega_nx] c_stack  +  Psi gamma  +  e

with Omega_j the diagonal of the j-th spectral derivative of the small input
or output, Psi a low-degree polynomial basis absorbing transient and alias
leakage, and e the equation error whose per-bin covariance supplies the
iterative weighting.

Derivative diagonals always use the monomial (j*omega)^n form so they encode
true time-derivatives; a bounded Legendre family may be selected for the Psi
transient columns only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import (
    ConfigurationError,
    DimensionError,
    FrequencyBasis,
    Spectrum,
    TimeGrid,
    dft,
    dft_matrix,
    psi_basis,
)


@dataclass(frozen=True)
class NoiseCovariance:
    """Per-bin noise variances over the full bin set K (diagonal covariances)."""

    c_u: np.ndarray
    c_y: np.ndarray
    c_uy: np.ndarray

    def __post_init__(self):
        cu = np.asarray(self.c_u, dtype=float)
        cy = np.asarray(self.c_y, dtype=float)
        cuy = np.asarray(self.c_uy, dtype=complex)
        if not (len(cu) == len(cy) == len(cuy)):
            raise DimensionError("noise covariance vectors must share one length")
        if np.any(cu < 0) or np.any(cy < 0):
            raise ConfigurationError("noise variances must be nonnegative")
        object.__setattr__(self, "c_u", cu)
        object.__setattr__(self, "c_y", cy)
        object.__setattr__(self, "c_uy", cuy)

    def is_zero(self) -> bool:
        return (
            float(np.max(self.c_u, initial=0.0)) == 0.0
            and float(np.max(self.c_y, initial=0.0)) == 0.0
        )


def transient_degree_floor(n_a: int, n_b: int) -> int:
    """Minimum admissible transient polynomial degree, max(n_a+1, n_b) - 1."""
    return max(n_a + 1, n_b) - 1


def default_band(grid: TimeGrid, max_excited_hz: float) -> np.ndarray:
    """Default analysis band: bins with |f| <= 2 x the highest excited harmonic."""
    f = grid.bin_frequencies
    return grid.harmonics[np.abs(f) <= 2.0 * max_excited_hz + 1e-12]


@dataclass
class FreqLpvOperator:
    """Precomputed regressor pieces of the frequency-domain LPV equation."""

    grid: TimeGrid
    n_a: int
    n_b: int
    band: np.ndarray  # selected xi values, ascending
    band_idx: np.ndarray  # positions of band bins inside K
    omega_diags: np.ndarray  # (n_x, N) real derivative diagonals
    f_band: np.ndarray  # (n_band, N) rows of the unitary DFT matrix
    psi_transient: np.ndarray  # (n_band, N_gamma+1)
    psi_out: np.ndarray  # (n_band,) monomial (j w)^(n_a+1) on the band
    y_f_band: np.ndarray  # (n_band,) DFT of the measured small output on the band
    u_f: Spectrum
    y_f: Spectrum
    psi_kind: FrequencyBasis
    n_gamma: int
    row_weights: np.ndarray = field(default=None)  # sqrt multiplicity for half-band mode

    @property
    def n_x(self) -> int:
        return self.n_a + self.n_b + 2

    @property
    def n_band(self) -> int:
        return len(self.band)

    def rhs_const(self) -> np.ndarray:
        """Constant part of the equation error, -psi_out . y_F on the band (row-weighted)."""
        out = -self.psi_out * self.y_f_band
        if self.row_weights is not None:
            out = out * self.row_weights
        return out

    def coefficient_map(self) -> np.ndarray:
        """Complex map from sample-stacked coefficients to the band residual.

        Column (k * n_x + j) maps c_j(t_k) to F_band[:, k] * omega_j[k]; the
        stacking matches row-major (sample, coefficient) flattening.
        """
        n, nx = self.grid.n_samples, self.n_x
        m = np.empty((self.n_band, n * nx), dtype=complex)
        for j in range(nx):
            m[:, j::nx] = self.f_band * self.omega_diags[j][None, :]
        return m


def build_operator(
    dataset,
    psi_kind: FrequencyBasis | None = None,
    n_gamma: int | None = None,
    band: np.ndarray | None = None,
    half_band: bool = False,
) -> FreqLpvOperator:
    """Assemble the frequency-domain operator for a dataset.

    ``band`` lists the bin indices xi to keep (defaults to every bin); with
    ``half_band`` only xi >= 0 bins are kept and interior rows carry weight
    sqrt(2), which reproduces the full-band quadratic forms exactly for real
    signals.  ``n_gamma`` must reach the floor max(n_a+1, n_b) - 1.
    """
    grid: TimeGrid = dataset.grid
    n_a, n_b = dataset.n_a, dataset.n_b
    n_x = n_a + n_b + 2
    floor = transient_degree_floor(n_a, n_b)
    if n_gamma is None:
        n_gamma = floor + 3
    if n_gamma < floor:
        raise ConfigurationError(f"transient degree {n_gamma} below the floor {floor}")

    harmonics = grid.harmonics
    if band is None:
        band = harmonics.copy()
    band = np.asarray(band, dtype=int)
    if len(band) == 0:
        raise ConfigurationError("empty analysis band")
    if not np.all(np.isin(band, harmonics)):
        raise ConfigurationError("band bins must belong to the grid's bin set")
    band = np.sort(band)
    weights = None
    if half_band:
        band = band[band >= 0]
        neg = -band
        weights = np.where((band > 0) & np.isin(neg, harmonics), np.sqrt(2.0), 1.0)

    pos = {int(x): i for i, x in enumerate(harmonics)}
    band_idx = np.array([pos[int(x)] for x in band])

    u_f = dft(dataset.u_small, grid)
    y_f = dft(dataset.y_small, grid)
    omega_full = grid.angular_frequencies

    # spectral derivative diagonals (monomial psi regardless of the Psi family);
    # the unpaired Nyquist bin of an even-length grid has no conjugate partner
    # and is zeroed so real signals give exactly real derivatives
    omega_diags = np.empty((n_x, grid.n_samples))
    f_full = dft_matrix(grid)
    fh = f_full.conj().T
    nyq_mask = np.ones(grid.n_samples)
    if grid.n_samples % 2 == 0:
        nyq_mask[0] = 0.0
    y_bins = y_f.bins * nyq_mask
    u_bins = u_f.bins * nyq_mask
    for n in range(n_a + 1):
        vec = fh @ ((1j * omega_full) ** n * y_bins)
        omega_diags[n] = _require_real(vec, f"output derivative order {n}")
    for m in range(n_b + 1):
        vec = fh @ ((1j * omega_full) ** m * u_bins)
        omega_diags[n_a + 1 + m] = _require_real(vec, f"input derivative order {m}")

    omega_band = omega_full[band_idx]
    if psi_kind is None:
        psi_kind = FrequencyBasis("legendre", max_degree=n_gamma,
                                  omega_max=float(np.max(np.abs(omega_full))))

    psi_cols = [psi_basis(psi_kind, omega_band, n) for n in range(n_gamma + 1)]
    psi_transient = np.column_stack(psi_cols)
    psi_out = (1j * omega_band) ** (n_a + 1)

    f_band = f_full[band_idx]
    y_f_band = y_f.bins[band_idx]
    if weights is not None:
        wcol = weights[:, None]
        f_band = f_band * wcol
        psi_transient = psi_transient * wcol

    op = FreqLpvOperator(
        grid=grid,
        n_a=n_a,
        n_b=n_b,
        band=band,
        band_idx=band_idx,
        omega_diags=omega_diags,
        f_band=f_band,
        psi_transient=psi_transient,
        psi_out=psi_out,
        y_f_band=y_f_band,
        u_f=u_f,
        y_f=y_f,
        psi_kind=psi_kind,
        n_gamma=n_gamma,
        row_weights=weights,
    )
    return op


def _require_real(vec: np.ndarray, what: str, tol: float = 1e-8) -> np.ndarray:
    scale = max(float(np.max(np.abs(vec))), 1e-30)
    imag = float(np.max(np.abs(vec.imag)))
    if imag > tol * scale:
        raise DimensionError(
            f"{what}: diagonal has imaginary part {imag:.2e} (signal not band-limited?)"
        )
    return vec.real


def equation_error(op: FreqLpvOperator, c_samples: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Band-restricted residual for coefficient samples (N, n_x) and transient gamma."""
    c_samples = np.asarray(c_samples, dtype=float)
    n, nx = op.grid.n_samples, op.n_x
    if c_samples.shape != (n, nx):
        raise DimensionError(f"coefficient samples must be ({n}, {nx})")
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (op.n_gamma + 1,):
        raise DimensionError(f"gamma must have length {op.n_gamma + 1}")
    acc = _apply_rhs(op, c_samples)
    e = acc + op.psi_transient @ gamma
    e = e - _weighted_psi_out(op) * op.y_f_band
    return e


def _weighted_psi_out(op: FreqLpvOperator) -> np.ndarray:
    if op.row_weights is not None:
        return op.psi_out * op.row_weights
    return op.psi_out


def _apply_rhs(op: FreqLpvOperator, c_samples: np.ndarray) -> np.ndarray:
    prod = op.omega_diags.T * c_samples  # (N, n_x) elementwise
    return op.f_band @ prod.sum(axis=1)


def equation_error_covariance(op: FreqLpvOperator, c_samples: np.ndarray,
                              noise: NoiseCovariance) -> np.ndarray:
    """diag(cov(e)) over the band for the current coefficient iterate.

    Uses the analytic form cov(e) = [A B] C [A B]^H with A, B the output- and
    input-channel maps at the current coefficients and C the per-bin diagonal
    noise covariance.
    """
    c_samples = np.asarray(c_samples, dtype=float)
    n, nx = op.grid.n_samples, op.n_x
    if c_samples.shape != (n, nx):
        raise DimensionError(f"coefficient samples must be ({n}, {nx})")
    if not (len(noise.c_y) == n and len(noise.c_u) == n):
        raise DimensionError("noise covariance length must match the grid")
    f_full = dft_matrix(op.grid)
    fh = f_full.conj().T
    omega = op.grid.angular_frequencies
    f_band_rows = f_full[op.band_idx]

    a_mat = np.zeros((op.n_band, n), dtype=complex)
    b_mat = np.zeros((op.n_band, n), dtype=complex)
    for der in range(op.n_a + 1):
        t = (f_band_rows * c_samples[:, der][None, :]) @ fh
        a_mat += t * ((1j * omega) ** der)[None, :]
    rows = np.arange(op.n_band)
    a_mat[rows, op.band_idx] -= (1j * omega[op.band_idx]) ** (op.n_a + 1)
    for der in range(op.n_b + 1):
        t = (f_band_rows * c_samples[:, op.n_a + 1 + der][None, :]) @ fh
        b_mat += t * ((1j * omega) ** der)[None, :]

    var = (np.abs(a_mat) ** 2) @ noise.c_y + (np.abs(b_mat) ** 2) @ noise.c_u
    cross = (a_mat.conj() * b_mat) @ noise.c_uy
    var = var + 2.0 * np.real(cross)
    # var describes the unweighted residual rows; in half-band mode the weighted
    # rows divided by this var then add up to the full-band weighted fit exactly
    return np.maximum(var, 0.0)


def realify_quadratic(e_matrix: np.ndarray, e_const: np.ndarray, weights: np.ndarray):
    """Exact real quadratic data of e^H W^{-1} e with e = E z + f, z real.

    ``weights`` is the diagonal of W (positive).  Returns (P, q, c0) such that
    the form equals 0.5 z'Pz + q'z + c0 pointwise.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ConfigurationError("weights must be strictly positive")
    if e_matrix.shape[0] != len(e_const) or len(weights) != len(e_const):
        raise DimensionError("realify: row counts disagree")
    sw = 1.0 / np.sqrt(weights)
    ew = e_matrix * sw[:, None]
    fw = e_const * sw
    big = np.vstack([ew.real, ew.imag])
    rhs = np.concatenate([fw.real, fw.imag])
    p = 2.0 * (big.T @ big)
    q = 2.0 * (big.T @ rhs)
    c0 = float(rhs @ rhs)
    return p, q, c0


def weighted_fit_value(op: FreqLpvOperator, c_samples: np.ndarray, gamma: np.ndarray,
                       weights: np.ndarray) -> float:
    """e^H W^{-1} e at explicit coefficient samples."""
    e = equation_error(op, c_samples, gamma)
    return float(np.real(np.sum(np.abs(e) ** 2 / np.asarray(weights, dtype=float))))
