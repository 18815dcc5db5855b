"""Synthetic-data generation: nonlinear ODE integration around a large trajectory.

A system is an explicit ODE  y^(n_a+1) = f(y, ..., y^(n_a), u, ..., u^(n_b)).
Experiments drive it with a large input plus a small perturbation, extract the
small-signal response by run subtraction (two-experiment or symmetric
difference), and record the trajectory vector p_L together with exact noise
spectral covariances.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.signal

from .freq_model import NoiseCovariance
from .signals import ConfigurationError, TimeGrid, dft


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


class UnsupportedOracleError(RuntimeError):
    """Ground-truth gradient requested but the system carries none."""


@dataclass(frozen=True)
class NlSystemDef:
    """Explicit nonlinear ODE of output-derivative order n_a+1.

    ``rhs(p)`` evaluates f on trajectory points; p has shape (..., n_x) with
    columns ordered (y, ..., y^(n_a), u, ..., u^(n_b)) and the result drops the
    last axis.  ``grad_rhs`` (optional, same conventions, returns (..., n_x))
    is only used as a ground-truth oracle.
    """

    n_a: int
    n_b: int
    rhs: Callable[[np.ndarray], np.ndarray]
    grad_rhs: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.n_a < 0 or self.n_b < 0:
            raise ConfigurationError("derivative orders must be >= 0")

    @property
    def n_x(self) -> int:
        return self.n_a + self.n_b + 2

    @property
    def state_dim(self) -> int:
        return self.n_a + 1


def vdp_sparse_system() -> NlSystemDef:
    """Built-in benchmark: forced Van der Pol oscillator with additive terms.

    ddot(y) = -y + 0.5 (1 - y^2) dot(y) + 2 u + sin(2 u) + 0.2 ddot(u),
    posed over the overparameterised input list (y, dy, u, du, ddu, dddu);
    the du and dddu dependencies are spurious by construction.
    """

    def rhs(p):
        p = np.asarray(p, dtype=float)
        return (
            -p[..., 0]
            + 0.5 * (1.0 - p[..., 0] ** 2) * p[..., 1]
            + 2.0 * p[..., 2]
            + np.sin(2.0 * p[..., 2])
            + 0.2 * p[..., 4]
        )

    def grad_rhs(p):
        p = np.asarray(p, dtype=float)
        g = np.zeros(p.shape)
        g[..., 0] = -1.0 - p[..., 0] * p[..., 1]
        g[..., 1] = 0.5 * (1.0 - p[..., 0] ** 2)
        g[..., 2] = 2.0 + 2.0 * np.cos(2.0 * p[..., 2])
        g[..., 4] = 0.2
        return g

    return NlSystemDef(n_a=1, n_b=3, rhs=rhs, grad_rhs=grad_rhs, name="vdp-sparse")


@dataclass(frozen=True)
class LargeInputDef:
    """Large operating input with analytic derivatives: fn(t, order) -> value."""

    fn: Callable[[np.ndarray, int], np.ndarray]
    name: str = "custom"

    def __call__(self, t, order: int = 0):
        return self.fn(t, order)


def sine_large_input(amplitude: float = 1.0, omega: float = 1.0, phase: float = np.pi / 4.0) -> LargeInputDef:
    """u_L(t) = A sin(omega t + phase) with exact derivatives of all orders."""

    def fn(t, order=0):
        t = np.asarray(t, dtype=float)
        return amplitude * omega**order * np.sin(omega * t + phase + order * np.pi / 2.0)

    return LargeInputDef(fn, name=f"sine(a={amplitude},w={omega})")


def check_input_derivatives(inp, max_order: int, seed: int = 0, span=(0.0, 50.0), tol: float = 1e-6):
    """Central-difference consistency check of analytic derivatives at 10 random times."""
    rng = np.random.default_rng(seed)
    ts = rng.uniform(span[0], span[1], 10)
    h = 1e-4
    for m in range(1, max_order + 1):
        fd = (inp(ts + h, m - 1) - inp(ts - h, m - 1)) / (2 * h)
        err = np.max(np.abs(fd - inp(ts, m)))
        scale = max(float(np.max(np.abs(inp(ts, m)))), 1.0)
        if err > tol * scale:
            raise ConfigurationError(
                f"derivative order {m} inconsistent with finite differences (err {err:.2e})"
            )


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement-noise model: resonant filtered white noise at a target SNR."""

    kind: str = "none"  # none | filtered_white
    resonance_hz: float = 0.174
    damping: float = 0.1
    snr_db: float = 25.0
    applies_to: str = "output"  # output | input | both

    def __post_init__(self):
        if self.kind not in ("none", "filtered_white"):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if self.applies_to not in ("output", "input", "both"):
            raise ConfigurationError(f"unknown noise target {self.applies_to!r}")
        if self.kind == "filtered_white" and not (0 < self.damping < 1):
            raise ConfigurationError("damping must sit in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one synthetic experiment.

    The grid spans the whole simulation; the estimation window is a half-open
    [t_begin, t_end) sub-span chosen late enough for transients to have died
    (operator responsibility).  The small-signal level is an RMS dial.
    """

    grid: TimeGrid
    estimation_window: tuple[float, float]
    epsilon_rms: float = 1e-3
    extraction: str = "symmetric"  # two_experiment | symmetric
    integrator_substeps: int = 4
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        t0, t1 = self.estimation_window
        g = self.grid
        if not (g.start_time - 1e-9 <= t0 < t1 <= g.start_time + g.duration + 1e-9):
            raise ConfigurationError("estimation window outside simulated span")
        if self.extraction not in ("two_experiment", "symmetric"):
            raise ConfigurationError(f"unknown extraction mode {self.extraction!r}")
        if self.integrator_substeps < 1:
            raise ConfigurationError("integrator_substeps must be >= 1")
        if not self.epsilon_rms > 0:
            raise ConfigurationError("epsilon_rms must be > 0")


class _SumInput:
    """Linear combination of (coefficient, fn(t, order)) input terms."""

    def __init__(self, terms):
        self.terms = terms

    def __call__(self, t, order: int = 0):
        out = 0.0
        for c, fn in self.terms:
            out = out + c * fn(t, order)
        return out


def _rk4(deriv, state0: np.ndarray, grid: TimeGrid, substeps: int) -> np.ndarray:
    """Classical fixed-step RK4; returns states at every grid time (incl. t_1)."""
    h = grid.sample_period / substeps
    t = float(grid.start_time)
    state = np.array(state0, dtype=float)
    out = np.empty((grid.n_samples,) + state.shape)
    out[0] = state
    for k in range(1, grid.n_samples):
        for _ in range(substeps):
            k1 = deriv(t, state)
            k2 = deriv(t + 0.5 * h, state + 0.5 * h * k1)
            k3 = deriv(t + 0.5 * h, state + 0.5 * h * k2)
            k4 = deriv(t + h, state + h * k3)
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        if not np.all(np.isfinite(state)):
            raise DivergenceError(f"state became non-finite near t = {t:.6g} s")
        t = grid.start_time + k * grid.sample_period  # avoid drift
        out[k] = state
    return out


def integrate(system: NlSystemDef, input_fn, grid: TimeGrid, substeps: int = 4,
              initial_state: np.ndarray | None = None) -> np.ndarray:
    """Integrate the ODE for one input; returns (N, n_a+1) states at grid times."""
    return integrate_multi(system, [input_fn], grid, substeps, initial_state)[:, 0, :]


def integrate_multi(system: NlSystemDef, input_fns, grid: TimeGrid, substeps: int = 4,
                    initial_state: np.ndarray | None = None) -> np.ndarray:
    """Co-integrate the ODE under several inputs in one RK4 pass.

    Returns states of shape (N, n_inputs, n_a+1).  Sharing the pass keeps the
    integrator error perfectly correlated across the runs that later get
    subtracted against each other.
    """
    n_copies = len(input_fns)
    sd = system.state_dim
    if initial_state is None:
        state0 = np.zeros((n_copies, sd))
    else:
        state0 = np.broadcast_to(np.asarray(initial_state, dtype=float), (n_copies, sd)).copy()
    n_b = system.n_b

    def deriv(t, state):
        u = np.empty((n_copies, n_b + 1))
        for c, fn in enumerate(input_fns):
            for m in range(n_b + 1):
                u[c, m] = fn(t, m)
        p = np.concatenate([state, u], axis=1)
        ds = np.empty_like(state)
        ds[:, :-1] = state[:, 1:]
        ds[:, -1] = system.rhs(p)
        return ds

    return _rk4(deriv, state0, grid, substeps)


def simulate_linearized(system: NlSystemDef, large: LargeInputDef, small, grid: TimeGrid,
                        substeps: int = 4) -> np.ndarray:
    """Reference response of the exact linearisation along the nominal trajectory.

    Co-integrates the nominal system and the variational system whose
    coefficients are grad_rhs evaluated at the running p_L; returns the
    small-output states (N, n_a+1).  Ground-truth oracle only.
    """
    if system.grad_rhs is None:
        raise UnsupportedOracleError("system has no grad_rhs; linearised reference unavailable")
    sd = system.state_dim
    n_b = system.n_b

    def deriv(t, state):
        nom, lin = state[:sd], state[sd:]
        u_large = np.array([large(t, m) for m in range(n_b + 1)])
        u_small = np.array([small(t, m) for m in range(n_b + 1)])
        p_nom = np.concatenate([nom, u_large])
        g = system.grad_rhs(p_nom)
        ds = np.empty_like(state)
        ds[:sd - 1] = nom[1:]
        ds[sd - 1] = system.rhs(p_nom)
        ds[sd:-1] = lin[1:]
        ds[-1] = g[:sd] @ lin + g[sd:] @ u_small
        return ds

    out = _rk4(deriv, np.zeros(2 * sd), grid, substeps)
    return out[:, sd:]


def add_noise(signal: np.ndarray, spec: NoiseSpec, grid: TimeGrid, seed: int,
              window_grid: TimeGrid | None = None):
    """Add resonator-filtered white Gaussian noise scaled to the target SNR.

    The SNR is realised exactly on ``window_grid`` (defaults to the full grid).
    Returns (noisy signal, per-bin noise variance over the window's DFT bins);
    the variance is the known quantity |H(e^{j w T_s})|^2 * scale^2, not an
    estimate.
    """
    wgrid = window_grid or grid
    if spec.kind == "none":
        return signal, np.zeros(wgrid.n_samples)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(grid.n_samples)
    omega_n = 2.0 * np.pi * spec.resonance_hz
    r = np.exp(-spec.damping * omega_n * grid.sample_period)
    theta = omega_n * np.sqrt(1.0 - spec.damping**2) * grid.sample_period
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    shaped = scipy.signal.lfilter([1.0], a, white)

    k0 = grid.index_of_time(wgrid.start_time)
    sl = slice(k0, k0 + wgrid.n_samples)
    sig_rms = float(np.sqrt(np.mean(signal[sl] ** 2)))
    if sig_rms == 0.0:
        raise ConfigurationError("cannot set an SNR against an all-zero signal")
    target = sig_rms * 10.0 ** (-spec.snr_db / 20.0)
    noise_rms = float(np.sqrt(np.mean(shaped[sl] ** 2)))
    scale = target / noise_rms
    noise = scale * shaped

    z = np.exp(1j * wgrid.angular_frequencies * grid.sample_period)
    h_resp = 1.0 / (a[0] + a[1] / z + a[2] / z**2)
    psd = (scale * np.abs(h_resp)) ** 2
    return signal + noise, psd


@dataclass
class SampledDataset:
    """Synchronised small-signal records over the estimation window.

    ``p_L`` columns follow (y_L, ..., y_L^(n_a), u_L, ..., u_L^(n_b)) and are
    noise-free; the noise covariances are the exact per-bin values injected by
    the simulator.
    """

    grid: TimeGrid
    u_small: np.ndarray
    y_small: np.ndarray
    p_L: np.ndarray
    noise: NoiseCovariance
    n_a: int
    n_b: int
    seed: int = 0
    epsilon_rms: float = 0.0
    extraction: str = "symmetric"
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.grid.n_samples
        if len(self.u_small) != n or len(self.y_small) != n:
            raise ConfigurationError("signal lengths do not match the grid")
        if self.p_L.shape != (n, self.n_a + self.n_b + 2):
            raise ConfigurationError(
                f"p_L must be (N, n_x) = ({n}, {self.n_a + self.n_b + 2}); got {self.p_L.shape}"
            )

    @property
    def n_x(self) -> int:
        return self.n_a + self.n_b + 2

    def p_column_names(self) -> list[str]:
        names = [f"y_L_d{m}" if m else "y_L" for m in range(self.n_a + 1)]
        names += [f"u_L_d{m}" if m else "u_L" for m in range(self.n_b + 1)]
        return names

    def save(self, csv_path, json_path) -> None:
        names = self.p_column_names()
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u_small", "y_small"] + names)
            t = self.grid.times
            for k in range(self.grid.n_samples):
                row = [repr(float(t[k])), repr(float(self.u_small[k])), repr(float(self.y_small[k]))]
                row += [repr(float(v)) for v in self.p_L[k]]
                w.writerow(row)
        sidecar = {
            "n_samples": self.grid.n_samples,
            "sample_period": self.grid.sample_period,
            "start_time": self.grid.start_time,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "seed": self.seed,
            "epsilon_rms": self.epsilon_rms,
            "extraction": self.extraction,
            "noise_psd": {
                "c_u": list(self.noise.c_u),
                "c_y": list(self.noise.c_y),
                "c_uy_real": list(np.real(self.noise.c_uy)),
                "c_uy_imag": list(np.imag(self.noise.c_uy)),
            },
            "config_echo": self.extras.get("config_echo", {}),
        }
        Path(json_path).write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, csv_path, json_path) -> "SampledDataset":
        meta = json.loads(Path(json_path).read_text())
        grid = TimeGrid(meta["n_samples"], meta["sample_period"], meta["start_time"])
        raw = np.genfromtxt(csv_path, delimiter=",", names=True)
        cols = list(raw.dtype.names)
        n_x = meta["n_a"] + meta["n_b"] + 2
        p = np.column_stack([np.asarray(raw[c], dtype=float) for c in cols[3 : 3 + n_x]])
        noise = NoiseCovariance(
            c_u=np.asarray(meta["noise_psd"]["c_u"], dtype=float),
            c_y=np.asarray(meta["noise_psd"]["c_y"], dtype=float),
            c_uy=np.asarray(meta["noise_psd"]["c_uy_real"], dtype=float)
            + 1j * np.asarray(meta["noise_psd"]["c_uy_imag"], dtype=float),
        )
        return cls(
            grid=grid,
            u_small=np.asarray(raw["u_small"], dtype=float),
            y_small=np.asarray(raw["y_small"], dtype=float),
            p_L=p,
            noise=noise,
            n_a=meta["n_a"],
            n_b=meta["n_b"],
            seed=meta["seed"],
            epsilon_rms=meta["epsilon_rms"],
            extraction=meta["extraction"],
            extras={"config_echo": meta.get("config_echo", {})},
        )


def run_experiment(system: NlSystemDef, large: LargeInputDef, small, cfg: ExperimentConfig) -> SampledDataset:
    """Run the two-(or three-)pass experiment and assemble the windowed dataset.

    ``small`` must be callable as small(t, order); its RMS over the estimation
    window is rescaled to cfg.epsilon_rms before anything is simulated.
    """
    check_input_derivatives(large, system.n_b, seed=cfg.seed,
                            span=(cfg.grid.start_time, cfg.grid.start_time + cfg.grid.duration))
    wgrid = cfg.grid.window(*cfg.estimation_window)
    small_w = small(wgrid.times, 0)
    rms = float(np.sqrt(np.mean(np.asarray(small_w) ** 2)))
    if rms == 0.0:
        eps_scale = 0.0
    else:
        eps_scale = cfg.epsilon_rms / rms
    scaled_small = _SumInput([(eps_scale, small)])

    nominal = _SumInput([(1.0, large)])
    plus = _SumInput([(1.0, large), (1.0, scaled_small)])
    runs = [nominal, plus]
    if cfg.extraction == "symmetric":
        runs.append(_SumInput([(1.0, large), (-1.0, scaled_small)]))
    states = integrate_multi(system, runs, cfg.grid, cfg.integrator_substeps)

    k0 = cfg.grid.index_of_time(wgrid.start_time)
    sl = slice(k0, k0 + wgrid.n_samples)
    y_nom = states[sl, 0, 0]
    if cfg.extraction == "two_experiment":
        y_small = states[sl, 1, 0] - y_nom
    else:
        y_small = 0.5 * (states[sl, 1, 0] - states[sl, 2, 0])

    t_w = wgrid.times
    p_cols = [states[sl, 0, m] for m in range(system.n_a + 1)]
    p_cols += [np.asarray(large(t_w, m), dtype=float) for m in range(system.n_b + 1)]
    p_L = np.column_stack(p_cols)

    u_small = np.asarray(scaled_small(t_w, 0), dtype=float)
    y_clean, u_clean = y_small.copy(), u_small.copy()
    c_y = np.zeros(wgrid.n_samples)
    c_u = np.zeros(wgrid.n_samples)
    if cfg.noise.kind != "none":
        if cfg.noise.applies_to in ("output", "both"):
            y_noisy, c_y = add_noise(
                _window_embed(y_small, cfg.grid, k0), cfg.noise, cfg.grid, cfg.seed * 2 + 1, wgrid
            )
            y_small = y_noisy[sl]
        if cfg.noise.applies_to in ("input", "both"):
            u_noisy, c_u = add_noise(
                _window_embed(u_small, cfg.grid, k0), cfg.noise, cfg.grid, cfg.seed * 2 + 2, wgrid
            )
            u_small = u_noisy[sl]

    noise = NoiseCovariance(c_u=c_u, c_y=c_y, c_uy=np.zeros(wgrid.n_samples, dtype=complex))
    return SampledDataset(
        grid=wgrid,
        u_small=u_small,
        y_small=y_small,
        p_L=p_L,
        noise=noise,
        n_a=system.n_a,
        n_b=system.n_b,
        seed=cfg.seed,
        epsilon_rms=cfg.epsilon_rms,
        extraction=cfg.extraction,
        extras={"y_small_clean": y_clean, "u_small_clean": u_clean, "states": states[sl]},
    )


def _window_embed(window_values: np.ndarray, grid: TimeGrid, k0: int) -> np.ndarray:
    out = np.zeros(grid.n_samples)
    out[k0 : k0 + len(window_values)] = window_values
    return out


def true_lpv_coefficients(system: NlSystemDef, p_L: np.ndarray) -> np.ndarray:
    """Ground-truth LPV coefficients: grad f evaluated along the trajectory."""
    if system.grad_rhs is None:
        raise UnsupportedOracleError(f"system {system.name!r} carries no grad_rhs oracle")
    p_L = np.asarray(p_L, dtype=float)
    if p_L.ndim != 2 or p_L.shape[1] != system.n_x:
        raise ConfigurationError(f"p_L must be (N, {system.n_x})")
    return np.asarray(system.grad_rhs(p_L), dtype=float)
