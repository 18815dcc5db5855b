"""Kernel estimators for the frequency-domain LPV coefficients.

Three estimators share one machinery:

* ``base_estimate``       -- weighted ridge fit, closed-form linear solve;
* ``order_select_qp``     -- adds an l1-of-linf penalty on the coefficient
                             values at nodal points (epigraph slacks rho_j);
* ``sched_select_qp``     -- adds the same penalty on coefficient partial
                             derivatives (slacks tau_jl, upper triangle only),
                             with kernel-derivative representer features.

``reweight_loop`` wraps any of the sparse stages with the iterative
equation-error-covariance weighting, starting from W = I.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels as K
from .freq_model import (
    FreqLpvOperator,
    NoiseCovariance,
    equation_error_covariance,
    realify_quadratic,
)
from .qp import QpProblem, solve_qp
from .signals import ConfigurationError


class SingularSystemError(RuntimeError):
    """Normal matrix of the ridge solve is numerically singular."""


@dataclass(frozen=True)
class NodalGrid:
    """Constraint-sampling times and the trajectory values there."""

    times: np.ndarray
    points: np.ndarray  # (n_t, n_x)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "points", p)
        if len(t) < 1 or p.shape[0] != len(t):
            raise ConfigurationError("nodal grid needs >= 1 time with matching points")

    @property
    def n_t(self) -> int:
        return len(self.times)

    @classmethod
    def evenly_spaced(cls, dataset, n_points: int = 50) -> "NodalGrid":
        """Pick n_points evenly spaced samples of the dataset trajectory."""
        n = dataset.grid.n_samples
        step = max(1, n // n_points)
        idx = np.arange(0, n, step)[:n_points]
        return cls(dataset.grid.times[idx], dataset.p_L[idx])


@dataclass
class EstimatorConfig:
    """Knobs shared by every estimator stage."""

    gamma_reg: float = 1e-3
    gamma_ord: float = 2e-4
    gamma_sch: float = 2e-4
    weight_mode: str = "iterative"  # identity | iterative
    max_reweight_iters: int = 5
    center_decimation: int | None = None  # None -> keep-every-2 above 500 samples
    f_max: float = 1.0
    qp_tolerance: float = 1e-6

    def __post_init__(self):
        if min(self.gamma_reg, self.gamma_ord, self.gamma_sch) < 0:
            raise ConfigurationError("regularisation weights must be nonnegative")
        if self.weight_mode not in ("identity", "iterative"):
            raise ConfigurationError(f"unknown weight mode {self.weight_mode!r}")
        if self.center_decimation is not None and self.center_decimation < 1:
            raise ConfigurationError("center decimation must be >= 1")

    def decimation_for(self, n_samples: int) -> int:
        if self.center_decimation is not None:
            return self.center_decimation
        return 2 if n_samples > 500 else 1


@dataclass
class RepresenterSolution:
    """Fitted representer coefficients plus bookkeeping for evaluation."""

    alphas: np.ndarray  # (n_centers, n_act)
    gamma: np.ndarray
    centers: np.ndarray  # (n_centers, n_act) points in active coordinates
    active_dims: tuple
    alpha_primes: np.ndarray | None = None  # (n_act, n_t, n_act)
    deriv_centers: np.ndarray | None = None  # (n_t, n_act)
    slacks: np.ndarray | None = None
    scores: np.ndarray | None = None  # epigraph-tight scores, stage-dependent layout
    raw_max: np.ndarray | None = None  # unscaled max |c_j| (order stage)
    theta: np.ndarray | None = None  # constant coefficients (refit stage)
    theta_dims: tuple = ()
    objective: dict = field(default_factory=dict)
    qp: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    c_samples: np.ndarray | None = None  # (N, n_x) full coefficient samples at data times
    history: list = field(default_factory=list)
    exit_reason: str = ""
    kappa_y: float | None = None


def _active_dims(kernel, n_x: int) -> tuple:
    if isinstance(kernel, K.BlockDiagKernel):
        raise ConfigurationError("block-diagonal kernels go through refit_estimate")
    return kernel.active_dims if kernel.active_dims is not None else tuple(range(n_x))


def _fit_columns(op: FreqLpvOperator, active: tuple) -> np.ndarray:
    """Band map columns restricted to the active coefficients (row-major samples)."""
    m = op.coefficient_map()
    n, nx = op.grid.n_samples, op.n_x
    idx = (np.arange(n)[:, None] * nx + np.asarray(active)[None, :]).ravel()
    return m[:, idx]


def _scatter_full(c_act: np.ndarray, active: tuple, n_x: int) -> np.ndarray:
    out = np.zeros((c_act.shape[0], n_x))
    out[:, list(active)] = c_act
    return out


def _chol_solve(a: np.ndarray, b: np.ndarray):
    """Cholesky with escalating jitter; raises SingularSystemError when hopeless."""
    mean_diag = max(float(np.mean(np.abs(np.diag(a)))), 1e-300)
    jitter = 0.0
    for _ in range(8):
        try:
            cho = scipy.linalg.cho_factor(
                a + jitter * np.eye(len(a)) if jitter else a, lower=True, check_finite=False
            )
            x = scipy.linalg.cho_solve(cho, b, check_finite=False)
            x += scipy.linalg.cho_solve(cho, b - a @ x, check_finite=False)
            return x
        except np.linalg.LinAlgError:
            jitter = mean_diag * 1e-13 if jitter == 0.0 else jitter * 100.0
    smallest = float(scipy.linalg.eigvalsh(a, subset_by_index=[0, 0])[0])
    raise SingularSystemError(
        f"normal matrix singular (smallest eigenvalue {smallest:.3e}); raise gamma_reg"
    )


@dataclass
class _Assembly:
    """Weight-independent pieces of one estimation problem on fixed centers."""

    op: FreqLpvOperator
    kernel: object
    active: tuple
    centers: np.ndarray  # (n_c, n_act)
    e_matrix: np.ndarray  # complex (n_band, n_alpha_like + n_gamma + 1)
    f_const: np.ndarray
    reg: np.ndarray  # PSD Gram on the alpha-like block
    n_alpha: int
    n_gamma1: int
    cons_rows: np.ndarray | None = None  # (n_rows, n_alpha_like) scaled values
    cons_slack_of_row: np.ndarray | None = None  # slack index per constraint row
    n_slack: int = 0
    nodal: NodalGrid | None = None
    deriv_centers: np.ndarray | None = None
    scales: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_z(self) -> int:
        return self.n_alpha + self.n_gamma1 + self.n_slack

    def build_problem(self, weights: np.ndarray, gamma_reg: float, gamma_sparse: float) -> QpProblem:
        p_fit, q_fit, c0 = realify_quadratic(self.e_matrix, self.f_const, weights)
        nz = self.n_z
        p = np.zeros((nz, nz))
        nf = self.n_alpha + self.n_gamma1
        p[:nf, :nf] = p_fit
        p[: self.n_alpha, : self.n_alpha] += 2.0 * gamma_reg * self.reg
        q = np.zeros(nz)
        q[:nf] = q_fit
        q[nf:] = gamma_sparse
        a = None
        b = None
        if self.n_slack:
            rows = self.cons_rows
            m = rows.shape[0]
            a = np.zeros((2 * m, nz))
            a[:m, : self.n_alpha] = rows
            a[m:, : self.n_alpha] = -rows
            sl = self.cons_slack_of_row
            a[np.arange(m), nf + sl] = -1.0
            a[m + np.arange(m), nf + sl] = -1.0
            b = np.zeros(2 * m)
        self.extra["fit_offset"] = c0
        return QpProblem(p, q, a, b)

    def solve_unconstrained(self, weights: np.ndarray, gamma_reg: float) -> np.ndarray:
        p_fit, q_fit, _ = realify_quadratic(self.e_matrix, self.f_const, weights)
        nf = self.n_alpha + self.n_gamma1
        h = p_fit.copy()
        h[: self.n_alpha, : self.n_alpha] += 2.0 * gamma_reg * self.reg
        return _chol_solve(h, -q_fit[:nf])

    def fit_value(self, z: np.ndarray, weights: np.ndarray) -> float:
        nf = self.n_alpha + self.n_gamma1
        e = self.e_matrix @ z[:nf] + self.f_const
        return float(np.sum(np.abs(e) ** 2 / weights))

    def reg_value(self, z: np.ndarray) -> float:
        a = z[: self.n_alpha]
        return float(a @ self.reg @ a)


def _jittered(g: np.ndarray, rel: float = 1e-8) -> np.ndarray:
    """Symmetrised Gram with a relative diagonal jitter for numerical rank."""
    g = 0.5 * (g + g.T)
    g[np.diag_indices_from(g)] += rel * float(np.mean(np.diag(g)))
    return g


def _order_centers(dataset, nodal: NodalGrid, decimation: int) -> np.ndarray:
    """Centers at (decimated data times) union (nodal times), deduped by time."""
    data_t = dataset.grid.times[::decimation]
    tol = 0.5 * dataset.grid.sample_period
    pos = np.searchsorted(data_t, nodal.times)
    fresh = np.ones(nodal.n_t, dtype=bool)
    for k, (p, t) in enumerate(zip(pos, nodal.times)):
        for cand in (p - 1, p):
            if 0 <= cand < len(data_t) and abs(data_t[cand] - t) <= tol:
                fresh[k] = False
    return np.vstack([dataset.p_L[::decimation], nodal.points[fresh]])


def p_scales(p_L: np.ndarray) -> np.ndarray:
    """Per-column max |p_j| over the records, floored away from zero."""
    return np.maximum(np.max(np.abs(p_L), axis=0), 1e-12)


def make_order_assembly(op: FreqLpvOperator, kernel: K.CurlFreeKernel, dataset,
                        nodal: NodalGrid, cfg: EstimatorConfig,
                        centers: np.ndarray | None = None) -> _Assembly:
    """Fit + constraint matrices for the model-order stage (centers = data u nodal)."""
    active = _active_dims(kernel, op.n_x)
    n_act = len(active)
    if centers is None:
        centers = _order_centers(dataset, nodal, cfg.decimation_for(op.grid.n_samples))
    centers_act = centers[:, list(active)]
    data_act = dataset.p_L[:, list(active)]
    nodal_act = nodal.points[:, list(active)]

    k_cross = K.cross_gram(data_act, centers_act, kernel)
    e_alpha = _fit_columns(op, active) @ k_cross
    e_matrix = np.hstack([e_alpha, op.psi_transient])
    reg = _jittered(K.gram(centers_act, kernel))

    k_nodal = K.cross_gram(nodal_act, centers_act, kernel)
    scales = p_scales(dataset.p_L)[list(active)] / cfg.f_max
    n_t = nodal.n_t
    rows = k_nodal * np.tile(scales, n_t)[:, None]
    slack_of_row = np.tile(np.arange(n_act), n_t)

    return _Assembly(
        op=op,
        kernel=kernel,
        active=active,
        centers=centers_act,
        e_matrix=e_matrix,
        f_const=op.rhs_const(),
        reg=reg,
        n_alpha=k_cross.shape[1],
        n_gamma1=op.n_gamma + 1,
        cons_rows=rows,
        cons_slack_of_row=slack_of_row,
        n_slack=n_act,
        nodal=nodal,
        scales=scales,
    )


def _pair_index(n_act: int) -> list[tuple[int, int]]:
    return [(j, l) for j in range(n_act) for l in range(j, n_act)]


def make_sched_assembly(op: FreqLpvOperator, kernel: K.CurlFreeKernel, dataset,
                        nodal: NodalGrid, cfg: EstimatorConfig,
                        c_scales: np.ndarray) -> _Assembly:
    """Fit + constraint matrices for the scheduling stage.

    Representer features are kernel sections at (decimated) data points plus
    kernel-derivative sections at every nodal point for every active
    coordinate; ``c_scales`` holds the prior per-coefficient maxima c_jM.
    """
    active = _active_dims(kernel, op.n_x)
    n_act = len(active)
    c_scales = np.asarray(c_scales, dtype=float)
    if c_scales.shape != (n_act,):
        raise ConfigurationError(f"need {n_act} prior coefficient scales, got {c_scales.shape}")
    if np.any(c_scales <= 0):
        raise ConfigurationError("prior coefficient scales must be positive")

    decim = cfg.decimation_for(op.grid.n_samples)
    centers = dataset.p_L[::decim]
    centers_act = centers[:, list(active)]
    data_act = dataset.p_L[:, list(active)]
    nodal_act = nodal.points[:, list(active)]
    n_c, n_t = len(centers_act), nodal.n_t
    n_alpha = n_c * n_act
    n_feat = n_act * n_t  # derivative features indexed (l, s)
    n_aprime = n_feat * n_act

    fit_cols = _fit_columns(op, active)
    k_cross = K.cross_gram(data_act, centers_act, kernel)
    e_alpha = fit_cols @ k_cross

    # derivative features evaluated at the data points
    db_data = K.cross_gram_dblocks(data_act, nodal_act, kernel)  # (N, n_t, i, j, l)
    n = op.grid.n_samples
    d_cross = db_data.transpose(0, 2, 4, 1, 3).reshape(n * n_act, n_feat * n_act)
    e_aprime = fit_cols @ d_cross
    e_matrix = np.hstack([e_alpha, e_aprime, op.psi_transient])

    # three-block regulariser Gram
    g_aa = K.gram(centers_act, kernel)
    db_cn = K.cross_gram_dblocks(centers_act, nodal_act, kernel)  # (n_c, n_t, i, j, l)
    g_ab = db_cn.transpose(0, 2, 4, 1, 3).reshape(n_alpha, n_aprime)
    d2_nn = K.cross_gram_d2blocks(nodal_act, nodal_act, kernel)  # (n_t, n_t, i, j, a, l)
    # feature rows (l, s) use first-argument derivative l at nodal s
    g_bb = d2_nn.transpose(4, 0, 2, 5, 1, 3).reshape(n_aprime, n_aprime)
    reg = _jittered(np.block([[g_aa, g_ab], [g_ab.T, g_bb]]))

    # constraint rows: d c_j / d p_l at nodal points, scaled by p_lM / c_jM
    db_nc = K.cross_gram_dblocks(nodal_act, centers_act, kernel)  # (n_t, n_c, i, j, l)
    d2_nn2 = d2_nn  # (s, k, i, j, a, l): first-arg deriv a at s, second-arg deriv l at k
    p_m = p_scales(dataset.p_L)[list(active)]
    pairs = _pair_index(n_act)
    rows = np.empty((len(pairs) * n_t, n_alpha + n_aprime))
    slack_of_row = np.empty(len(pairs) * n_t, dtype=int)
    for c_idx, (j, l) in enumerate(pairs):
        # alpha part: D1_l K(x'_s, z_i) row j  ==  -D2_l K(x'_s, z_i) row j
        a_part = -db_nc[:, :, j, :, l].reshape(n_t, n_alpha)
        # alpha' part: D1_l D2_m K(x'_s, x'_k) row j, feature (m, k)
        b_part = d2_nn2[:, :, j, :, l, :].transpose(0, 3, 1, 2).reshape(n_t, n_aprime)
        scale = p_m[l] / c_scales[j]
        block = np.hstack([a_part, b_part]) * scale
        rows[c_idx * n_t : (c_idx + 1) * n_t] = block
        slack_of_row[c_idx * n_t : (c_idx + 1) * n_t] = c_idx

    return _Assembly(
        op=op,
        kernel=kernel,
        active=active,
        centers=centers_act,
        e_matrix=e_matrix,
        f_const=op.rhs_const(),
        reg=reg,
        n_alpha=n_alpha + n_aprime,
        n_gamma1=op.n_gamma + 1,
        cons_rows=rows,
        cons_slack_of_row=slack_of_row,
        n_slack=len(pairs),
        nodal=nodal,
        deriv_centers=nodal_act,
        scales=p_m,
        extra={"pairs": pairs, "n_alpha_only": n_alpha, "c_scales": c_scales.copy(),
               "n_feat": n_feat},
    )


def _unpack_order(asm: _Assembly, z: np.ndarray, qp_info: dict,
                  weights: np.ndarray, gamma_reg: float) -> RepresenterSolution:
    n_act = len(asm.active)
    n_c = asm.n_alpha // n_act
    alphas = z[: asm.n_alpha].reshape(n_c, n_act)
    gamma = z[asm.n_alpha : asm.n_alpha + asm.n_gamma1]
    slacks = z[asm.n_alpha + asm.n_gamma1 :] if asm.n_slack else None
    nodal_vals = asm.cons_rows @ z[: asm.n_alpha] if asm.n_slack else None
    scores = raw = None
    if nodal_vals is not None:
        per = np.abs(nodal_vals).reshape(asm.nodal.n_t, n_act)
        scores = per.max(axis=0)
        raw = scores / asm.scales
    sol = RepresenterSolution(
        alphas=alphas,
        gamma=gamma,
        centers=asm.centers,
        active_dims=asm.active,
        slacks=slacks,
        scores=scores,
        raw_max=raw,
        objective={
            "fit": asm.fit_value(z, weights),
            "reg": gamma_reg * asm.reg_value(z),
        },
        qp=qp_info,
        weights=weights.copy(),
    )
    return sol


def _finish_solution(asm: _Assembly, sol: RepresenterSolution, op: FreqLpvOperator,
                     dataset) -> RepresenterSolution:
    c_act = eval_coefficients(sol, asm.kernel, dataset.p_L)
    sol.c_samples = _scatter_full(c_act, asm.active, op.n_x)
    return sol


def base_estimate(op: FreqLpvOperator, kernel: K.CurlFreeKernel, dataset,
                  cfg: EstimatorConfig, weights: np.ndarray | None = None,
                  centers: np.ndarray | None = None) -> RepresenterSolution:
    """Closed-form weighted ridge estimate (no sparsity penalty).

    Centers default to the decimated data samples; pass explicit centers to
    reproduce the QP stages' feature sets.
    """
    active = _active_dims(kernel, op.n_x)
    if centers is None:
        centers = dataset.p_L[:: cfg.decimation_for(op.grid.n_samples)]
    if weights is None:
        weights = np.ones(op.n_band)
    centers_act = centers[:, list(active)]
    data_act = dataset.p_L[:, list(active)]
    k_cross = K.cross_gram(data_act, centers_act, kernel)
    e_alpha = _fit_columns(op, active) @ k_cross
    e_matrix = np.hstack([e_alpha, op.psi_transient])
    asm = _Assembly(
        op=op, kernel=kernel, active=active, centers=centers_act,
        e_matrix=e_matrix, f_const=op.rhs_const(), reg=_jittered(K.gram(centers_act, kernel)),
        n_alpha=k_cross.shape[1], n_gamma1=op.n_gamma + 1,
    )
    z = asm.solve_unconstrained(weights, cfg.gamma_reg)
    n_act = len(active)
    sol = RepresenterSolution(
        alphas=z[: asm.n_alpha].reshape(-1, n_act),
        gamma=z[asm.n_alpha :],
        centers=centers_act,
        active_dims=active,
        objective={"fit": asm.fit_value(z, weights), "reg": cfg.gamma_reg * asm.reg_value(z)},
        weights=np.asarray(weights, dtype=float).copy(),
    )
    sol.objective["total"] = sol.objective["fit"] + sol.objective["reg"]
    return _finish_solution(asm, sol, op, dataset)


def _solve_stage(asm: _Assembly, cfg: EstimatorConfig, weights: np.ndarray,
                 gamma_sparse: float) -> tuple[np.ndarray, dict]:
    problem = asm.build_problem(weights, cfg.gamma_reg, gamma_sparse)
    qsol = solve_qp(problem, tol=cfg.qp_tolerance)
    info = {
        "residuals": qsol.residual_dict(),
        "iterations": qsol.iterations,
        "polished": qsol.polished,
        "objective": qsol.objective + asm.extra.get("fit_offset", 0.0),
    }
    return qsol.x, info


def order_select_qp(op: FreqLpvOperator, kernel: K.CurlFreeKernel, dataset,
                    nodal: NodalGrid, cfg: EstimatorConfig,
                    weights: np.ndarray | None = None,
                    asm: _Assembly | None = None) -> RepresenterSolution:
    """One model-order selection QP solve at fixed weights."""
    if asm is None:
        asm = make_order_assembly(op, kernel, dataset, nodal, cfg)
    if weights is None:
        weights = np.ones(op.n_band)
    z, info = _solve_stage(asm, cfg, weights, cfg.gamma_ord)
    sol = _unpack_order(asm, z, info, weights, cfg.gamma_reg)
    sol.objective["sparsity"] = cfg.gamma_ord * float(np.sum(sol.slacks))
    sol.objective["total"] = sum(sol.objective.values())
    return _finish_solution(asm, sol, op, dataset)


def sched_select_qp(op: FreqLpvOperator, kernel: K.CurlFreeKernel, dataset,
                    nodal: NodalGrid, cfg: EstimatorConfig,
                    c_scales: np.ndarray,
                    weights: np.ndarray | None = None,
                    asm: _Assembly | None = None) -> RepresenterSolution:
    """One scheduling-selection QP solve at fixed weights.

    ``c_scales`` are the prior coefficient maxima c_jM from a reduced-model
    base estimate; scores come back as a symmetric (n_act, n_act) matrix.
    """
    if asm is None:
        asm = make_sched_assembly(op, kernel, dataset, nodal, cfg, c_scales)
    if weights is None:
        weights = np.ones(op.n_band)
    z, info = _solve_stage(asm, cfg, weights, cfg.gamma_sch)
    n_act = len(asm.active)
    n_alpha_only = asm.extra["n_alpha_only"]
    n_t = asm.nodal.n_t
    alphas = z[:n_alpha_only].reshape(-1, n_act)
    aprime = z[n_alpha_only : asm.n_alpha].reshape(n_act, n_t, n_act)
    gamma = z[asm.n_alpha : asm.n_alpha + asm.n_gamma1]
    tau = z[asm.n_alpha + asm.n_gamma1 :]
    vals = np.abs(asm.cons_rows @ z[: asm.n_alpha]).reshape(len(asm.extra["pairs"]), n_t)
    tight = vals.max(axis=1)
    score_mat = np.zeros((n_act, n_act))
    for c_idx, (j, l) in enumerate(asm.extra["pairs"]):
        score_mat[j, l] = score_mat[l, j] = tight[c_idx]
    sol = RepresenterSolution(
        alphas=alphas,
        gamma=gamma,
        centers=asm.centers,
        active_dims=asm.active,
        alpha_primes=aprime,
        deriv_centers=asm.deriv_centers,
        slacks=tau,
        scores=score_mat,
        objective={
            "fit": asm.fit_value(z, weights),
            "reg": cfg.gamma_reg * asm.reg_value(z),
            "sparsity": cfg.gamma_sch * float(np.sum(tau)),
        },
        qp=info,
        weights=np.asarray(weights, dtype=float).copy(),
    )
    sol.objective["total"] = sum(sol.objective.values())
    return _finish_solution(asm, sol, op, dataset)


def eval_coefficients(sol: RepresenterSolution, kernel, query_points: np.ndarray) -> np.ndarray:
    """Representer evaluation at query points (full-coordinate rows accepted).

    Returns (n_queries, n_act) in the kernel's active coordinate order.
    """
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    active = list(sol.active_dims)
    if q.shape[1] == len(active):
        q_act = q
    else:
        q_act = q[:, active]
    n_act = len(active)
    out = (K.cross_gram(q_act, sol.centers, kernel) @ sol.alphas.ravel()).reshape(-1, n_act)
    if sol.alpha_primes is not None:
        db = K.cross_gram_dblocks(q_act, sol.deriv_centers, kernel)  # (nq, n_t, i, j, l)
        out = out + np.einsum("qsijl,lsj->qi", db, sol.alpha_primes)
    if sol.theta is not None:
        raise ConfigurationError("refit solutions evaluate through refit_coefficients")
    return out


def eval_sensitivity(sol: RepresenterSolution, kernel, query_points: np.ndarray,
                     return_asymmetry: bool = False):
    """Jacobian of the estimated coefficient field at query points.

    Entry (q, j, l) is d c_j / d p_l; the matrix is symmetrised and the
    pre-symmetrisation defect reported when requested.
    """
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    active = list(sol.active_dims)
    q_act = q if q.shape[1] == len(active) else q[:, active]
    # alpha part: D1_l K(q, z_i) = -D2_l K(q, z_i)
    db = K.cross_gram_dblocks(q_act, sol.centers, kernel)  # (nq, n_c, i, j, l)
    s = -np.einsum("qcijl,cj->qil", db, sol.alphas)
    if sol.alpha_primes is not None:
        d2 = K.cross_gram_d2blocks(q_act, sol.deriv_centers, kernel)  # (nq, n_t, i, j, a, l)
        s = s + np.einsum("qkijal,lkj->qia", d2, sol.alpha_primes)
    asym = float(np.max(np.abs(s - s.transpose(0, 2, 1)))) if s.size else 0.0
    s_sym = 0.5 * (s + s.transpose(0, 2, 1))
    if return_asymmetry:
        return s_sym, asym
    return s_sym


def reweight_loop(select: str, op: FreqLpvOperator, kernel, dataset, nodal: NodalGrid,
                  cfg: EstimatorConfig, noise: NoiseCovariance,
                  c_scales: np.ndarray | None = None,
                  resimulate: bool = False) -> RepresenterSolution:
    """Iteratively reweighted sparse estimation (W = I first, then cov-based).

    The weighted fit J_WLS is recorded per reweighted solve; iteration stops
    when J_WLS fails to shrink by a relative 1e-9, or at the iteration cap.
    Noise-free covariances keep the W = I solution and say so.
    """
    if select == "order":
        asm = make_order_assembly(op, kernel, dataset, nodal, cfg)
        gamma_sparse = cfg.gamma_ord
        unpack = "order"
    elif select == "sched":
        if c_scales is None:
            raise ConfigurationError("scheduling selection needs prior coefficient scales c_jM")
        asm = make_sched_assembly(op, kernel, dataset, nodal, cfg, c_scales)
        gamma_sparse = cfg.gamma_sch
        unpack = "sched"
    else:
        raise ConfigurationError(f"unknown selection stage {select!r}")

    def run(weights):
        if unpack == "order":
            return order_select_qp(op, kernel, dataset, nodal, cfg, weights=weights, asm=asm)
        return sched_select_qp(op, kernel, dataset, nodal, cfg, c_scales, weights=weights, asm=asm)

    w = np.ones(op.n_band)
    sol = run(w)
    history = [sol.objective["fit"]]
    exit_reason = "identity_only"
    if cfg.weight_mode == "iterative" and not noise.is_zero():
        best = None
        prev_j = None
        for it in range(cfg.max_reweight_iters):
            var = equation_error_covariance(op, sol.c_samples, noise)
            w = np.maximum(var, 1e-12 * max(float(var.max()), 1e-300))
            cand = run(w)
            j_wls = cand.objective["fit"]
            history.append(j_wls)
            if best is None or j_wls < best.objective["fit"]:
                best = cand
            if prev_j is not None and j_wls >= prev_j * (1.0 - 1e-9):
                exit_reason = "j_nondecreasing"
                break
            prev_j = j_wls
            sol = cand
        else:
            exit_reason = "max_iters"
        sol = best if best is not None else sol
    elif noise.is_zero():
        exit_reason = "noise_free"
    sol.history = history
    sol.exit_reason = exit_reason
    if resimulate:
        sol.kappa_y = lpv_output_error(dataset, sol.c_samples, band_idx=op.band_idx)
    return sol


def lpv_output_error(dataset, c_samples: np.ndarray, band_idx: np.ndarray | None = None,
                     substeps: int = 4) -> float:
    """kappa_y: peak output mismatch of the fitted LPV model re-simulation.

    Integrates the LPV system with time-frozen coefficient samples (linear
    interpolation between grid times) driven by the measured small input,
    starting from a band-limited estimate of the initial small-signal state.
    ``band_idx`` restricts the spectral derivatives to the analysis band so
    measurement noise is not differentiated up.
    """
    from .simulate import _rk4  # local import to avoid a module cycle

    grid = dataset.grid
    n_a, n_b = dataset.n_a, dataset.n_b
    t0 = grid.start_time
    ts = grid.sample_period
    c_samples = np.asarray(c_samples, dtype=float)

    from .signals import Spectrum as _Spectrum, dft as _dft, idft as _idft

    mask = np.zeros(grid.n_samples, dtype=bool)
    if band_idx is None:
        mask[:] = True
    else:
        mask[np.asarray(band_idx, dtype=int)] = True
        mask |= np.isin(grid.harmonics, -grid.harmonics[mask])  # conjugate partners
    u_f = _dft(dataset.u_small, grid).bins * mask
    y_f = _dft(dataset.y_small, grid).bins * mask
    omega = grid.angular_frequencies
    u_ders = [
        _idft(_Spectrum((1j * omega) ** m * u_f, grid), enforce_real=False).real
        for m in range(n_b + 1)
    ]
    y_ders = [
        _idft(_Spectrum((1j * omega) ** m * y_f, grid), enforce_real=False).real
        for m in range(n_a + 1)
    ]

    def interp(arr, t):
        x = (t - t0) / ts
        k = int(np.clip(np.floor(x), 0, grid.n_samples - 2))
        frac = x - k
        return arr[k] * (1.0 - frac) + arr[k + 1] * frac

    def deriv(t, state):
        c = interp(c_samples, t)
        u_vec = np.array([interp(u, t) for u in u_ders])
        ds = np.empty_like(state)
        ds[:-1] = state[1:]
        ds[-1] = c[: n_a + 1] @ state + c[n_a + 1 :] @ u_vec
        return ds

    state0 = np.array([y[0] for y in y_ders])
    sim = _rk4(deriv, state0, grid, substeps)
    return float(np.max(np.abs(sim[:, 0] - dataset.y_small)))


def refit_estimate(op: FreqLpvOperator, block_kernel: K.BlockDiagKernel, dataset,
                   cfg: EstimatorConfig, kernel_dims: tuple, theta_dims: tuple,
                   weights: np.ndarray | None = None,
                   centers: np.ndarray | None = None) -> RepresenterSolution:
    """Reduced-model re-estimation with a block-diagonal kernel plus constants.

    ``kernel_dims`` are the full-model coordinates handled by the kernel (in
    block order); ``theta_dims`` are coordinates whose coefficients are fitted
    as constants theta_j.
    """
    if weights is None:
        weights = np.ones(op.n_band)
    if centers is None:
        centers = dataset.p_L[:: cfg.decimation_for(op.grid.n_samples)]
    kd = list(kernel_dims)
    centers_act = centers[:, kd]
    data_act = dataset.p_L[:, kd]
    k_cross = block_kernel.cross_gram(data_act, centers_act)
    e_alpha = _fit_columns(op, tuple(kernel_dims)) @ k_cross
    theta_cols = [
        op.f_band @ op.omega_diags[j] for j in theta_dims
    ]
    e_theta = np.column_stack(theta_cols) if theta_dims else np.zeros((op.n_band, 0), complex)
    e_matrix = np.hstack([e_alpha, e_theta, op.psi_transient])
    reg = _jittered(block_kernel.cross_gram(centers_act, centers_act))

    n_alpha = k_cross.shape[1]
    n_theta = len(theta_dims)
    p_fit, q_fit, _ = realify_quadratic(e_matrix, op.rhs_const(), weights)
    h = p_fit
    h[:n_alpha, :n_alpha] += 2.0 * cfg.gamma_reg * reg
    z = _chol_solve(h, -q_fit)

    n_k = len(kd)
    alphas = z[:n_alpha].reshape(-1, n_k)
    theta = z[n_alpha : n_alpha + n_theta]
    gamma = z[n_alpha + n_theta :]
    c_kernel = (block_kernel.cross_gram(data_act, centers_act) @ z[:n_alpha]).reshape(-1, n_k)
    c_full = np.zeros((dataset.grid.n_samples, op.n_x))
    c_full[:, kd] = c_kernel
    for pos, j in enumerate(theta_dims):
        c_full[:, j] = theta[pos]
    e = e_matrix @ z + op.rhs_const()
    sol = RepresenterSolution(
        alphas=alphas,
        gamma=gamma,
        centers=centers_act,
        active_dims=tuple(kernel_dims),
        theta=theta,
        theta_dims=tuple(theta_dims),
        objective={"fit": float(np.sum(np.abs(e) ** 2 / weights))},
        weights=np.asarray(weights, dtype=float).copy(),
        c_samples=c_full,
    )
    return sol


def refit_coefficients(sol: RepresenterSolution, block_kernel: K.BlockDiagKernel,
                       query_points: np.ndarray) -> np.ndarray:
    """Evaluate a refit solution at full-coordinate query rows: (nq, n_x_full)."""
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    kd = list(sol.active_dims)
    n_k = len(kd)
    c_kernel = (block_kernel.cross_gram(q[:, kd], sol.centers) @ sol.alphas.ravel()).reshape(-1, n_k)
    n_x = max(max(kd, default=-1), max(sol.theta_dims, default=-1)) + 1
    out = np.zeros((len(q), n_x))
    out[:, kd] = c_kernel
    for pos, j in enumerate(sol.theta_dims):
        out[:, j] = sol.theta[pos]
    return out
