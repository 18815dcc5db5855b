"""Dense convex QP solver: minimise 0.5 x'Hx + g'x subject to A x <= b.

Mehrotra predictor-corrector interior-point method on the reduced normal
equations, with diagonal equilibration and an active-set polish pass so the
reported KKT residuals are tight.  H must be symmetric positive semidefinite;
only inequality constraints are supported (the package's epigraph programs
need nothing else).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class QpError(RuntimeError):
    """Base class for solver failures; carries the last residuals when known."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class QpInfeasibleError(QpError):
    """No point satisfies A x <= b."""


class QpUnboundedError(QpError):
    """Objective decreases without bound on the feasible set."""


class QpNoConvergenceError(QpError):
    """Iteration cap hit before the KKT residuals met the tolerance."""


@dataclass
class QpProblem:
    """Quadratic program data; H is symmetrised on construction."""

    hessian: np.ndarray
    linear: np.ndarray
    ineq_matrix: np.ndarray | None = None
    ineq_bound: np.ndarray | None = None

    def __post_init__(self):
        h = np.asarray(self.hessian, dtype=float)
        g = np.asarray(self.linear, dtype=float)
        n = len(g)
        if h.shape != (n, n):
            raise ValueError(f"hessian {h.shape} does not match linear term ({n},)")
        asym = float(np.max(np.abs(h - h.T))) if n else 0.0
        scale = max(float(np.max(np.abs(h))), 1.0) if n else 1.0
        if asym > 1e-8 * scale:
            raise ValueError(f"hessian asymmetry {asym:.2e} too large")
        self.hessian = 0.5 * (h + h.T)
        self.linear = g
        if self.ineq_matrix is None:
            self.ineq_matrix = np.zeros((0, n))
            self.ineq_bound = np.zeros(0)
        else:
            self.ineq_matrix = np.asarray(self.ineq_matrix, dtype=float)
            self.ineq_bound = np.asarray(self.ineq_bound, dtype=float)
            if self.ineq_matrix.shape[1] != n:
                raise ValueError("constraint matrix column count != variable count")
            if self.ineq_matrix.shape[0] != len(self.ineq_bound):
                raise ValueError("constraint rows != bound length")

    @property
    def n_vars(self) -> int:
        return len(self.linear)

    @property
    def n_cons(self) -> int:
        return self.ineq_matrix.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    duals: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    comp_residual: float
    iterations: int
    polished: bool = False
    diagnostics: dict = field(default_factory=dict)

    def residual_dict(self) -> dict:
        return {
            "primal": self.primal_residual,
            "dual": self.dual_residual,
            "complementarity": self.comp_residual,
        }


def _residuals(p: QpProblem, x, lam):
    """(primal violation, relative stationarity, complementarity) in inf-norms."""
    slack = p.ineq_matrix @ x - p.ineq_bound if p.n_cons else np.zeros(0)
    r_p = float(max(0.0, slack.max())) if p.n_cons else 0.0
    grad = p.hessian @ x + p.linear
    if p.n_cons:
        grad = grad + p.ineq_matrix.T @ lam
    r_d = float(np.max(np.abs(grad))) / (1.0 + float(np.max(np.abs(p.linear), initial=0.0)))
    r_c = float(np.max(np.abs(lam * slack))) if p.n_cons else 0.0
    return r_p, r_d, r_c


def _chol_solve_factory(m: np.ndarray):
    """Cholesky factorisation with escalating jitter; returns a solve closure."""
    n = m.shape[0]
    mean_diag = max(float(np.mean(np.abs(np.diag(m)))), 1e-300)
    jitter = 0.0
    for attempt in range(8):
        try:
            cho = scipy.linalg.cho_factor(
                m + jitter * np.eye(n) if jitter else m, lower=True, check_finite=False
            )
            break
        except np.linalg.LinAlgError:
            jitter = mean_diag * 1e-14 if jitter == 0.0 else jitter * 100.0
    else:
        raise QpError("normal-equation matrix could not be factorised")

    def solve(rhs):
        sol = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
        # one refinement step against the unregularised matrix
        sol += scipy.linalg.cho_solve(cho, rhs - m @ sol, check_finite=False)
        return sol

    return solve


def _polish(p: QpProblem, x, lam, tol):
    """Equality-KKT solve on the strongly active set; keep only if it helps."""
    slack = p.ineq_bound - p.ineq_matrix @ x
    active = np.flatnonzero(lam > np.maximum(slack, tol))
    if len(active) == 0:
        return None
    n = p.n_vars
    ga = p.ineq_matrix[active]
    kkt = np.zeros((n + len(active), n + len(active)))
    kkt[:n, :n] = p.hessian
    kkt[:n, n:] = ga.T
    kkt[n:, :n] = ga
    reg = 1e-12 * (1.0 + float(np.max(np.abs(p.hessian))))
    kkt[:n, :n] += reg * np.eye(n)
    kkt[n:, n:] -= reg * np.eye(len(active))
    rhs = np.concatenate([-p.linear, p.ineq_bound[active]])
    try:
        lu = scipy.linalg.lu_factor(kkt, check_finite=False)
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        sol += scipy.linalg.lu_solve(lu, rhs - kkt @ sol, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    x_new = sol[:n]
    lam_new = np.zeros(p.n_cons)
    lam_new[active] = sol[n:]
    if np.any(lam_new < -tol):
        return None
    lam_new = np.maximum(lam_new, 0.0)
    return x_new, lam_new


def solve_qp(p: QpProblem, tol: float = 1e-8, max_iter: int = 60) -> QpSolution:
    """Solve the QP to the requested KKT tolerance.

    Raises QpInfeasibleError / QpUnboundedError when detected, and
    QpNoConvergenceError (with residuals attached) at the iteration cap.
    """
    n, m = p.n_vars, p.n_cons
    h0, g0 = p.hessian, p.linear

    # diagonal equilibration: variable scaling from the Hessian diagonal,
    # then constraint-row scaling to unit inf-norm (bounds are scaled along)
    d_h = np.sqrt(np.maximum(np.abs(np.diag(h0)), 0.0))
    floor = max(float(np.max(d_h, initial=0.0)) * 1e-8, 1e-8)
    col = 1.0 / np.maximum(d_h, floor)
    hs = h0 * col[:, None] * col[None, :]
    gs = g0 * col
    if m:
        a1 = p.ineq_matrix * col[None, :]
        row = 1.0 / np.maximum(np.max(np.abs(a1), axis=1), 1e-12)
        a_s = a1 * row[:, None]
        bs = p.ineq_bound * row
    else:
        a_s = np.zeros((0, n))
        bs = np.zeros(0)
        row = np.zeros(0)

    def unscale(xs, lams):
        return xs * col, lams * row if m else lams

    if m == 0:
        solve = _chol_solve_factory(hs + 1e-13 * np.eye(n) * max(np.max(np.abs(hs)), 1.0))
        xs = solve(-gs)
        x, lam = unscale(xs, np.zeros(0))
        r_p, r_d, r_c = _residuals(p, x, lam)
        if r_d > max(tol, 1e-8):
            res = {"primal": r_p, "dual": r_d, "complementarity": r_c}
            if float(np.max(np.abs(x))) > 1e12:
                raise QpUnboundedError("objective unbounded below (no constraints)", res)
            raise QpNoConvergenceError(
                f"unconstrained solve left dual residual {r_d:.2e}", residuals=res
            )
        return QpSolution(x, lam, p.objective(x), r_p, r_d, r_c, 1)

    h_norm = max(float(np.max(np.abs(hs))), 1.0)
    # static proximal regularisation: keeps the normal matrix well-posed when the
    # Hessian is rank-deficient; the polish pass restores tight residuals
    reg0 = 3e-10 * h_norm

    # cold start: x = 0 sits on the epigraph boundary for our problems, and a
    # least-squares start is meaningless for penalty-only slack variables
    xs = np.zeros(n)
    s_raw = bs.copy()
    shift = max(0.0, -1.5 * float(s_raw.min()))
    s = s_raw + shift + 0.1 * (1.0 + float(np.abs(bs).max(initial=0.0)))
    lam = np.ones(m)

    best = (xs.copy(), lam.copy())
    best_score = np.inf
    status = "maxiter"
    it = 0
    for it in range(1, max_iter + 1):
        x_u, lam_u = unscale(xs, lam)
        r_p, r_d, r_c = _residuals(p, x_u, lam_u)
        mu = float(s @ lam) / m
        score = max(r_p, r_d, r_c)
        if score < best_score:
            best_score = score
            best = (xs.copy(), lam.copy())
        if r_p <= tol and r_d <= tol and r_c <= tol:
            status = "optimal"
            break
        # divergence checks
        if float(np.max(np.abs(lam))) > 1e13:
            raise QpInfeasibleError(
                "dual variables diverged: constraints look infeasible",
                residuals={"primal": r_p, "dual": r_d, "complementarity": r_c},
            )
        if float(np.max(np.abs(xs))) > 1e13:
            raise QpUnboundedError(
                "iterates diverged: objective looks unbounded below",
                residuals={"primal": r_p, "dual": r_d, "complementarity": r_c},
            )

        # residuals in scaled space
        rd = hs @ xs + gs + a_s.T @ lam
        rp = a_s @ xs + s - bs

        dls = lam / s
        normal = hs + (a_s.T * dls) @ a_s
        normal[np.diag_indices_from(normal)] += reg0
        try:
            nsolve = _chol_solve_factory(normal)
        except QpError:
            break

        def kkt_step(rc):
            rhs = -rd - a_s.T @ ((lam * rp - rc) / s)
            dx = nsolve(rhs)
            ds = -rp - a_s @ dx
            dlam = -(rc + lam * ds) / s
            return dx, ds, dlam

        # predictor
        dx_a, ds_a, dlam_a = kkt_step(s * lam)
        alpha_p = _step_length(s, ds_a)
        alpha_d = _step_length(lam, dlam_a)
        mu_aff = float((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        sigma = min(max(sigma, 0.0), 1.0)

        # corrector
        rc = s * lam + ds_a * dlam_a - sigma * mu
        dx, ds, dlam = kkt_step(rc)
        alpha = 0.99 * min(_step_length(s, ds), _step_length(lam, dlam))
        xs = xs + alpha * dx
        s = s + alpha * ds
        lam = lam + alpha * dlam

    else:
        it = max_iter
        x_u, lam_u = unscale(xs, lam)
        if max(_residuals(p, x_u, lam_u)) < best_score:
            best = (xs.copy(), lam.copy())

    xs, lam = best
    x, lam_u = unscale(xs, lam)
    polished = False
    pol = _polish(p, x, lam_u, tol)
    if pol is not None:
        r_old = _residuals(p, x, lam_u)
        r_new = _residuals(p, *pol)
        if max(r_new) <= max(max(r_old), tol):
            x, lam_u = pol
            polished = True
    r_p, r_d, r_c = _residuals(p, x, lam_u)
    if status != "optimal" and not (r_p <= tol and r_d <= tol and r_c <= tol):
        raise QpNoConvergenceError(
            f"no convergence in {it} iterations "
            f"(primal {r_p:.2e}, dual {r_d:.2e}, comp {r_c:.2e})",
            residuals={"primal": r_p, "dual": r_d, "complementarity": r_c},
        )
    return QpSolution(
        x,
        lam_u,
        p.objective(x),
        r_p,
        r_d,
        r_c,
        it,
        polished=polished,
        diagnostics={"status": status},
    )


def _step_length(v: np.ndarray, dv: np.ndarray, cap: float = 1.0) -> float:
    """Largest alpha <= cap with v + alpha*dv >= 0."""
    neg = dv < 0
    if not np.any(neg):
        return cap
    return float(min(cap, np.min(-v[neg] / dv[neg])))
