"""ARD squared-exponential kernel and its curl-free operator-valued derivatives.

The matrix-valued kernel is built from the scalar ARD-SE kernel k(x, x') by
taking mixed second derivatives; with the sign fixed so that the zero-lag block
is positive definite (diagonal 1/sigma_i^2), sections K(., x) z are curl-free
vector fields, which is what lets the kernel model gradient fields.

All derivative blocks are closed-form; the test-suite pins them against central
finite differences.  Lag convention: delta = x - x', u_i = 1/sigma_i^2,

    K(delta)_{ij}        = k * (u_i d_ij - w_i w_j),          w = u * delta
    dK/dx'_l (delta)_{ij} = k * (w_l (u_i d_ij - w_i w_j) + u_l (d_il w_j + d_jl w_i))
    d2K/dx_a dx'_l        = see ``_d2_core``

where d_ij is the Kronecker delta and k = v * exp(-sum(u_i delta_i^2) / 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import ConfigurationError, DimensionError


@dataclass(frozen=True)
class ArdSeParams:
    """Per-dimension lengthscales and signal variance of the scalar ARD-SE kernel."""

    lengthscales: np.ndarray
    signal_variance: float = 1.0

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        object.__setattr__(self, "lengthscales", ls)
        if ls.ndim != 1 or len(ls) == 0:
            raise ConfigurationError("lengthscales must be a 1-D vector")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ConfigurationError("lengthscales must be positive and finite")
        if not self.signal_variance > 0:
            raise ConfigurationError("signal_variance must be > 0")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


def k_scalar(x: np.ndarray, xp: np.ndarray, params: ArdSeParams) -> float:
    """Scalar ARD-SE kernel value exp(-sum((x_i-x'_i)^2 / (2 sigma_i^2)))."""
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape != (params.dim,) or xp.shape != (params.dim,):
        raise DimensionError(f"points must have shape ({params.dim},)")
    d = (x - xp) / params.lengthscales
    return float(params.signal_variance * np.exp(-0.5 * np.dot(d, d)))


@dataclass(frozen=True)
class CurlFreeKernel:
    """Curl-free operator-valued kernel from an ARD-SE scalar kernel.

    ``active_dims`` selects the coordinates the kernel acts on (used after
    model-order selection removes inputs); points passed to the block
    evaluators must already live in the reduced space.
    """

    scalar: ArdSeParams
    active_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.active_dims is not None:
            object.__setattr__(self, "active_dims", tuple(int(i) for i in self.active_dims))

    @property
    def dim(self) -> int:
        return self.scalar.dim

    @property
    def inv_sq_lengthscales(self) -> np.ndarray:
        return 1.0 / self.scalar.lengthscales**2

    def restrict(self, keep: "list[int] | tuple[int, ...]") -> "CurlFreeKernel":
        """Kernel on the coordinate subset ``keep`` (indices into the current dims)."""
        keep = tuple(int(i) for i in keep)
        if any(i < 0 or i >= self.dim for i in keep):
            raise ConfigurationError(f"active dims {keep} out of range for dim {self.dim}")
        parent = self.active_dims or tuple(range(self.dim))
        return CurlFreeKernel(
            ArdSeParams(self.scalar.lengthscales[list(keep)], self.scalar.signal_variance),
            tuple(parent[i] for i in keep),
        )


def _check_points(x, xp, dim):
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape[-1] != dim or xp.shape[-1] != dim:
        raise DimensionError(f"points must have last dimension {dim}")
    return x, xp


def _lag_core(delta: np.ndarray, u: np.ndarray, v: float):
    """Shared pieces: scalar kernel values k and weighted lags w over leading dims."""
    w = delta * u
    k = v * np.exp(-0.5 * np.sum(delta * w, axis=-1))
    return k, w


def _block_core(delta: np.ndarray, u: np.ndarray, v: float) -> np.ndarray:
    """K_curl blocks for a stack of lags: output shape delta.shape + (dim,)."""
    k, w = _lag_core(delta, u, v)
    base = np.diag(u) - w[..., :, None] * w[..., None, :]
    return k[..., None, None] * base


def _d_core(delta: np.ndarray, u: np.ndarray, v: float) -> np.ndarray:
    """d K_curl / d x'_l for all l: output shape delta.shape[:-1] + (n, n, n), last axis l."""
    k, w = _lag_core(delta, u, v)
    n = len(u)
    eye = np.eye(n)
    base = np.diag(u) - w[..., :, None] * w[..., None, :]
    # T_ijl = w_l * base_ij + u_l * (d_il w_j + d_jl w_i)
    t = base[..., :, :, None] * w[..., None, None, :]
    t = t + eye[:, None, :] * w[..., None, :, None] * u[None, None, :]
    t = t + eye[None, :, :] * w[..., :, None, None] * u[None, None, :]
    return k[..., None, None, None] * t


def _d2_core(delta: np.ndarray, u: np.ndarray, v: float) -> np.ndarray:
    """d2 K_curl / d x_a d x'_l: output shape delta.shape[:-1] + (n, n, n, n), axes (i,j,a,l)."""
    k, w = _lag_core(delta, u, v)
    n = len(u)
    eye = np.eye(n)
    base = np.diag(u) - w[..., :, None] * w[..., None, :]
    # P_ijc = d_ic w_j + d_jc w_i  (axes i, j, c)
    p = eye[:, None, :] * w[..., None, :, None] + eye[None, :, :] * w[..., :, None, None]
    # T_ijl = w_l base_ij + u_l P_ijl
    t = base[..., :, :, None] * w[..., None, None, :] + p * u[None, None, :]
    # term A: -w_a T_ijl
    term_a = -w[..., None, None, :, None] * t[..., :, :, None, :]
    # term B1: u_a d_la base_ij       (matrix diag(u) on the (a, l) axes)
    term_b1 = base[..., :, :, None, None] * np.diag(u)[None, None, :, :]
    # term B2: -u_a w_l P_ija
    term_b2 = -(p * u[None, None, :])[..., :, :, :, None] * w[..., None, None, None, :]
    # term B3: u_a u_l (d_il d_ja + d_jl d_ia)
    q = (
        eye[:, None, None, :] * eye[None, :, :, None]
        + eye[None, :, None, :] * eye[:, None, :, None]
    )
    term_b3 = q * u[None, None, :, None] * u[None, None, None, :]
    total = term_a + term_b1 + term_b2 + term_b3
    return k[..., None, None, None, None] * total


def k_curl_block(x, xp, kernel: CurlFreeKernel) -> np.ndarray:
    """Operator-valued kernel block K_curl(x, x'), an n x n matrix."""
    x, xp = _check_points(x, xp, kernel.dim)
    return _block_core(x - xp, kernel.inv_sq_lengthscales, kernel.scalar.signal_variance)


def k_curl_dblock(x, xp, l: int, kernel: CurlFreeKernel) -> np.ndarray:
    """Elementwise derivative of K_curl(x, x') with respect to x'_l."""
    if not (0 <= l < kernel.dim):
        raise DimensionError(f"index {l} out of range for dim {kernel.dim}")
    x, xp = _check_points(x, xp, kernel.dim)
    full = _d_core(x - xp, kernel.inv_sq_lengthscales, kernel.scalar.signal_variance)
    return full[..., l]


def k_curl_d2block(x, xp, a: int, l: int, kernel: CurlFreeKernel) -> np.ndarray:
    """Mixed second derivative d2 K_curl / d x_a d x'_l, elementwise."""
    dim = kernel.dim
    if not (0 <= a < dim) or not (0 <= l < dim):
        raise DimensionError(f"indices ({a}, {l}) out of range for dim {dim}")
    x, xp = _check_points(x, xp, kernel.dim)
    full = _d2_core(x - xp, kernel.inv_sq_lengthscales, kernel.scalar.signal_variance)
    return full[..., a, l]


def gram(points: np.ndarray, kernel: CurlFreeKernel, chunk: int = 256) -> np.ndarray:
    """Block Gram matrix over ``points`` (m, n): output (m*n, m*n), PSD."""
    return cross_gram(points, points, kernel, chunk=chunk)


def cross_gram(
    left: np.ndarray, right: np.ndarray, kernel: CurlFreeKernel, chunk: int = 256
) -> np.ndarray:
    """Cross block matrix with blocks K_curl(left_i, right_j): (m_l*n, m_r*n)."""
    left = np.atleast_2d(np.asarray(left, dtype=float))
    right = np.atleast_2d(np.asarray(right, dtype=float))
    n = kernel.dim
    if left.shape[1] != n or right.shape[1] != n:
        raise DimensionError(f"points must have {n} coordinates")
    ml, mr = len(left), len(right)
    u = kernel.inv_sq_lengthscales
    v = kernel.scalar.signal_variance
    out = np.empty((ml * n, mr * n))
    for lo in range(0, ml, chunk):
        hi = min(lo + chunk, ml)
        delta = left[lo:hi, None, :] - right[None, :, :]
        blocks = _block_core(delta, u, v)  # (hi-lo, mr, n, n)
        out[lo * n : hi * n] = blocks.transpose(0, 2, 1, 3).reshape((hi - lo) * n, mr * n)
    return out


def cross_gram_dblocks(
    left: np.ndarray, right: np.ndarray, kernel: CurlFreeKernel, chunk: int = 128
) -> np.ndarray:
    """Stack of derivative cross blocks dK(left_i, right_j)/dx'_l.

    Output shape (m_l, m_r, n, n, n); last axis is the derivative index l.
    """
    left = np.atleast_2d(np.asarray(left, dtype=float))
    right = np.atleast_2d(np.asarray(right, dtype=float))
    n = kernel.dim
    ml, mr = len(left), len(right)
    out = np.empty((ml, mr, n, n, n))
    for lo in range(0, ml, chunk):
        hi = min(lo + chunk, ml)
        delta = left[lo:hi, None, :] - right[None, :, :]
        out[lo:hi] = _d_core(delta, kernel.inv_sq_lengthscales, kernel.scalar.signal_variance)
    return out


def cross_gram_d2blocks(
    left: np.ndarray, right: np.ndarray, kernel: CurlFreeKernel, chunk: int = 64
) -> np.ndarray:
    """Stack of mixed-second-derivative blocks d2K(left_i, right_j)/dx_a dx'_l.

    Output shape (m_l, m_r, n, n, n, n); trailing axes are (a, l).
    """
    left = np.atleast_2d(np.asarray(left, dtype=float))
    right = np.atleast_2d(np.asarray(right, dtype=float))
    n = kernel.dim
    ml, mr = len(left), len(right)
    out = np.empty((ml, mr, n, n, n, n))
    for lo in range(0, ml, chunk):
        hi = min(lo + chunk, ml)
        delta = left[lo:hi, None, :] - right[None, :, :]
        out[lo:hi] = _d2_core(delta, kernel.inv_sq_lengthscales, kernel.scalar.signal_variance)
    return out


@dataclass(frozen=True)
class BlockDiagKernelSpec:
    """Coordinate partition with a kernel kind per block.

    ``blocks`` is an ordered list of (index tuple, kind) with kind one of
    ``curl_free_se`` (matrix-valued on the sub-coordinates) or ``scalar_se``
    (an independent scalar SE function of one coordinate).
    """

    blocks: tuple = ()
    lengthscales: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        object.__setattr__(self, "lengthscales", ls)
        blocks = tuple((tuple(int(i) for i in idx), kind) for idx, kind in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        seen: set[int] = set()
        for idx, kind in blocks:
            if kind not in ("curl_free_se", "scalar_se"):
                raise ConfigurationError(f"unknown block kind {kind!r}")
            if kind == "scalar_se" and len(idx) != 1:
                raise ConfigurationError("scalar_se blocks must hold exactly one index")
            if seen & set(idx):
                raise ConfigurationError(f"overlapping index sets at block {idx}")
            seen |= set(idx)
        if seen != set(range(len(ls))):
            raise ConfigurationError("blocks must partition 0..dim-1 of the lengthscales")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


class BlockDiagKernel:
    """Evaluator for a block-diagonal operator-valued kernel.

    Off-block entries are identically zero; curl_free_se blocks follow
    k_curl_block on their sub-coordinates, scalar_se blocks are the plain
    scalar SE kernel (1x1).
    """

    def __init__(self, spec: BlockDiagKernelSpec):
        self.spec = spec
        self._subkernels = []
        for idx, kind in spec.blocks:
            params = ArdSeParams(spec.lengthscales[list(idx)])
            self._subkernels.append((idx, kind, CurlFreeKernel(params)))

    @property
    def dim(self) -> int:
        return self.spec.dim

    def block(self, x, xp) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        if x.shape != (self.dim,) or xp.shape != (self.dim,):
            raise DimensionError(f"points must have shape ({self.dim},)")
        out = np.zeros((self.dim, self.dim))
        for idx, kind, sub in self._subkernels:
            ii = np.asarray(idx)
            if kind == "curl_free_se":
                out[np.ix_(ii, ii)] = k_curl_block(x[ii], xp[ii], sub)
            else:
                out[ii[0], ii[0]] = k_scalar(x[ii], xp[ii], sub.scalar)
        return out

    def cross_gram(self, left: np.ndarray, right: np.ndarray, chunk: int = 256) -> np.ndarray:
        left = np.atleast_2d(np.asarray(left, dtype=float))
        right = np.atleast_2d(np.asarray(right, dtype=float))
        n = self.dim
        ml, mr = len(left), len(right)
        out = np.zeros((ml * n, mr * n))
        row = np.arange(ml) * n
        col = np.arange(mr) * n
        for idx, kind, sub in self._subkernels:
            ii = np.asarray(idx)
            if kind == "curl_free_se":
                g = cross_gram(left[:, ii], right[:, ii], sub, chunk=chunk)
                for p, gi in enumerate(ii):
                    for q, gj in enumerate(ii):
                        out[np.ix_(row + gi, col + gj)] = g[p::len(ii), q::len(ii)]
            else:
                d = (left[:, ii[0], None] - right[None, :, ii[0]]) / sub.scalar.lengthscales[0]
                g = sub.scalar.signal_variance * np.exp(-0.5 * d**2)
                out[np.ix_(row + ii[0], col + ii[0])] = g
        return out


def build_block_diag(spec: BlockDiagKernelSpec) -> BlockDiagKernel:
    """Construct the block-diagonal kernel evaluator for ``spec``."""
    return BlockDiagKernel(spec)
