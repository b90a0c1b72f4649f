"""Gaussian-process prior induced by a stable LTI system.

For y(t) = C x(t) + D u(t) with dx/dt = A x + B u, a Gaussian input process
u and Gaussian x(0), the output y is itself a GP.  Writing
G(t, s) = C e^{A (t - s)} B for the output Green's function, the mean and
matrix-valued covariance are

    m_y(t)     = C e^{At} m_x0 + int_0^t G(t, s) m_u(s) ds + D m_u(t)
    K_y(t, t') = C e^{At} S_x0 e^{A t'}^T C^T + D K_u(t, t') D^T
                 + int_0^t int_0^{t'} G(t, s) K_u(s, s') G(t', s')^T ds' ds
                 + int_0^t  G(t, s) K_u(s, t') D^T ds
                 + int_0^{t'} D K_u(t, s') G(t', s')^T ds'

All integrals are evaluated by composite trapezoid rule on a fine grid whose
step divides every requested time, with e^{A h} powers cached per offset so
each assembly costs a handful of dense matmuls.  Everything runs in
differentiable torch ops, so gradients flow back to the system matrices.

Vectors over a time grid use dimension-major ordering: entry (dim j, time i)
lives at flat index j * N + i.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .linalg import DTYPE, as_tensor, jittered_cholesky, symmetrize, to_numpy
from .stable_lti import LtiSystem, matrix_exp

GRID_ALIGN_TOL = 1e-9


@dataclass
class TimeGrid:
    """Strictly increasing non-negative time points."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 1 or self.points.size == 0:
            raise ValueError("grid must be a non-empty 1-d array")
        if self.points[0] < 0.0:
            raise ValueError("grid times must be non-negative")
        if self.points.size > 1 and np.diff(self.points).min() <= 0.0:
            raise ValueError("grid times must be strictly increasing")

    @classmethod
    def regular(cls, count: int, period: float, start: float = 0.0) -> "TimeGrid":
        return cls(start + period * np.arange(count))

    def __len__(self) -> int:
        return self.points.size

    def union(self, other: "TimeGrid") -> "TimeGrid":
        merged = np.union1d(self.points, other.points)
        return TimeGrid(merged)

    def indices_in(self, superset: "TimeGrid") -> np.ndarray:
        """Positions of this grid's points inside ``superset`` (exact match)."""
        idx = np.searchsorted(superset.points, self.points)
        if idx.max(initial=-1) >= len(superset) or not np.allclose(
            superset.points[idx], self.points, rtol=0.0, atol=GRID_ALIGN_TOL
        ):
            raise ValueError("grid is not a subset of the given superset")
        return idx


def se_input_kernel(t, t2, variance: float, lengthscale: float):
    """Squared-exponential kernel variance * exp(-0.5 (t-t2)^2 / l^2)."""
    if variance <= 0.0 or lengthscale <= 0.0:
        raise ValueError("variance and lengthscale must be positive")
    diff = np.asarray(t, dtype=np.float64) - np.asarray(t2, dtype=np.float64)
    return variance * np.exp(-0.5 * (diff / lengthscale) ** 2)


@dataclass
class InputGp:
    """Input process with known mean and covariance functions.

    ``mean_fn`` maps times (L,) to means (L, p); ``kernel_fn`` maps two time
    arrays to covariance blocks (L1, L2, p, p).
    """

    p: int
    mean_fn: Callable[[np.ndarray], np.ndarray]
    kernel_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    descriptor: dict = field(default_factory=dict)

    @classmethod
    def linear_trend_se(
        cls, slope, intercept=0.0, variance=1.0, lengthscale=1.0, p: int = 1
    ) -> "InputGp":
        """Linear mean slope*t + intercept with independent SE kernels per dim."""
        slope = np.broadcast_to(np.asarray(slope, dtype=np.float64), (p,)).copy()
        intercept = np.broadcast_to(np.asarray(intercept, dtype=np.float64), (p,)).copy()
        variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), (p,)).copy()
        lengthscale = np.broadcast_to(
            np.asarray(lengthscale, dtype=np.float64), (p,)
        ).copy()
        if (variance <= 0).any() or (lengthscale <= 0).any():
            raise ValueError("variance and lengthscale must be positive")

        def mean_fn(ts):
            ts = np.asarray(ts, dtype=np.float64)
            return ts[:, None] * slope[None, :] + intercept[None, :]

        def kernel_fn(ts1, ts2):
            ts1 = np.asarray(ts1, dtype=np.float64)
            ts2 = np.asarray(ts2, dtype=np.float64)
            out = np.zeros((ts1.size, ts2.size, p, p))
            for j in range(p):
                out[:, :, j, j] = se_input_kernel(
                    ts1[:, None], ts2[None, :], variance[j], lengthscale[j]
                )
            return out

        descriptor = {
            "form": "linear_trend_se",
            "slope": slope.tolist(),
            "intercept": intercept.tolist(),
            "variance": variance.tolist(),
            "lengthscale": lengthscale.tolist(),
        }
        return cls(p, mean_fn, kernel_fn, descriptor)

    def mean_at(self, ts) -> np.ndarray:
        return np.asarray(self.mean_fn(np.atleast_1d(np.asarray(ts, dtype=np.float64))))

    def gram(self, ts1, ts2) -> np.ndarray:
        """Dense (L1*p, L2*p) covariance with time-major p-blocks."""
        ts1 = np.atleast_1d(np.asarray(ts1, dtype=np.float64))
        ts2 = np.atleast_1d(np.asarray(ts2, dtype=np.float64))
        blocks = np.asarray(self.kernel_fn(ts1, ts2))
        return blocks.transpose(0, 2, 1, 3).reshape(ts1.size * self.p,
                                                    ts2.size * self.p)


@dataclass
class QuadratureConfig:
    """Composite-trapezoid settings; ``fine_step`` must divide grid spacings."""

    fine_step: float = 1e-2


@dataclass
class GaussianOverGrid:
    """Gaussian over an m-dimensional process observed on a time grid.

    ``mean`` has length m*N and ``cov`` is (m*N, m*N), both dimension-major:
    flat index (j, i) = j * N + i for dimension j, time i.
    """

    mean: torch.Tensor
    cov: torch.Tensor
    grid: TimeGrid
    dim: int

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.cov = as_tensor(self.cov)
        size = self.dim * len(self.grid)
        if self.mean.shape != (size,) or self.cov.shape != (size, size):
            raise ValueError("mean/cov shapes inconsistent with grid and dim")

    @property
    def size(self) -> int:
        return self.dim * len(self.grid)

    def flat_index(self, dim_j: int, time_i: int) -> int:
        return dim_j * len(self.grid) + time_i

    def dim_slice(self, dim_j: int) -> slice:
        n = len(self.grid)
        return slice(dim_j * n, (dim_j + 1) * n)

    def marginal_variance(self, dim_j: int | None = None) -> torch.Tensor:
        diag = self.cov.diagonal()
        return diag if dim_j is None else diag[self.dim_slice(dim_j)]

    def chol(self) -> torch.Tensor:
        return jittered_cholesky(self.cov)

    def validate(self) -> None:
        if float((self.cov - self.cov.T).abs().max()) > 1e-10:
            raise ValueError("covariance asymmetry above 1e-10")
        cov = to_numpy(self.cov)
        min_eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]
        if min_eig < -1e-8 * max(np.trace(cov), 1e-300):
            raise ValueError(f"covariance min eigenvalue {min_eig:.3e} too negative")


def greens_c(t: float, s: float, sys: LtiSystem) -> torch.Tensor:
    """Output Green's function C e^{A (t - s)} B; requires t >= s."""
    if t - s < -GRID_ALIGN_TOL:
        raise ValueError("greens_c requires t >= s")
    return sys.c @ matrix_exp(sys.a, max(t - s, 0.0)) @ sys.b


def _fine_count(t: float, fine_step: float) -> int:
    k = int(round(t / fine_step))
    if abs(k * fine_step - t) > GRID_ALIGN_TOL:
        raise ValueError(
            f"time {t!r} is not a multiple of fine_step {fine_step!r}"
        )
    return k


def _exp_powers(sys: LtiSystem, fine_step: float, count: int) -> torch.Tensor:
    """Stack of (e^{A h})^k for k = 0..count; the chain keeps grads exact."""
    n = sys.n
    step = matrix_exp(sys.a, fine_step)
    powers = [torch.eye(n, dtype=DTYPE)]
    for _ in range(count):
        powers.append(powers[-1] @ step)
    return torch.stack(powers)


def _trapezoid_weights(k: int, h: float) -> torch.Tensor:
    """Weights for int_0^{k h} on nodes 0..k (all zero when k = 0)."""
    w = torch.full((k + 1,), h, dtype=DTYPE)
    if k == 0:
        w[0] = 0.0
    else:
        w[0] = 0.5 * h
        w[k] = 0.5 * h
    return w


def _green_rows(
    sys: LtiSystem, powers: torch.Tensor, fine_counts: list[int], h: float
) -> torch.Tensor:
    """Trapezoid-weighted Green's blocks W with W[i] @ f_fine = int_0^{t_i} G f.

    Returns (N, m, Q) where Q = (M + 1) * p over fine nodes 0..M and
    W[i, :, k*p:(k+1)*p] = w_k * C e^{A (t_i - s_k)} B.
    """
    m, p = sys.m, sys.p
    total = powers.shape[0]  # M + 1
    ceb = torch.einsum("an,knj->kaj", sys.c, powers @ sys.b.unsqueeze(0))
    rows = []
    for k_i in fine_counts:
        w = _trapezoid_weights(k_i, h)
        block = torch.flip(ceb[: k_i + 1], dims=(0,)) * w[:, None, None]
        if k_i + 1 < total:
            pad = torch.zeros((total - k_i - 1, m, p), dtype=DTYPE)
            block = torch.cat([block, pad], dim=0)
        rows.append(block.permute(1, 0, 2).reshape(m, total * p))
    return torch.stack(rows)


def _assemble(
    times: np.ndarray,
    sys: LtiSystem,
    u: InputGp,
    quad: QuadratureConfig,
    want_cov: bool = True,
):
    """Mean blocks (N, m) and covariance blocks (N, N, m, m) at ``times``."""
    h = quad.fine_step
    counts = [_fine_count(float(t), h) for t in times]
    m_total = max(counts)
    fine = h * np.arange(m_total + 1)
    powers = _exp_powers(sys, h, m_total)
    w_rows = _green_rows(sys, powers, counts, h)

    mu_fine = as_tensor(u.mean_at(fine).reshape(-1))
    mu_grid = as_tensor(u.mean_at(times))
    ce = torch.stack([sys.c @ powers[k] for k in counts])

    mean_blocks = (
        ce @ sys.m_x0
        + w_rows @ mu_fine
        + mu_grid @ sys.d.T
    )
    if not want_cov:
        return mean_blocks, None

    ku_fine = as_tensor(u.gram(fine, fine))
    ku_fine_grid = as_tensor(u.gram(fine, times)).reshape(
        (m_total + 1) * u.p, len(times), u.p
    )
    ku_grid = as_tensor(u.gram(times, times)).reshape(
        len(times), u.p, len(times), u.p
    ).permute(0, 2, 1, 3)

    term_init = torch.einsum("ian,nk,jbk->ijab", ce, sys.sigma_x0, ce)
    term_feed = torch.einsum("ap,ijpq,bq->ijab", sys.d, ku_grid, sys.d)
    tmp = torch.einsum("iaq,qr->iar", w_rows, ku_fine)
    term_conv = torch.einsum("iar,jbr->ijab", tmp, w_rows)
    term_cross = torch.einsum("iaq,qjp,bp->ijab", w_rows, ku_fine_grid, sys.d)
    cov_blocks = (
        term_init
        + term_feed
        + term_conv
        + term_cross
        + term_cross.permute(1, 0, 3, 2)
    )
    return mean_blocks, cov_blocks


def prior_mean(
    t: float, sys: LtiSystem, u: InputGp, quad: QuadratureConfig | None = None
) -> torch.Tensor:
    """Mean m_y(t) of the induced output process."""
    quad = quad or QuadratureConfig()
    if t < 0.0:
        raise ValueError("time must be non-negative")
    mean_blocks, _ = _assemble(np.array([t]), sys, u, quad, want_cov=False)
    return mean_blocks[0]


def prior_cov(
    t: float,
    t2: float,
    sys: LtiSystem,
    u: InputGp,
    quad: QuadratureConfig | None = None,
) -> torch.Tensor:
    """Matrix-valued covariance K_y(t, t2) of the induced output process."""
    quad = quad or QuadratureConfig()
    if t < 0.0 or t2 < 0.0:
        raise ValueError("times must be non-negative")
    times, inverse = np.unique(np.array([t, t2]), return_inverse=True)
    _, cov_blocks = _assemble(times, sys, u, quad)
    return cov_blocks[inverse[0], inverse[1]]


def prior_over_grid(
    grid: TimeGrid,
    sys: LtiSystem,
    u: InputGp,
    quad: QuadratureConfig | None = None,
) -> GaussianOverGrid:
    """Joint Gaussian of y over ``grid`` in dimension-major ordering."""
    quad = quad or QuadratureConfig()
    mean_blocks, cov_blocks = _assemble(grid.points, sys, u, quad)
    n = len(grid)
    m = sys.m
    mean = mean_blocks.T.reshape(m * n)
    cov = symmetrize(cov_blocks.permute(2, 0, 3, 1).reshape(m * n, m * n))
    return GaussianOverGrid(mean, cov, grid, m)
