"""Exact Gaussian inference on grid Gaussians.

Conditioning, Kullback-Leibler divergences (optionally in a per-dimension
normalised space) and the log marginal likelihood of an independent
squared-exponential baseline.  Every solve goes through a jittered Cholesky
factor; no explicit inverses or determinants are formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .linalg import (
    DTYPE,
    as_tensor,
    chol_solve,
    jittered_cholesky,
    solve_lower,
    symmetrize,
    to_numpy,
)
from .segp_prior import GaussianOverGrid, TimeGrid


@dataclass
class NoiseModel:
    """Independent per-entry observation noise, dimension-major diagonal."""

    variances: torch.Tensor

    def __post_init__(self):
        self.variances = as_tensor(self.variances)
        if float(self.variances.min()) <= 0.0:
            raise ValueError("noise variances must be strictly positive")

    @classmethod
    def isotropic(cls, dim: int, count: int, variance: float) -> "NoiseModel":
        return cls(torch.full((dim * count,), float(variance), dtype=DTYPE))

    @classmethod
    def per_dimension(cls, variances, count: int) -> "NoiseModel":
        v = as_tensor(variances)
        return cls(v.repeat_interleave(count))

    def diag(self) -> torch.Tensor:
        return torch.diag(self.variances)


@dataclass
class ScaleVector:
    """Positive per-dimension scale factors for normalised-space divergences."""

    scales: torch.Tensor

    def __post_init__(self):
        self.scales = as_tensor(self.scales)
        if float(self.scales.min()) <= 0.0:
            raise ValueError("scales must be strictly positive")

    @classmethod
    def from_latents(cls, latents) -> "ScaleVector":
        """Largest |value| of each dimension over a (B, m, N) latent batch."""
        arr = np.abs(np.asarray(latents, dtype=np.float64))
        peaks = arr.max(axis=(0, 2))
        return cls(np.maximum(peaks, 1e-12))

    def expand(self, count: int) -> torch.Tensor:
        return self.scales.repeat_interleave(count)


def _flat_indices(grid_positions: np.ndarray, dim: int, grid_len: int) -> torch.Tensor:
    """Dimension-major flat indices of the given time positions, all dims."""
    pos = torch.as_tensor(grid_positions, dtype=torch.long)
    offsets = torch.arange(dim, dtype=torch.long) * grid_len
    return (offsets[:, None] + pos[None, :]).reshape(-1)


def _restrict(gauss: GaussianOverGrid, subgrid: TimeGrid) -> GaussianOverGrid:
    idx = _flat_indices(subgrid.indices_in(gauss.grid), gauss.dim, len(gauss.grid))
    return GaussianOverGrid(
        gauss.mean[idx], gauss.cov[idx][:, idx], subgrid, gauss.dim
    )


def condition(
    prior: GaussianOverGrid,
    obs_mean,
    obs_noise: NoiseModel | None,
    t_obs: TimeGrid | None,
    t_test: TimeGrid,
) -> GaussianOverGrid:
    """Condition a joint Gaussian on noisy observations at ``t_obs``.

    ``prior`` must cover the union of ``t_obs`` and ``t_test``.  With no
    observations (``t_obs`` is None) the prior restricted to ``t_test`` is
    returned unchanged.  The posterior is

        mean = m(T*) + K(T*,T) (K(T,T) + S)^{-1} (obs - m(T))
        cov  = K(T*,T*) - K(T*,T) (K(T,T) + S)^{-1} K(T,T*)

    computed through Cholesky solves on K(T,T) + S.
    """
    if t_obs is None or len(t_obs) == 0:
        return _restrict(prior, t_test)
    if obs_noise is None:
        raise ValueError("observations require a noise model")

    grid_len = len(prior.grid)
    obs_idx = _flat_indices(t_obs.indices_in(prior.grid), prior.dim, grid_len)
    test_idx = _flat_indices(t_test.indices_in(prior.grid), prior.dim, grid_len)
    obs_mean = as_tensor(obs_mean)
    if obs_mean.shape != obs_idx.shape:
        raise ValueError("observation vector length mismatch")

    k_oo = prior.cov[obs_idx][:, obs_idx] + obs_noise.diag()
    k_ot = prior.cov[obs_idx][:, test_idx]
    k_tt = prior.cov[test_idx][:, test_idx]
    m_o = prior.mean[obs_idx]
    m_t = prior.mean[test_idx]

    low = jittered_cholesky(k_oo)
    alpha = chol_solve(low, obs_mean - m_o)
    half = solve_lower(low, k_ot)
    post_mean = m_t + k_ot.T @ alpha
    post_cov = symmetrize(k_tt - half.T @ half)
    return GaussianOverGrid(post_mean, post_cov, t_test, prior.dim)


def gaussian_kl(p: GaussianOverGrid, q: GaussianOverGrid) -> torch.Tensor:
    """Closed-form KL(p || q) between two grid Gaussians (torch scalar)."""
    if p.size != q.size or p.dim != q.dim:
        raise ValueError("KL requires Gaussians of matching dimension")
    low_p = jittered_cholesky(p.cov)
    low_q = jittered_cholesky(q.cov)
    half = solve_lower(low_q, low_p)
    trace = (half ** 2).sum()
    white = solve_lower(low_q, q.mean - p.mean)
    quad = (white ** 2).sum()
    logdet = 2.0 * (
        torch.log(low_q.diagonal()).sum() - torch.log(low_p.diagonal()).sum()
    )
    return 0.5 * (trace + quad - p.size + logdet)


def scaled_kl(
    p: GaussianOverGrid, q: GaussianOverGrid, scales: ScaleVector
) -> torch.Tensor:
    """KL after dividing dimension j's means by s_j and covariances by s_j s_l."""
    if p.size != q.size:
        raise ValueError("KL requires Gaussians of matching dimension")
    s = scales.expand(len(p.grid))
    outer = s[:, None] * s[None, :]

    def rescale(g: GaussianOverGrid) -> GaussianOverGrid:
        return GaussianOverGrid(g.mean / s, g.cov / outer, g.grid, g.dim)

    return gaussian_kl(rescale(p), rescale(q))


@dataclass
class SeHyper:
    """Per-dimension squared-exponential hyperparameters in log space."""

    log_variance: torch.Tensor
    log_lengthscale: torch.Tensor

    def __post_init__(self):
        self.log_variance = as_tensor(self.log_variance)
        self.log_lengthscale = as_tensor(self.log_lengthscale)
        if self.log_variance.shape != self.log_lengthscale.shape:
            raise ValueError("hyperparameter shapes must match")

    @property
    def dim(self) -> int:
        return self.log_variance.shape[0]


def se_baseline_prior(grid: TimeGrid, hyper: SeHyper) -> GaussianOverGrid:
    """Zero-mean GP with independent SE kernels per dimension.

    Cross-dimension covariance blocks are exactly zero by construction.
    """
    n = len(grid)
    ts = as_tensor(grid.points)
    diff = ts[:, None] - ts[None, :]
    blocks = []
    for j in range(hyper.dim):
        var = torch.exp(hyper.log_variance[j])
        length = torch.exp(hyper.log_lengthscale[j])
        blocks.append(var * torch.exp(-0.5 * (diff / length) ** 2))
    cov = torch.block_diag(*blocks)
    return GaussianOverGrid(torch.zeros(hyper.dim * n, dtype=DTYPE), cov,
                            grid, hyper.dim)


def log_marginal_likelihood(
    hyper: SeHyper, grid: TimeGrid, trajectories, noise: NoiseModel
) -> torch.Tensor:
    """Gaussian log evidence of the zero-mean SE baseline over a batch.

    ``trajectories`` is (B, m*N) dimension-major.  Returns
    -1/2 sum_b [ y_b^T (K+S)^{-1} y_b + logdet(K+S) + mN log 2pi ].
    """
    ys = as_tensor(trajectories)
    if ys.ndim == 1:
        ys = ys.unsqueeze(0)
    prior = se_baseline_prior(grid, hyper)
    gram = prior.cov + noise.diag()
    low = jittered_cholesky(gram)
    white = solve_lower(low, ys.T)  # (mN, B)
    quad = (white ** 2).sum()
    logdet = 2.0 * torch.log(low.diagonal()).sum()
    batch = ys.shape[0]
    size = ys.shape[1]
    return -0.5 * (quad + batch * (logdet + size * math.log(2.0 * math.pi)))


def fit_se_baseline(
    grid: TimeGrid,
    trajectories,
    noise: NoiseModel,
    steps: int = 500,
    learning_rate: float = 1e-2,
):
    """Fit the SE baseline by gradient ascent on the log hyperparameters.

    Returns the fitted hyperparameters and the per-step log-evidence trace.
    """
    ys = to_numpy(trajectories)
    if ys.ndim == 1:
        ys = ys[None, :]
    dim = ys.shape[1] // len(grid)
    per_dim = ys.reshape(ys.shape[0], dim, len(grid))
    init_var = np.maximum(per_dim.var(axis=(0, 2)), 1e-6)
    log_var = torch.tensor(np.log(init_var), dtype=DTYPE, requires_grad=True)
    log_len = torch.zeros(dim, dtype=DTYPE, requires_grad=True)

    trace = np.empty(steps)
    ys_t = as_tensor(ys)
    for it in range(steps):
        hyper = SeHyper(log_var, log_len)
        value = log_marginal_likelihood(hyper, grid, ys_t, noise)
        grad_var, grad_len = torch.autograd.grad(value, (log_var, log_len))
        with torch.no_grad():
            log_var += learning_rate * grad_var
            log_len += learning_rate * grad_len
        trace[it] = float(value)
    return SeHyper(log_var.detach(), log_len.detach()), trace
