"""Shared dense linear-algebra helpers (float64 torch tensors throughout)."""

from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64

# Diagonal jitter ladder used by every Cholesky in the package: start at
# 1e-8 * mean(diag), escalate tenfold up to 1e-4 * mean(diag), then give up.
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class CholeskyError(RuntimeError):
    """Raised when a matrix stays non-positive-definite after maximal jitter."""


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to a float64 tensor, passing tensors through."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def symmetrize(mat: torch.Tensor) -> torch.Tensor:
    return 0.5 * (mat + mat.transpose(-1, -2))


def max_asymmetry(mat: torch.Tensor) -> float:
    return float((mat - mat.transpose(-1, -2)).abs().max())


def jittered_cholesky(mat: torch.Tensor) -> torch.Tensor:
    """Lower Cholesky factor of ``mat``, adding escalating diagonal jitter.

    On failure adds ``JITTER_START * mean(diag)`` to the diagonal and retries,
    escalating tenfold per attempt up to ``JITTER_MAX * mean(diag)``.  Raises
    :class:`CholeskyError` if the matrix never factors.
    """
    mat = symmetrize(as_tensor(mat))
    n = mat.shape[-1]
    scale = float(mat.diagonal(dim1=-2, dim2=-1).mean().abs())
    if scale == 0.0:
        scale = 1.0
    eye = torch.eye(n, dtype=DTYPE)
    jitter = 0.0
    while True:
        factor, info = torch.linalg.cholesky_ex(mat + jitter * eye)
        if int(info) == 0:
            return factor
        if jitter == 0.0:
            jitter = JITTER_START * scale
        elif jitter < JITTER_MAX * scale:
            jitter = min(jitter * 10.0, JITTER_MAX * scale)
        else:
            raise CholeskyError(
                f"matrix of size {n} not positive definite after "
                f"diagonal jitter {jitter:.3e}"
            )


def psd_cholesky(mat: torch.Tensor, tol: float = 1e-10) -> torch.Tensor:
    """Lower-triangular factor L with LL^T = mat for *semi*-definite input.

    Standard Cholesky recursion, but a pivot within ``tol * scale`` of zero is
    treated as exactly zero (the rest of that column must then vanish for a
    PSD matrix, so it is zeroed).  A pivot below ``-tol * scale`` raises.
    """
    mat = symmetrize(as_tensor(mat))
    n = mat.shape[0]
    scale = max(float(mat.diagonal().abs().max()), 1.0)
    low = torch.zeros_like(mat)
    for j in range(n):
        d = float(mat[j, j] - low[j, :j] @ low[j, :j])
        if d > tol * scale:
            low[j, j] = d ** 0.5
            if j + 1 < n:
                low[j + 1 :, j] = (
                    mat[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]
                ) / low[j, j]
        elif d >= -tol * scale:
            low[j, j] = 0.0
        else:
            raise CholeskyError(
                f"pivot {d:.3e} at index {j} below PSD tolerance"
            )
    return low


def solve_lower(low: torch.Tensor, rhs: torch.Tensor) -> torch.Tensor:
    """Solve ``low @ x = rhs`` for lower-triangular ``low``."""
    rhs2d = rhs.unsqueeze(-1) if rhs.ndim == 1 else rhs
    out = torch.linalg.solve_triangular(low, rhs2d, upper=False)
    return out.squeeze(-1) if rhs.ndim == 1 else out


def chol_solve(low: torch.Tensor, rhs: torch.Tensor) -> torch.Tensor:
    """Solve ``(L L^T) x = rhs`` given the lower factor ``low``."""
    rhs2d = rhs.unsqueeze(-1) if rhs.ndim == 1 else rhs
    tmp = torch.linalg.solve_triangular(low, rhs2d, upper=False)
    out = torch.linalg.solve_triangular(low.T, tmp, upper=True)
    return out.squeeze(-1) if rhs.ndim == 1 else out
