"""Semi-contracting LTI systems from unconstrained variables.

A linear system  dx/dt = A x + B u,  y = C x + D u  is semi-contracting when
some symmetric positive-definite metric P satisfies  P A + A^T P <= 0, i.e.
the P-weighted distance between any two trajectories never grows.  Every such
A can be written

    A = -1/2 P^{-1} V2 V2^T + P^{-1} V3,      P = V1 V1^T,

with V1 lower triangular (positive diagonal), V2 lower triangular
(non-negative diagonal) and V3 skew-symmetric.  Since those three sets admit
unconstrained coordinates, the whole family can be trained with plain
gradient methods and stays stable by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .linalg import (
    DTYPE,
    CholeskyError,
    as_tensor,
    max_asymmetry,
    psd_cholesky,
    symmetrize,
    to_numpy,
)

# Offset added to |raw diagonal| of V1 so P = V1 V1^T stays invertible.
EPS_DIAG = 1e-6

_PADE13_B = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_PADE13_THETA = 5.371920351148152


def realize_v1(raw: torch.Tensor) -> torch.Tensor:
    """Lower-triangular matrix with diagonal |raw_jj| + EPS_DIAG."""
    raw = as_tensor(raw)
    return torch.tril(raw, -1) + torch.diag(raw.diagonal().abs() + EPS_DIAG)


def realize_v2(raw: torch.Tensor) -> torch.Tensor:
    """Lower-triangular matrix with diagonal |raw_jj|."""
    raw = as_tensor(raw)
    return torch.tril(raw, -1) + torch.diag(raw.diagonal().abs())


def realize_v3(raw: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric part (raw - raw^T) / 2."""
    raw = as_tensor(raw)
    return 0.5 * (raw - raw.T)


@dataclass
class StableLtiParams:
    """Unconstrained storage for a semi-contracting system.

    ``raw_v1``, ``raw_v2``, ``raw_v3`` are free n-by-n matrices; the
    constrained factors are realized on access.  ``b``, ``c``, ``d`` are
    unconstrained input/output maps.
    """

    raw_v1: torch.Tensor
    raw_v2: torch.Tensor
    raw_v3: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    d: torch.Tensor

    def __post_init__(self):
        self.raw_v1 = as_tensor(self.raw_v1)
        self.raw_v2 = as_tensor(self.raw_v2)
        self.raw_v3 = as_tensor(self.raw_v3)
        self.b = as_tensor(self.b)
        self.c = as_tensor(self.c)
        self.d = as_tensor(self.d)
        n = self.raw_v1.shape[0]
        if self.raw_v1.shape != (n, n) or self.raw_v2.shape != (n, n) \
                or self.raw_v3.shape != (n, n):
            raise ValueError("raw V matrices must share a square shape")
        if self.b.shape[0] != n or self.c.shape[1] != n:
            raise ValueError("B/C dimensions inconsistent with state size")
        if self.d.shape != (self.c.shape[0], self.b.shape[1]):
            raise ValueError("D must be m x p")

    @property
    def n(self) -> int:
        return self.raw_v1.shape[0]

    @property
    def v1(self) -> torch.Tensor:
        return realize_v1(self.raw_v1)

    @property
    def v2(self) -> torch.Tensor:
        return realize_v2(self.raw_v2)

    @property
    def v3(self) -> torch.Tensor:
        return realize_v3(self.raw_v3)

    @classmethod
    def from_realized(cls, v1, v2, v3, b, c, d) -> "StableLtiParams":
        """Build raw storage that realizes to the given factors.

        ``v1`` must be lower triangular with diagonal >= EPS_DIAG, ``v2``
        lower triangular with non-negative diagonal and ``v3`` skew-symmetric.
        """
        v1 = as_tensor(v1)
        v2 = as_tensor(v2)
        v3 = as_tensor(v3)
        if float(v1.diagonal().min()) < EPS_DIAG - 1e-15:
            raise ValueError("v1 diagonal below EPS_DIAG cannot be represented")
        if float(v2.diagonal().min()) < 0.0:
            raise ValueError("v2 diagonal must be non-negative")
        if max_asymmetry(v3 + v3.T) > 1e-12:
            raise ValueError("v3 must be skew-symmetric")
        raw_v1 = torch.tril(v1, -1) + torch.diag(
            torch.clamp(v1.diagonal() - EPS_DIAG, min=0.0)
        )
        return cls(raw_v1, v2.clone(), v3.clone(), b, c, d)


@dataclass
class LtiSystem:
    """Realized system matrices plus a Gaussian initial state.

    ``p_metric`` is the contraction metric certifying stability; ``m_x0`` and
    ``sigma_x0`` parametrise x(0) ~ N(m_x0, sigma_x0).
    """

    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    d: torch.Tensor
    p_metric: torch.Tensor
    m_x0: torch.Tensor
    sigma_x0: torch.Tensor

    def __post_init__(self):
        for name in ("a", "b", "c", "d", "p_metric", "m_x0", "sigma_x0"):
            setattr(self, name, as_tensor(getattr(self, name)))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.c.shape[0]

    @property
    def p(self) -> int:
        return self.b.shape[1]

    def validate(self, tol: float = 1e-8) -> None:
        """Check the semi-contraction certificate and eigenvalue bound."""
        if not check_semi_contracting(self.a, self.p_metric, tol):
            raise ValueError("P A + A^T P has an eigenvalue above tolerance")
        re_parts = np.real(np.linalg.eigvals(to_numpy(self.a)))
        if re_parts.max() > tol:
            raise ValueError(
                f"A has eigenvalue with real part {re_parts.max():.3e} > {tol:.0e}"
            )


def from_params(params: StableLtiParams, m_x0, sigma_x0) -> LtiSystem:
    """Realize a full LtiSystem from unconstrained parameters."""
    a, p = build_state_matrix(params)
    return LtiSystem(a, params.b, params.c, params.d, p, m_x0, sigma_x0)


def build_state_matrix(params: StableLtiParams):
    """Realize (A, P) with A = -1/2 P^{-1} V2 V2^T + P^{-1} V3, P = V1 V1^T.

    The result satisfies P A + A^T P = -V2 V2^T, hence is semi-contracting
    for any raw input.  Emits a warning when P is numerically near-singular.
    """
    v1, v2, v3 = params.v1, params.v2, params.v3
    p = v1 @ v1.T
    cond = float(np.linalg.cond(to_numpy(p)))
    if cond > 1e12:
        warnings.warn(
            f"contraction metric P has condition number {cond:.3e}; "
            "realized dynamics may be inaccurate",
            RuntimeWarning,
        )
    rhs = -0.5 * (v2 @ v2.T) + v3
    a = torch.linalg.solve(p, rhs)
    return a, p


def check_semi_contracting(a, p, tol: float = 1e-8) -> bool:
    """True iff the largest eigenvalue of sym(P A + A^T P) is <= tol."""
    a = as_tensor(a)
    p = as_tensor(p)
    scale = max(float(p.abs().max()), 1.0)
    if max_asymmetry(p) > 1e-12 * scale:
        raise ValueError("contraction metric P must be symmetric")
    lmi = symmetrize(p @ a + a.T @ p)
    eigs = np.linalg.eigvalsh(to_numpy(lmi))
    return bool(eigs[-1] <= tol)


def recover_unconstrained(a, p):
    """Invert the parametrisation: (A, P) -> (V2, V3).

    V2 is a PSD-tolerant Cholesky factor of -(P A + A^T P); V3 is the skew
    part of P A + 1/2 V2 V2^T.  Fails if -(P A + A^T P) has an eigenvalue
    below -1e-8 (the pair is not semi-contracting for this P).
    """
    a = as_tensor(a)
    p = as_tensor(p)
    pa = p @ a
    q = symmetrize(-(pa + pa.T))
    min_eig = float(np.linalg.eigvalsh(to_numpy(q))[0])
    if min_eig < -1e-8:
        raise ValueError(
            f"-(PA + A^T P) has eigenvalue {min_eig:.3e}; not PSD"
        )
    v2 = psd_cholesky(q)
    v3 = 0.5 * ((pa + 0.5 * (v2 @ v2.T)) - (pa + 0.5 * (v2 @ v2.T)).T)
    return v2, v3


def matrix_exp(a, t: float = 1.0) -> torch.Tensor:
    """exp(A t) by scaling-and-squaring with a degree-13 Pade core.

    Written in differentiable torch ops so gradients flow through A.
    """
    a = as_tensor(a) * float(t)
    n = a.shape[0]
    eye = torch.eye(n, dtype=DTYPE)
    norm = float(a.detach().abs().sum(dim=0).max())  # induced 1-norm
    squarings = 0
    if norm > _PADE13_THETA:
        squarings = int(np.ceil(np.log2(norm / _PADE13_THETA)))
        a = a / (2.0 ** squarings)
    b = _PADE13_B
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
    )
    out = torch.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        out = out @ out
    return out


def contraction_metric_trace(
    a, p, x0_a, x0_b, u=None, dt: float = 1e-3, steps: int = 1000
) -> np.ndarray:
    """V(dx) = dx^T P dx along two Euler-simulated trajectories.

    Both trajectories are driven by the identical input sequence ``u``
    (rows are drive vectors in state units, i.e. already multiplied through
    the input map), so their displacement obeys d(dx)/dt = A dx and V must
    be non-increasing up to integration error for a semi-contracting pair.
    Returns the ``steps + 1`` values of V.
    """
    a_np = to_numpy(a)
    p_np = to_numpy(p)
    xa = to_numpy(x0_a).astype(np.float64).copy()
    xb = to_numpy(x0_b).astype(np.float64).copy()
    if u is None:
        u_np = np.zeros((steps, a_np.shape[0]))
    else:
        u_np = to_numpy(u)
        if u_np.shape[0] < steps:
            raise ValueError("input trajectory shorter than step count")
    values = np.empty(steps + 1)
    for k in range(steps):
        dx = xa - xb
        values[k] = dx @ p_np @ dx
        xa = xa + dt * (a_np @ xa + u_np[k])
        xb = xb + dt * (a_np @ xb + u_np[k])
    dx = xa - xb
    values[steps] = dx @ p_np @ dx
    return values
