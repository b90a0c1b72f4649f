"""Shared fixtures: the spiralling-particle case-study system and oracles."""

import math

import numpy as np
import pytest

from segp_lab.segp_prior import InputGp, QuadratureConfig, TimeGrid
from segp_lab.stable_lti import LtiSystem


def make_spiral_system() -> LtiSystem:
    """Radius decays at rate 0.6; angle integrates the scalar input."""
    return LtiSystem(
        a=[[-0.6, 0.0], [0.0, 0.0]],
        b=[[0.0], [1.0]],
        c=np.eye(2),
        d=[[0.0], [0.0]],
        p_metric=np.eye(2),
        m_x0=[1.5, 0.0],
        sigma_x0=0.04 * np.eye(2),
    )


def make_spiral_input() -> InputGp:
    return InputGp.linear_trend_se(slope=0.4 * math.pi)


def spiral_closed_mean(t: float) -> np.ndarray:
    return np.array([1.5 * math.exp(-0.6 * t), 0.2 * math.pi * t * t])


def _gauss_integral(z: float) -> float:
    from scipy.special import erf

    return math.sqrt(math.pi / 2.0) * erf(z / math.sqrt(2.0))


def _gauss_double_integral(z: float) -> float:
    return z * _gauss_integral(z) + math.exp(-0.5 * z * z) - 1.0


def spiral_closed_cov(t: float, t2: float) -> np.ndarray:
    """Hand-integrated covariance of the decoupled spiral system."""
    k = np.zeros((2, 2))
    k[0, 0] = 0.04 * math.exp(-0.6 * (t + t2))
    k[1, 1] = 0.04 + (
        _gauss_double_integral(t)
        + _gauss_double_integral(t2)
        - _gauss_double_integral(t - t2)
    )
    return k


@pytest.fixture
def spiral_system() -> LtiSystem:
    return make_spiral_system()


@pytest.fixture
def spiral_input() -> InputGp:
    return make_spiral_input()


@pytest.fixture
def spiral_grid() -> TimeGrid:
    return TimeGrid.regular(25, 0.12)


@pytest.fixture
def quad() -> QuadratureConfig:
    return QuadratureConfig(1e-2)
