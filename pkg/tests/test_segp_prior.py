import math

import numpy as np
import pytest
import torch

from segp_lab.linalg import to_numpy
from segp_lab.segp_prior import (
    GaussianOverGrid,
    InputGp,
    QuadratureConfig,
    TimeGrid,
    greens_c,
    prior_cov,
    prior_mean,
    prior_over_grid,
    se_input_kernel,
)
from segp_lab.stable_lti import LtiSystem, build_state_matrix, matrix_exp

from conftest import (
    make_spiral_input,
    make_spiral_system,
    spiral_closed_cov,
    spiral_closed_mean,
)


def random_system(rng, n=2, m=2, p=1) -> LtiSystem:
    """Well-conditioned random semi-contracting system."""
    from segp_lab.stable_lti import StableLtiParams

    raw_v1 = 0.3 * rng.standard_normal((n, n))
    raw_v1[np.diag_indices(n)] = 1.0 + 0.2 * rng.random(n)
    params = StableLtiParams(
        raw_v1,
        0.7 * rng.standard_normal((n, n)),
        0.7 * rng.standard_normal((n, n)),
        rng.standard_normal((n, p)),
        rng.standard_normal((m, n)),
        rng.standard_normal((m, p)),
    )
    a, p_metric = build_state_matrix(params)
    sig = 0.3 * rng.standard_normal((n, n))
    return LtiSystem(
        a, params.b, params.c, params.d, p_metric,
        rng.standard_normal(n), sig @ sig.T,
    )


def random_input(rng, p=1) -> InputGp:
    return InputGp.linear_trend_se(
        slope=rng.uniform(-1, 1, p),
        intercept=rng.uniform(-1, 1, p),
        variance=rng.uniform(0.5, 2.0, p),
        lengthscale=rng.uniform(0.5, 2.0, p),
        p=p,
    )


class TestTimeGrid:
    def test_regular(self):
        grid = TimeGrid.regular(25, 0.12)
        assert len(grid) == 25
        assert grid.points[-1] == pytest.approx(2.88)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.2, 0.1]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([-0.1, 0.2]))

    def test_union_and_indices(self):
        a = TimeGrid(np.array([0.0, 0.2, 0.4]))
        b = TimeGrid(np.array([0.1, 0.2]))
        merged = a.union(b)
        assert np.allclose(merged.points, [0.0, 0.1, 0.2, 0.4])
        assert list(b.indices_in(merged)) == [1, 2]


class TestSeInputKernel:
    def test_at_zero_lag(self):
        assert se_input_kernel(1.3, 1.3, 1.0, 1.0) == pytest.approx(1.0)

    def test_unit_lag(self):
        assert se_input_kernel(2.0, 1.0, 1.0, 1.0) == pytest.approx(
            0.6065306597126334, abs=1e-12
        )

    def test_far_apart_vanishes(self):
        assert se_input_kernel(0.0, 40.0, 1.0, 1.0) < 1e-300

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            se_input_kernel(0.0, 1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            se_input_kernel(0.0, 1.0, 1.0, 0.0)


class TestGreensC:
    def test_equal_times(self):
        sys_ = make_spiral_system()
        assert np.allclose(to_numpy(greens_c(1.0, 1.0, sys_)),
                           to_numpy(sys_.c @ sys_.b))

    def test_spiral_column_constant(self):
        sys_ = make_spiral_system()
        for t, s in [(0.5, 0.0), (2.0, 1.3), (3.0, 3.0)]:
            assert np.allclose(to_numpy(greens_c(t, s, sys_)),
                               [[0.0], [1.0]], atol=1e-12)

    def test_zero_output_map(self):
        sys_ = make_spiral_system()
        sys_.c = torch.zeros_like(sys_.c)
        assert np.abs(to_numpy(greens_c(1.0, 0.2, sys_))).max() == 0.0

    def test_rejects_reversed_times(self):
        with pytest.raises(ValueError):
            greens_c(0.0, 1.0, make_spiral_system())


class TestPriorMean:
    def test_zero_means_give_zero(self, quad):
        sys_ = make_spiral_system()
        sys_.m_x0 = torch.zeros_like(sys_.m_x0)
        u = InputGp.linear_trend_se(slope=0.0)
        assert np.abs(to_numpy(prior_mean(2.0, sys_, u, quad))).max() < 1e-14

    def test_spiral_at_zero(self, spiral_system, spiral_input, quad):
        assert np.allclose(
            to_numpy(prior_mean(0.0, spiral_system, spiral_input, quad)),
            [1.5, 0.0], atol=1e-14,
        )

    def test_spiral_closed_form(self, spiral_system, spiral_input, quad):
        for t in (0.12, 1.5, 3.0):
            got = to_numpy(prior_mean(t, spiral_system, spiral_input, quad))
            want = spiral_closed_mean(t)
            assert np.abs(got - want).max() / np.abs(want).max() < 1e-3


class TestPriorCov:
    def test_initial_condition_only(self, spiral_system, spiral_input, quad):
        got = to_numpy(prior_cov(0.0, 0.0, spiral_system, spiral_input, quad))
        assert np.allclose(got, 0.04 * np.eye(2), atol=1e-14)

    def test_feedthrough_only(self, quad):
        rng = np.random.default_rng(0)
        sys_ = random_system(rng)
        sys_.b = torch.zeros_like(sys_.b)
        sys_.sigma_x0 = torch.zeros_like(sys_.sigma_x0)
        u = random_input(rng)
        t, t2 = 0.5, 1.25
        got = to_numpy(prior_cov(t, t2, sys_, u, quad))
        ku = u.gram([t], [t2])
        want = to_numpy(sys_.d) @ ku @ to_numpy(sys_.d).T
        assert np.abs(got - want).max() < 1e-12

    def test_spiral_closed_form(self, spiral_system, spiral_input, quad):
        for t, t2 in [(3.0, 3.0), (1.5, 3.0), (0.12, 2.88), (0.96, 0.96)]:
            got = to_numpy(prior_cov(t, t2, spiral_system, spiral_input, quad))
            want = spiral_closed_cov(t, t2)
            assert np.abs(got - want).max() < 1e-4

    def test_symmetry_in_arguments(self, quad):
        rng = np.random.default_rng(21)
        for _ in range(5):
            sys_ = random_system(rng, n=3, m=2, p=2)
            u = random_input(rng, p=2)
            for _ in range(20):
                t, t2 = np.round(rng.uniform(0.0, 1.5, 2) * 100) / 100
                k12 = to_numpy(prior_cov(float(t), float(t2), sys_, u, quad))
                k21 = to_numpy(prior_cov(float(t2), float(t), sys_, u, quad))
                assert np.abs(k12 - k21.T).max() < 1e-9

    def test_rejects_off_grid_times(self, spiral_system, spiral_input, quad):
        with pytest.raises(ValueError):
            prior_cov(0.005, 0.12, spiral_system, spiral_input, quad)


class TestPriorOverGrid:
    def test_single_point_at_zero(self, spiral_system, spiral_input, quad):
        gauss = prior_over_grid(TimeGrid(np.array([0.0])), spiral_system,
                                spiral_input, quad)
        assert np.allclose(to_numpy(gauss.mean), [1.5, 0.0], atol=1e-14)
        assert np.allclose(to_numpy(gauss.cov), 0.04 * np.eye(2), atol=1e-14)

    def test_zero_maps_give_zero_gaussian(self, quad):
        sys_ = make_spiral_system()
        sys_.c = torch.zeros_like(sys_.c)
        sys_.m_x0 = torch.zeros_like(sys_.m_x0)
        u = InputGp.linear_trend_se(slope=0.0)
        gauss = prior_over_grid(TimeGrid.regular(5, 0.12), sys_, u, quad)
        assert np.abs(to_numpy(gauss.mean)).max() == 0.0
        assert np.abs(to_numpy(gauss.cov)).max() == 0.0

    def test_spiral_grid_structure(self, spiral_system, spiral_input,
                                   spiral_grid, quad):
        gauss = prior_over_grid(spiral_grid, spiral_system, spiral_input, quad)
        gauss.validate()
        cov = to_numpy(gauss.cov)
        n = len(spiral_grid)
        ts = spiral_grid.points
        radius = 0.04 * np.exp(-0.6 * (ts[:, None] + ts[None, :]))
        assert np.abs(cov[:n, :n] - radius).max() < 1e-6
        assert np.abs(cov[:n, n:]).max() < 1e-8  # decoupled dimensions
        angle_want = np.array(
            [[spiral_closed_cov(t, t2)[1, 1] for t2 in ts] for t in ts]
        )
        assert np.abs(cov[n:, n:] - angle_want).max() < 1e-4

    def test_dimension_major_mean(self, spiral_system, spiral_input,
                                  spiral_grid, quad):
        gauss = prior_over_grid(spiral_grid, spiral_system, spiral_input, quad)
        mean = to_numpy(gauss.mean)
        ts = spiral_grid.points
        assert np.allclose(mean[:25], 1.5 * np.exp(-0.6 * ts), atol=1e-12)
        assert np.allclose(mean[25:], 0.2 * math.pi * ts ** 2, atol=1e-12)

    def test_psd_before_jitter(self, quad):
        rng = np.random.default_rng(33)
        for _ in range(5):
            sys_ = random_system(rng, n=3, m=2, p=2)
            u = random_input(rng, p=2)
            gauss = prior_over_grid(TimeGrid.regular(8, 0.1), sys_, u,
                                    QuadratureConfig(1e-2))
            cov = to_numpy(gauss.cov)
            min_eig = np.linalg.eigvalsh(cov)[0]
            assert min_eig >= -1e-8 * np.trace(cov)

    def test_matches_pairwise_cov(self, quad):
        rng = np.random.default_rng(55)
        sys_ = random_system(rng, n=2, m=2, p=1)
        u = random_input(rng)
        grid = TimeGrid(np.array([0.0, 0.3, 0.7]))
        gauss = prior_over_grid(grid, sys_, u, quad)
        n = len(grid)
        for i, t in enumerate(grid.points):
            for q, t2 in enumerate(grid.points):
                block = to_numpy(prior_cov(float(t), float(t2), sys_, u, quad))
                for j in range(2):
                    for l in range(2):
                        assert to_numpy(gauss.cov)[j * n + i, l * n + q] == \
                            pytest.approx(block[j, l], abs=1e-9)


class TestQuadratureConvergence:
    def test_halving_step_improves_curved_mean(self):
        # the case-study input mean is linear (trapezoid-exact), so the
        # convergence check drives the same system with a curved mean
        sys_ = make_spiral_system()
        p = 1
        slope = 0.4 * math.pi

        def mean_fn(ts):
            ts = np.asarray(ts)
            return (slope * ts + np.sin(2.0 * ts))[:, None]

        base = InputGp.linear_trend_se(slope=slope)
        u = InputGp(p, mean_fn, base.kernel_fn, {"form": "curved"})
        t = 3.0
        # angle mean: 0.2 pi t^2 + (1 - cos 2t) / 2
        want = 0.2 * math.pi * t * t + 0.5 * (1.0 - math.cos(2.0 * t))
        errs = []
        for h in (4e-2, 2e-2, 1e-2):
            got = float(prior_mean(t, sys_, u, QuadratureConfig(h))[1])
            errs.append(abs(got - want))
        assert errs[0] / errs[1] >= 3.0
        assert errs[1] / errs[2] >= 3.0

    def test_halving_step_improves_covariance(self, spiral_system,
                                              spiral_input):
        want = spiral_closed_cov(2.88, 2.88)[1, 1]
        errs = []
        for h in (4.8e-2, 2.4e-2, 1.2e-2):
            got = float(prior_cov(2.88, 2.88, spiral_system, spiral_input,
                                  QuadratureConfig(h))[1, 1])
            errs.append(abs(got - want))
        assert errs[0] / errs[1] >= 3.0
        assert errs[1] / errs[2] >= 3.0


class TestBoundedness:
    def test_metric_norm_of_free_response_non_increasing(self):
        rng = np.random.default_rng(77)
        for _ in range(10):
            sys_ = random_system(rng, n=3, m=2, p=1)
            x0 = to_numpy(sys_.m_x0)
            values = []
            for t in np.linspace(0.0, 100.0, 201):
                x_t = to_numpy(matrix_exp(sys_.a, float(t))) @ x0
                values.append(x_t @ to_numpy(sys_.p_metric) @ x_t)
            values = np.array(values)
            assert np.all(np.isfinite(values))
            assert np.all(np.diff(values) <= 1e-9 * max(values[0], 1.0))

    def test_prior_mean_stays_finite_far_out(self, quad):
        rng = np.random.default_rng(78)
        sys_ = random_system(rng, n=2, m=2, p=1)
        u = InputGp.linear_trend_se(slope=0.0, intercept=0.5)
        for t in (10.0, 50.0, 100.0):
            val = to_numpy(prior_mean(t, sys_, u, QuadratureConfig(5e-2)))
            assert np.all(np.isfinite(val))
