import itertools
import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from gemflow.core.metrics import (
    DensityGrid,
    TransportPlan,
    kde,
    kde_l1,
    mmd2_unbiased,
    ratio_fit_diagnostics,
    subsample,
    wasserstein2_exact,
)
from gemflow.core.net import Network
from gemflow.core.velocity import Kernel
from gemflow.errors import InvalidArgumentError, NumericFault


def brute_force_w2(A, B):
    cost = cdist(A, B, "sqeuclidean")
    n = A.shape[0]
    rows = np.arange(n)
    perms = np.array(list(itertools.permutations(range(n))))
    totals = cost[rows, perms].sum(axis=1)
    # re-sum the near-optimal pairings exactly; 8! = 40320 fsum calls is too slow
    near = perms[totals <= totals.min() + 1e-9 * max(1.0, totals.min())]
    best = min(math.fsum(cost[rows, p]) for p in near)
    return math.sqrt(best / n)


class TestWasserstein:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(56):
            # every size from 1 to 8 seven times
            n = 1 + trial % 8
            A, B = rng.normal(size=(n, 2)), rng.normal(loc=0.5, size=(n, 2))
            w2, plan = wasserstein2_exact(A, B)
            assert w2 == brute_force_w2(A, B)
            assert plan.cost == pytest.approx(n * w2 * w2, rel=1e-12)

    def test_identical_batches(self, rng):
        A = rng.normal(size=(20, 2))
        w2, plan = wasserstein2_exact(A, A.copy())
        assert w2 == 0.0
        np.testing.assert_array_equal(plan.permutation, np.arange(20))

    def test_single_points(self):
        w2, _ = wasserstein2_exact([[0.0, 0.0]], [[3.0, 4.0]])
        assert w2 == pytest.approx(5.0, rel=1e-15)

    def test_overflowing_cost_is_a_numeric_fault(self):
        with pytest.raises(NumericFault):
            wasserstein2_exact([[1e200, 0.0], [0.0, 1.0]], [[0.0, 0.0], [1.0, 0.0]])

    def test_overflowing_sum_is_a_numeric_fault(self):
        # each squared distance is finite, their sum is not
        far = [[1e154, 0.0], [-1e154, 0.0], [0.0, 1e154]]
        with pytest.raises(NumericFault):
            wasserstein2_exact(far, np.zeros((3, 2)))

    def test_permuted_copy_is_at_distance_zero(self, rng):
        A = rng.normal(size=(15, 2))
        order = rng.permutation(15)
        w2, plan = wasserstein2_exact(A, A[order])
        assert w2 == 0.0
        np.testing.assert_array_equal(A[order][plan.permutation], A)

    def test_metric_axioms(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            A, B, C = (rng.normal(loc=rng.normal(size=2), size=(6, 2)) for _ in range(3))
            ab, _ = wasserstein2_exact(A, B)
            ba, _ = wasserstein2_exact(B, A)
            bc, _ = wasserstein2_exact(B, C)
            ac, _ = wasserstein2_exact(A, C)
            assert ab == ba
            assert ac <= ab + bc + 1e-9

    @pytest.mark.parametrize("c", [2.0, 0.5, -4.0])
    def test_scaling(self, c, rng):
        A, B = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
        assert wasserstein2_exact(c * A, c * B)[0] == abs(c) * wasserstein2_exact(A, B)[0]

    def test_unequal_sizes(self):
        with pytest.raises(InvalidArgumentError):
            wasserstein2_exact(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_size_limit(self):
        with pytest.raises(InvalidArgumentError):
            wasserstein2_exact(np.zeros((4097, 2)), np.zeros((4097, 2)))

    def test_plan_must_be_a_permutation(self):
        with pytest.raises(InvalidArgumentError):
            TransportPlan([0, 0, 2], 1.0)


class TestMMD:
    def test_two_point_masses(self):
        kernel = Kernel(1.0)
        a, b = np.array([0.0, 0.0]), np.array([1.0, 1.0])
        value = mmd2_unbiased(np.array([a, a]), np.array([b, b]), kernel)
        assert value == pytest.approx(2.0 - 2.0 * kernel(a, b), rel=1e-14)

    def test_symmetric_and_translation_invariant(self, rng):
        kernel = Kernel(0.8)
        A, B = rng.normal(size=(12, 2)), rng.normal(loc=1.0, size=(9, 2))
        value = mmd2_unbiased(A, B, kernel)
        assert mmd2_unbiased(B, A, kernel) == pytest.approx(value, rel=1e-12)
        assert mmd2_unbiased(A + 5.0, B + 5.0, kernel) == pytest.approx(value, rel=1e-9)

    def test_separates_shifted_gaussians(self):
        rng = np.random.default_rng(2)
        kernel = Kernel(1.0)
        same = mmd2_unbiased(rng.normal(size=(2000, 1)), rng.normal(size=(2000, 1)), kernel)
        apart = mmd2_unbiased(rng.normal(size=(2000, 1)), rng.normal(loc=3.0, size=(2000, 1)), kernel)
        # population value 2 (1 - exp(-3/2)) / sqrt(3)
        assert abs(same) < 0.02
        assert apart == pytest.approx(2.0 * (1.0 - np.exp(-1.5)) / np.sqrt(3.0), abs=0.05)

    def test_batch_size(self):
        with pytest.raises(InvalidArgumentError):
            mmd2_unbiased(np.zeros((1, 2)), np.zeros((5, 2)), Kernel(1.0))


class TestSubsample:
    def test_small_batches_pass_through(self, random_batch, rng):
        assert subsample(random_batch, 10, rng) is random_batch

    def test_rows_are_distinct_and_ordered(self, rng):
        points = np.arange(200, dtype=np.float64).reshape(100, 2)
        picked = subsample(points, 30, rng)
        assert picked.shape == (30, 2)
        assert np.all(np.diff(picked[:, 0]) > 0)


class TestDensityGrid:
    def test_covering_box(self):
        grid = DensityGrid.covering([[0.0, 0.0], [2.0, 1.0]], resolution=(4, 3), margin=0.1)
        assert grid.x_range == pytest.approx((-0.1, 2.1))
        assert grid.y_range == pytest.approx((-0.05, 1.05))
        assert grid.values.shape == (3, 4)

    def test_cell_centres(self):
        grid = DensityGrid((0.0, 1.0), (0.0, 2.0), (2, 4))
        np.testing.assert_allclose(grid.x_centers, [0.25, 0.75])
        np.testing.assert_allclose(grid.y_centers, [0.25, 0.75, 1.25, 1.75])
        assert grid.cell_area == pytest.approx(0.25)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"x_range": (1.0, 0.0), "y_range": (0.0, 1.0), "resolution": (2, 2)},
            {"x_range": (0.0, 1.0), "y_range": (0.0, 1.0), "resolution": (0, 2)},
            {"x_range": (0.0, 1.0), "y_range": (0.0, 1.0), "resolution": (2, 3), "values": np.ones((2, 3))},
            {"x_range": (0.0, 1.0), "y_range": (0.0, 1.0), "resolution": (1, 1), "values": [[-1.0]]},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            DensityGrid(**kwargs)


class TestKDE:
    def test_normalized_and_nonnegative(self, rng):
        points = rng.normal(size=(500, 2))
        density = kde(points, DensityGrid.covering(points, resolution=50))
        assert np.all(density.values >= 0)
        assert density.total_mass() == pytest.approx(1.0, abs=1e-6)

    def test_single_point_bump(self):
        grid = DensityGrid((-1.0, 1.0), (-1.0, 1.0), (21, 21))
        density = kde([[0.0, 0.0]], grid, bandwidth=0.3)
        values = density.values
        assert np.unravel_index(np.argmax(values), values.shape) == (10, 10)
        np.testing.assert_allclose(values, values.T, rtol=1e-12)
        np.testing.assert_allclose(values, values[::-1, ::-1], rtol=1e-9)

    def test_single_point_auto_bandwidth(self):
        grid = DensityGrid((-1.0, 1.0), (-1.0, 1.0), (10, 10))
        assert kde([[0.1, 0.1]], grid).total_mass() == pytest.approx(1.0)

    def test_two_equal_peaks(self):
        grid = DensityGrid((-2.0, 2.0), (-1.0, 1.0), (40, 20))
        values = kde([[-1.0, 0.0], [1.0, 0.0]], grid, bandwidth=0.2).values
        left, right = values[:, :20].max(), values[:, 20:].max()
        assert left == pytest.approx(right, rel=0.01)

    def test_uniform_square(self):
        rng = np.random.default_rng(3)
        points = rng.uniform(0.0, 1.0, size=(100_000, 2))
        grid = DensityGrid((-0.2, 1.2), (-0.2, 1.2), (28, 28))
        density = kde(points, grid)
        inner_x = (grid.x_centers > 0.2) & (grid.x_centers < 0.8)
        inner_y = (grid.y_centers > 0.2) & (grid.y_centers < 0.8)
        np.testing.assert_allclose(density.values[np.ix_(inner_y, inner_x)], 1.0, rtol=0.1)

    def test_chunks_agree(self, rng, monkeypatch):
        import gemflow.core.metrics as metrics

        points = rng.normal(size=(50, 2))
        grid = DensityGrid.covering(points, resolution=16)
        whole = kde(points, grid).values
        monkeypatch.setattr(metrics, "KDE_CHUNK_ROWS", 7)
        np.testing.assert_allclose(kde(points, grid).values, whole, rtol=1e-12)

    def test_no_mass_on_grid(self):
        grid = DensityGrid((0.0, 1.0), (0.0, 1.0), (5, 5))
        with pytest.raises(InvalidArgumentError):
            kde([[1e4, 1e4]], grid, bandwidth=0.01)

    def test_bandwidth_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            kde([[0.0, 0.0]], DensityGrid((-1.0, 1.0), (-1.0, 1.0), (4, 4)), bandwidth=0.0)

    def test_l1(self):
        grid = DensityGrid((-3.0, 3.0), (-1.0, 1.0), (60, 20))
        left = kde([[-2.0, 0.0]], grid, bandwidth=0.1)
        right = kde([[2.0, 0.0]], grid, bandwidth=0.1)
        assert kde_l1(left, left) == 0.0
        assert kde_l1(left, right) == pytest.approx(2.0, abs=1e-6)
        with pytest.raises(InvalidArgumentError):
            kde_l1(left, DensityGrid((-3.0, 3.0), (-1.0, 1.0), (30, 20)))


class TestRatioFitDiagnostics:
    def test_unit_network(self, random_batch):
        net = Network((2, 1), [np.zeros((1, 2))], [np.array([1.0])])
        assert ratio_fit_diagnostics(net, random_batch, random_batch) == (-1.0, 0.0)

    def test_zero_network(self, random_batch):
        net = Network((2, 1), [np.zeros((1, 2))], [np.zeros(1)])
        assert ratio_fit_diagnostics(net, random_batch, random_batch) == (0.0, 0.0)

    def test_linear_network_gradient_norm(self, random_batch):
        net = Network((2, 1), [np.array([[3.0, -4.0]])], [np.zeros(1)])
        _, grad_norm = ratio_fit_diagnostics(net, random_batch, random_batch)
        assert grad_norm == 5.0
