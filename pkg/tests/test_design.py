import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nodeoed.autodiff import ContractError
from nodeoed.design import (
    AdmissibleSpace,
    DesignVector,
    endpoint_split,
    init_by_variance,
    init_random,
    init_uniform,
    project_to_box,
    round_to_grid,
)


class TestInitByVariance:
    def test_identical_samples_tie_break(self):
        out = np.ones((4, 3, 3))
        d = init_by_variance(out, 4)
        np.testing.assert_array_equal(d.locations, [[0, 0], [0, 1], [0, 2], [1, 0]])

    def test_single_varying_location(self):
        out = np.zeros((2, 4, 4))
        out[1, 2, 3] = 1.0
        np.testing.assert_array_equal(init_by_variance(out, 1).locations, [[2, 3]])

    def test_brute_force_5x5(self):
        rng = np.random.default_rng(0)
        out = rng.standard_normal((100, 5, 5)) * rng.random((5, 5))
        var = np.array([[np.sum((out[:, i, j] - out[:, i, j].mean()) ** 2) / 99 for j in range(5)] for i in range(5)])
        order = sorted(((-var[i, j], i * 5 + j) for i in range(5) for j in range(5)))[:3]
        expected = [[k // 5, k % 5] for _, k in order]
        np.testing.assert_array_equal(init_by_variance(out, 3).locations, expected)

    def test_brute_force_28x28(self):
        rng = np.random.default_rng(1)
        out = rng.random((1000, 28, 28)) * np.linspace(0, 1, 784).reshape(28, 28)
        var = out.reshape(1000, -1).var(axis=0, ddof=1)
        top = sorted(range(784), key=lambda k: (-var[k], k))[:50]
        got = init_by_variance(out, 50).locations
        np.testing.assert_array_equal(got[:, 0] * 28 + got[:, 1], top)

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            init_by_variance(np.ones((1, 3, 3)), 1)

    def test_one_dimensional_grid(self):
        out = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.5]])
        d = init_by_variance(out, 2)
        np.testing.assert_array_equal(d.locations.ravel(), [1.0, 2.0])


class TestInitUniform:
    def test_ten_angles(self):
        d = init_uniform(AdmissibleSpace.angles(), 10, math.pi)
        np.testing.assert_allclose(d.locations.ravel(), np.arange(1, 11) * math.pi / 10)

    def test_forty_five_angles(self):
        d = init_uniform(AdmissibleSpace.angles(), 45, math.pi / 6).locations.ravel()
        assert d.size == 45
        assert np.all((d > 0) & (d <= math.pi / 6 + 1e-15))
        np.testing.assert_allclose(np.diff(d), math.pi / 270)

    def test_five_angles(self):
        d = init_uniform(AdmissibleSpace.angles(), 5, math.pi)
        np.testing.assert_allclose(d.locations.ravel(), [n * math.pi / 5 for n in range(1, 6)])


class TestProjection:
    def test_clamp(self):
        d = DesignVector([1.3, -0.2, 0.4], AdmissibleSpace.unit_interval())
        np.testing.assert_array_equal(project_to_box(d).locations.ravel(), [1.0, 0.0, 0.4])

    def test_interior_unchanged(self):
        d = DesignVector([0.25, 0.75], AdmissibleSpace.unit_interval())
        np.testing.assert_array_equal(project_to_box(d).locations, d.locations)

    def test_periodic_wrap(self):
        d = DesignVector([2.2 * math.pi, -0.1], AdmissibleSpace.angles())
        np.testing.assert_allclose(project_to_box(d).locations.ravel(), [0.2 * math.pi, math.pi - 0.1])

    def test_pixel_box(self):
        d = DesignVector([[-1.0, 30.0]], AdmissibleSpace.pixel_grid(28, 28))
        np.testing.assert_array_equal(project_to_box(d).locations, [[0.0, 27.0]])

    @given(arrays(np.float64, 6, elements=st.floats(-20, 20)))
    def test_idempotent(self, x):
        for space in (AdmissibleSpace.unit_interval(), AdmissibleSpace.angles()):
            once = project_to_box(DesignVector(x, space))
            twice = project_to_box(once)
            np.testing.assert_array_equal(once.locations, twice.locations)
            assert once.budget == 6
            assert np.all(once.locations >= space.lo[0]) and np.all(once.locations <= space.hi[0])

    def test_locations_read_only(self):
        d = DesignVector([0.1, 0.2], AdmissibleSpace.unit_interval())
        with pytest.raises(ValueError):
            d.locations[0, 0] = 0.5


class TestRounding:
    space = AdmissibleSpace.pixel_grid(28, 28)

    def test_nearest(self):
        np.testing.assert_array_equal(round_to_grid(DesignVector([[13.4, 7.6]], self.space)).locations, [[13, 8]])

    def test_on_node(self):
        np.testing.assert_array_equal(round_to_grid(DesignVector([[4.0, 9.0]], self.space)).locations, [[4, 9]])

    def test_half_up(self):
        np.testing.assert_array_equal(round_to_grid(DesignVector([[2.5, 2.5]], self.space)).locations, [[3, 3]])

    def test_duplicates_reported(self):
        r = round_to_grid(DesignVector([[1.2, 1.1], [0.9, 1.4], [5.0, 5.0]], self.space))
        assert r.budget == 3
        assert r.meta["duplicates"] == 1

    def test_needs_grid(self):
        with pytest.raises(ContractError):
            round_to_grid(DesignVector([0.3], AdmissibleSpace.unit_interval()))

    @settings(max_examples=50)
    @given(arrays(np.float64, (5, 2), elements=st.floats(0, 27)))
    def test_idempotent(self, x):
        once = round_to_grid(DesignVector(x, self.space))
        np.testing.assert_array_equal(round_to_grid(once).locations, once.locations)


class TestEndpointSplit:
    def test_all_zero(self):
        s = endpoint_split(DesignVector(np.zeros(4), AdmissibleSpace.unit_interval()))
        assert (s.k0, s.k1, s.max_boundary_distance) == (4, 0, 0.0)

    def test_counts(self):
        s = endpoint_split(DesignVector([0.01, 0.99, 0.98], AdmissibleSpace.unit_interval()))
        assert (s.k0, s.k1) == (1, 2)
        assert abs(s.max_boundary_distance - 0.02) < 1e-12
        assert s.converged

    def test_not_converged(self):
        assert not endpoint_split(np.array([0.0, 0.3, 1.0])).converged


class TestSpaces:
    def test_round_trip(self):
        for space in (AdmissibleSpace.unit_interval(), AdmissibleSpace.pixel_grid(4, 5), AdmissibleSpace.angles()):
            assert AdmissibleSpace.from_dict(space.to_dict()) == space

    def test_random_integer_draws_distinct(self):
        d = init_random(AdmissibleSpace.pixel_grid(28, 28), 50, np.random.default_rng(0), integer=True)
        assert len({tuple(r) for r in d.locations}) == 50
        assert np.all(d.locations == np.round(d.locations))

    def test_budget_shape_checked(self):
        with pytest.raises(ContractError):
            DesignVector(np.zeros((3, 2)), AdmissibleSpace.unit_interval())
