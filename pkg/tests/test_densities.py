import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import UNIT2, UNIT4, density, density_pairs, mass_vectors
from sieverates.densities import (
    DensityError,
    Grid,
    GridDensity,
    cell_index,
    cesaro_average,
    divergences,
    evaluate,
    mixture,
    normalize,
    sample,
)


def direct_divergences(p, q):
    """Loop-by-cell reference used as an independent oracle."""
    aff = sum(math.sqrt(a * b) for a, b in zip(p, q))
    kl = v = 0.0
    for a, b in zip(p, q):
        if a == 0:
            continue
        if b == 0:
            return math.inf, math.inf, 1 - aff
        r = math.log(a) - math.log(b)
        kl += a * r
        v += a * r * r
    return kl, v, 1 - aff


class TestGrid:
    def test_width_and_edges(self):
        g = Grid(-1.0, 3.0, 4)
        assert g.width == 1.0
        assert g.edges.tolist() == [-1.0, 0.0, 1.0, 2.0, 3.0]

    @pytest.mark.parametrize("lo,hi,bins", [(1.0, 1.0, 2), (2.0, 1.0, 2), (0.0, 1.0, 0), (0.0, math.inf, 2)])
    def test_rejects_bad_grids(self, lo, hi, bins):
        with pytest.raises(DensityError):
            Grid(lo, hi, bins)


class TestNormalize:
    def test_uniform(self):
        assert normalize([1, 1, 1, 1], UNIT4).mass.tolist() == [0.25] * 4

    def test_symmetric(self):
        assert normalize([2, 0, 0, 2], UNIT4).mass.tolist() == [0.5, 0, 0, 0.5]

    def test_hand_value(self):
        assert normalize([1, 3], UNIT2).mass.tolist() == [0.25, 0.75]

    @pytest.mark.parametrize("raw", [[0, 0], [1, -1], [1, 2, 3], [1, math.nan]])
    def test_rejects(self, raw):
        with pytest.raises(DensityError):
            normalize(raw, UNIT2)

    @given(mass_vectors())
    def test_sums_to_one(self, f):
        assert abs(f.mass.sum() - 1) <= 1e-12


class TestGridDensity:
    def test_mass_is_read_only(self):
        f = density(0.25, 0.75)
        with pytest.raises(ValueError):
            f.mass[0] = 1.0

    def test_rejects_unnormalized(self):
        with pytest.raises(DensityError):
            GridDensity(UNIT2, np.array([0.5, 0.6]))

    def test_equality_by_value(self):
        assert density(0.25, 0.75) == density(0.25, 0.75)
        assert density(0.25, 0.75) != density(0.75, 0.25)


class TestEvaluate:
    def test_uniform(self):
        assert evaluate(density(0.25, 0.25, 0.25, 0.25), 0.3) == 1.0

    def test_hand_value(self):
        assert evaluate(density(0.25, 0.75), 0.7) == 1.5

    def test_right_endpoint_in_last_cell(self):
        assert evaluate(density(0.25, 0.75), 1.0) == 1.5
        assert cell_index(UNIT4, 1.0) == 3

    def test_left_endpoint_and_boundaries(self):
        assert cell_index(UNIT4, 0.0) == 0
        assert cell_index(UNIT4, 0.5) == 2

    @pytest.mark.parametrize("y", [-1e-9, 1.0 + 1e-9, math.nan])
    def test_outside_domain(self, y):
        with pytest.raises(DensityError):
            evaluate(density(0.25, 0.75), y)

    def test_vectorized(self):
        out = evaluate(density(0.25, 0.75), np.array([0.1, 0.6, 1.0]))
        assert out.tolist() == [0.5, 1.5, 1.5]

    def test_wider_domain_scales_by_width(self):
        f = GridDensity(Grid(0.0, 4.0, 2), np.array([0.25, 0.75]))
        assert evaluate(f, 3.0) == pytest.approx(0.375)


class TestSample:
    def test_uniform_frequencies(self):
        f = density(0.25, 0.25, 0.25, 0.25)
        n = 100_000
        ys = sample(f, np.random.default_rng(1), n)
        freq = np.bincount(cell_index(UNIT4, ys), minlength=4) / n
        assert np.all(np.abs(freq - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / n))

    def test_support_restriction(self):
        ys = sample(density(1.0, 0.0), np.random.default_rng(2), 10_000)
        assert np.all((ys >= 0) & (ys < 0.5))

    def test_deterministic(self):
        f = density(0.1, 0.2, 0.3, 0.4)
        a = sample(f, np.random.default_rng(7), 5)
        b = sample(f, np.random.default_rng(7), 5)
        assert np.array_equal(a, b)

    def test_rejects_nonpositive_count(self):
        with pytest.raises(DensityError):
            sample(density(0.5, 0.5), np.random.default_rng(0), 0)

    @settings(max_examples=25, deadline=None)
    @given(mass_vectors(min_bins=2), st.integers(0, 2**32 - 1))
    def test_round_trip(self, f, seed):
        n = 100_000
        ys = sample(f, np.random.default_rng(seed), n)
        assert np.all((ys >= f.grid.lo) & (ys <= f.grid.hi))
        cells = cell_index(f.grid, ys)
        assert np.all(f.mass[cells] > 0)
        freq = np.bincount(cells, minlength=f.grid.bins) / n
        se = np.sqrt(f.mass * (1 - f.mass) / n)
        assert np.all(np.abs(freq - f.mass) <= 4 * se + 1e-12)


class TestDivergences:
    def test_identical(self):
        d = divergences(density(0.3, 0.7), density(0.3, 0.7))
        assert (d.kl, d.v, d.h, d.affinity) == (0.0, 0.0, 0.0, 1.0)

    def test_hand_values(self):
        d = divergences(density(0.5, 0.5), density(0.25, 0.75))
        kl = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        h = 1 - (math.sqrt(0.125) + math.sqrt(0.375))
        assert d.kl == pytest.approx(kl, abs=1e-15)
        assert d.kl == pytest.approx(0.143841, abs=1e-6)
        assert d.h == pytest.approx(h, abs=1e-15)
        assert d.h == pytest.approx(0.034074, abs=1e-6)
        v = 0.5 * math.log(2) ** 2 + 0.5 * math.log(2 / 3) ** 2
        assert d.v == pytest.approx(v, abs=1e-15)

    def test_disjoint(self):
        d = divergences(density(1.0, 0.0), density(0.0, 1.0))
        assert d.kl == math.inf and d.v == math.inf
        assert d.h == 1.0 and d.affinity == 0.0

    def test_zero_cell_in_truth_is_skipped(self):
        d = divergences(density(0.0, 1.0), density(0.5, 0.5))
        assert d.kl == pytest.approx(math.log(2))

    def test_grid_mismatch(self):
        with pytest.raises(DensityError):
            divergences(density(0.5, 0.5), GridDensity(Grid(0.0, 2.0, 2), np.array([0.5, 0.5])))

    @given(density_pairs())
    def test_matches_direct_oracle(self, pq):
        p, q = pq
        d = divergences(p, q)
        kl, v, h = direct_divergences(p.mass, q.mass)
        if math.isinf(kl):
            assert d.kl == math.inf and d.v == math.inf
        else:
            assert d.kl == pytest.approx(kl, rel=1e-9, abs=1e-12)
            assert d.v == pytest.approx(v, rel=1e-9, abs=1e-12)
        assert d.h == pytest.approx(h, abs=1e-12)

    @given(density_pairs())
    def test_invariants(self, pq):
        p, q = pq
        d = divergences(p, q)
        assert 0.0 <= d.h <= 1.0
        assert d.affinity == 1.0 - d.h
        assert d.kl >= 0.0
        if np.array_equal(p.mass, q.mass):
            assert d.kl == 0.0
        assert 2 * d.h <= 2.0

    @given(density_pairs())
    def test_hellinger_symmetric(self, pq):
        p, q = pq
        assert divergences(p, q).h == pytest.approx(divergences(q, p).h, abs=1e-15)

    @given(density_pairs())
    def test_distinct_vectors_have_positive_kl(self, pq):
        p, q = pq
        if np.max(np.abs(p.mass - q.mass)) < 1e-6:
            return
        assert divergences(p, q).kl > 0


class TestMixtures:
    def test_single(self):
        f = density(0.2, 0.8)
        assert mixture([f], [1.0]) == f

    def test_uniform_fixed_point(self):
        u = density(0.5, 0.5)
        assert np.allclose(mixture([u, u], [0.3, 0.7]).mass, [0.5, 0.5], atol=1e-15)

    def test_hand_value(self):
        m = mixture([density(1.0, 0.0), density(0.0, 1.0)], [0.4, 0.6])
        assert np.allclose(m.mass, [0.4, 0.6], atol=1e-15)

    def test_rejects_bad_weights(self):
        with pytest.raises(DensityError):
            mixture([density(0.5, 0.5), density(0.2, 0.8)], [0.5, 0.6])
        with pytest.raises(DensityError):
            mixture([], [])

    def test_rejects_grid_mismatch(self):
        with pytest.raises(DensityError):
            mixture([density(0.5, 0.5), density(0.2, 0.3, 0.5)], [0.5, 0.5])

    def test_cesaro_single(self):
        f = density(0.1, 0.9)
        assert cesaro_average([f]) == f

    def test_cesaro_symmetric(self):
        m = cesaro_average([density(1.0, 0.0), density(0.0, 1.0)])
        assert m.mass.tolist() == [0.5, 0.5]

    def test_cesaro_hand_value(self):
        m = cesaro_average([density(0.5, 0.5), density(0.25, 0.75), density(0.25, 0.75)])
        assert np.allclose(m.mass, [1 / 3, 2 / 3], atol=1e-15)

    def test_cesaro_empty(self):
        with pytest.raises(DensityError):
            cesaro_average([])

    @settings(max_examples=50)
    @given(st.integers(1, 5).flatmap(lambda b: st.tuples(
        mass_vectors(bins=b), st.lists(mass_vectors(bins=b, allow_zeros=False), min_size=1, max_size=8))))
    def test_kl_convexity(self, case):
        fstar, fs = case
        avg = np.mean([divergences(fstar, f).kl for f in fs])
        assert divergences(fstar, cesaro_average(fs)).kl <= avg + 1e-10

    @settings(max_examples=50)
    @given(st.integers(1, 5).flatmap(lambda b: st.lists(mass_vectors(bins=b), min_size=1, max_size=6)))
    def test_mixture_stays_normalized(self, fs):
        w = np.full(len(fs), 1 / len(fs))
        assert abs(mixture(fs, w).mass.sum() - 1) <= 1e-12
