import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from saconvnet.climate import (
    DEFAULT_LAT,
    DEFAULT_LON,
    DailyGridSeries,
    build_dataset,
    calendar_keys,
    chronological_split,
    climatology,
    label_extremes,
    percentile,
    regional_mean,
    synth_generate,
    synthetic_dataset,
    zscore_anomalies,
)
from saconvnet.errors import InputError


def sorted_interp_oracle(x, m):
    """Sort by repeated minimum extraction, then interpolate at m*(n-1)."""
    rest, ordered = list(x), []
    while rest:
        i = min(range(len(rest)), key=rest.__getitem__)
        ordered.append(rest.pop(i))
    k = m * (len(ordered) - 1)
    lo, hi = math.floor(k), math.ceil(k)
    if lo == hi:
        return ordered[lo]
    return ordered[lo] * (hi - k) + ordered[hi] * (k - lo)


def series(values, start="2001-01-01", lat=(0.0,), lon=(0.0,)):
    data = np.asarray(values, dtype=float).reshape(len(values), len(lat), len(lon))
    dates = np.datetime64(start) + np.arange(len(values))
    return DailyGridSeries(dates, data, lat, lon)


class TestPercentile:
    def test_single_element(self):
        assert all(percentile([42.0], m) == 42.0 for m in (0, 0.3, 0.95, 1))

    def test_exact_index(self):
        assert percentile([3.0, 1.0, 2.0], 0.5) == 2.0

    def test_worked_trace(self):
        assert sorted_interp_oracle([10, 20, 30, 40, 50], 0.95) == pytest.approx(48.0, abs=1e-12)
        assert percentile([50, 10, 40, 30, 20], 0.95) == pytest.approx(48.0, abs=1e-12)

    @pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan")])
    def test_m_out_of_range(self, bad):
        with pytest.raises(InputError):
            percentile([1.0, 2.0], bad)

    def test_empty(self):
        with pytest.raises(InputError):
            percentile([], 0.5)

    def test_matches_oracle(self, rng):
        for _ in range(200):
            x = rng.standard_normal(int(rng.integers(1, 60))) * 10
            for m in (0, 0.25, 0.5, 0.91, 0.95, 1):
                assert abs(percentile(x, m) - sorted_interp_oracle(x.tolist(), m)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50),
        st.floats(0, 1),
        st.floats(0, 1),
    )
    @example(x=[0.0, -201.75, -201.75], m1=0.0, m2=0.05)  # equal neighbours must interpolate exactly
    def test_monotone_in_m(self, x, m1, m2):
        lo, hi = sorted((m1, m2))
        assert percentile(x, lo) <= percentile(x, hi)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_endpoints(self, x):
        assert percentile(x, 0) == min(x)
        assert percentile(x, 1) == max(x)


class TestRegionalMean:
    def test_uniform(self):
        s = series(np.full((3, 2, 2), 7.0), lat=(1.0, 2.0), lon=(5.0, 6.0))
        np.testing.assert_array_equal(regional_mean(s, (0, 3), (0, 10)), [7.0] * 3)

    def test_single_cell(self, rng):
        vals = rng.standard_normal((4, 2, 2))
        s = series(vals, lat=(1.0, 2.0), lon=(5.0, 6.0))
        np.testing.assert_array_equal(regional_mean(s, (2, 2), (5, 5)), vals[:, 1, 0])

    def test_two_by_two(self):
        s = series([[[1.0, 2.0], [3.0, 4.0]]], lat=(1.0, 2.0), lon=(5.0, 6.0))
        assert regional_mean(s, (1, 2), (5, 6))[0] == 2.5

    def test_empty_box(self):
        s = series([[[1.0]]])
        with pytest.raises(InputError):
            regional_mean(s, (10, 20), (10, 20))


class TestLabels:
    def test_constant_series(self):
        labels, thr = label_extremes([3.0] * 20, 0.95)
        assert thr == 3.0 and labels.sum() == 0

    def test_one_to_hundred(self):
        labels, thr = label_extremes(np.arange(1, 101, dtype=float), 0.95)
        assert thr == pytest.approx(sorted_interp_oracle(range(1, 101), 0.95), abs=1e-12)
        assert thr == pytest.approx(95.05, abs=1e-12)
        assert np.flatnonzero(labels).tolist() == list(range(95, 100))

    def test_m_zero(self):
        x = np.array([2.0, 1.0, 1.0, 5.0])
        labels, thr = label_extremes(x, 0.0)
        assert thr == 1.0 and labels.tolist() == [1, 0, 0, 1]

    def test_m_one_has_no_positives(self, rng):
        labels, _ = label_extremes(rng.standard_normal(100), 1.0)
        assert labels.sum() == 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=80), st.floats(0, 1), st.floats(0, 1))
    def test_positive_count_non_increasing(self, x, m1, m2):
        lo, hi = sorted((m1, m2))
        assert label_extremes(x, lo)[0].sum() >= label_extremes(x, hi)[0].sum()

    def test_p95_fraction(self, rng):
        labels, _ = label_extremes(rng.gamma(0.8, 3.0, 1000), 0.95)
        assert labels.sum() <= 50 + 1


class TestCalendar:
    def test_feb29_folds_onto_feb28(self):
        keys = calendar_keys(["2000-02-28", "2000-02-29", "2000-03-01", "2001-02-28", "2001-03-01"])
        assert keys.tolist() == [59, 59, 61, 59, 61]

    def test_year_ends(self):
        assert calendar_keys(["2001-01-01", "2001-12-31", "2004-12-31"]).tolist() == [1, 366, 366]


class TestClimatology:
    def test_identical_years(self, rng):
        field = rng.standard_normal((365, 2, 3))
        d1 = np.datetime64("2001-01-01") + np.arange(365)
        d2 = np.datetime64("2002-01-01") + np.arange(365)
        s = DailyGridSeries(np.concatenate([d1, d2]), np.concatenate([field, field]), [0.0, 1.0], [0.0, 1.0, 2.0])
        clim = climatology(s)
        mu, sd = clim.lookup(calendar_keys(d1))
        np.testing.assert_allclose(mu, field, atol=1e-15)
        assert np.all(sd == 0)

    def test_population_sd(self):
        s = DailyGridSeries(["2001-07-04", "2002-07-04"], np.array([1.0, 3.0]).reshape(2, 1, 1), [0.0], [0.0])
        mu, sd = climatology(s).lookup(calendar_keys(["2001-07-04"]))
        assert mu.item() == 2.0 and sd.item() == 1.0

    def test_feb29_pooled_with_feb28(self):
        dates = ["2000-02-28", "2000-02-29", "2001-02-28"]
        s = DailyGridSeries(dates, np.array([1.0, 2.0, 6.0]).reshape(3, 1, 1), [0.0], [0.0])
        clim = climatology(s)
        mu, sd = clim.lookup(calendar_keys(dates))
        assert mu.ravel().tolist() == [3.0] * 3
        assert sd.ravel()[0] == pytest.approx(math.sqrt(((1 - 3) ** 2 + (2 - 3) ** 2 + (6 - 3) ** 2) / 3))
        assert clim.count[59] == clim.count[58] == 3

    def test_window_pools_neighbours(self):
        dates = np.datetime64("2001-06-01") + np.arange(5)
        s = DailyGridSeries(dates, np.arange(5.0).reshape(5, 1, 1), [0.0], [0.0])
        mu, _ = climatology(s, window=2).lookup(calendar_keys(dates[2:3]))
        assert mu.item() == 2.0


class TestZscore:
    def _clim_series(self, rng):
        dates = np.concatenate([np.datetime64(f"{y}-01-01") + np.arange(30) for y in (2001, 2002, 2003)])
        return DailyGridSeries(dates, rng.standard_normal((90, 2, 2)) * 3 + 5, [0.0, 1.0], [0.0, 1.0])

    def test_mean_field_maps_to_zero(self, rng):
        s = self._clim_series(rng)
        clim = climatology(s)
        mu, _ = clim.lookup(calendar_keys(s.dates))
        z = zscore_anomalies(DailyGridSeries(s.dates, mu, s.lat, s.lon), clim)
        assert np.all(z.data == 0.0)

    def test_direct_substitution(self):
        # {1, 5} on one calendar day: mu 3, sd 2, so X=5 gives z=1
        s =DailyGridSeries(["2001-03-03", "2002-03-03"], np.array([1.0, 5.0]).reshape(2, 1, 1), [0.0], [0.0])
        z = zscore_anomalies(s, climatology(s))
        assert z.data.ravel().tolist() == [-1.0, 1.0]

    def test_flat_cells_are_zero(self):
        s = DailyGridSeries(["2001-03-03", "2002-03-03"], np.array([[4.0, 1.0], [4.0, 3.0]]).reshape(2, 1, 2), [0.0], [0.0, 1.0])
        z = zscore_anomalies(s, climatology(s))
        assert z.data[:, 0, 0].tolist() == [0.0, 0.0]
        assert z.data[:, 0, 1].tolist() == [-1.0, 1.0]

    def test_matches_loop_oracle(self, rng):
        s = self._clim_series(rng)
        z = zscore_anomalies(s, climatology(s)).data
        keys = calendar_keys(s.dates)
        for t in range(0, 90, 7):
            for i in range(2):
                for j in range(2):
                    pool = [s.data[u, i, j] for u in range(90) if keys[u] == keys[t]]
                    mu = sum(pool) / len(pool)
                    sd = math.sqrt(sum((p - mu) ** 2 for p in pool) / len(pool))
                    assert z[t, i, j] == pytest.approx((s.data[t, i, j] - mu) / sd, abs=1e-12)


class TestDataset:
    def _anoms(self, n, rng):
        dates = np.datetime64("2001-01-01") + np.arange(n)
        return [DailyGridSeries(dates, rng.standard_normal((n, 3, 4)), [0, 1, 2.0], [0, 1, 2, 3.0], v) for v in ("slp", "gph")]

    def test_split_100(self, rng):
        anoms = self._anoms(100, rng)
        ds = build_dataset(anoms, anoms[0].dates, np.zeros(100, int))
        assert ds.n_train == 80 and len(ds.test[1]) == 20
        assert ds.dates[: ds.n_train].max() < ds.dates[ds.n_train :].min()
        assert ds.x.shape == (100, 3, 4, 2)
        np.testing.assert_array_equal(ds.x[..., 1], anoms[1].data)

    def test_all_negative_is_valid(self, rng):
        anoms = self._anoms(10, rng)
        ds = build_dataset(anoms, anoms[0].dates, np.zeros(10, int))
        assert ds.class_counts()["all"] == {0: 10, 1: 0}

    def test_misaligned_dates(self, rng):
        anoms = self._anoms(10, rng)
        with pytest.raises(InputError):
            build_dataset(anoms, anoms[0].dates + 1, np.zeros(10, int))

    @pytest.mark.parametrize("n", [1, 5, 37, 1000])
    def test_split_arithmetic(self, n):
        assert chronological_split(n) == math.floor(0.8 * n)


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_generate(3, 60, 2.0), synth_generate(3, 60, 2.0)
        assert np.array_equal(a.slp.data, b.slp.data) and np.array_equal(a.gph.data, b.gph.data)
        assert np.array_equal(a.precip, b.precip) and np.array_equal(a.extreme, b.extreme)

    def test_seed_matters(self):
        assert not np.array_equal(synth_generate(1, 60, 2.0).slp.data, synth_generate(2, 60, 2.0).slp.data)

    def test_minimum_length(self):
        with pytest.raises(InputError):
            synth_generate(0, 39, 1.0)

    def test_default_grid(self):
        syn = synth_generate(0, 40, 1.0)
        assert syn.slp.grid_shape == (15, 35)
        np.testing.assert_array_equal(syn.slp.lat, DEFAULT_LAT)
        np.testing.assert_array_equal(syn.slp.lon, DEFAULT_LON)

    def test_p95_gives_about_fifty_positives(self):
        ds = synthetic_dataset(0, 1000, 2.0)
        assert 45 <= ds.y.sum() <= 51

    def test_planted_pattern_separates_classes(self):
        ds = synthetic_dataset(0, 400, 3.0)
        diff = ds.x[ds.y == 1].mean(0) - ds.x[ds.y == 0].mean(0)
        assert np.abs(diff).max() > 1.0
