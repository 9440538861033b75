import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiforecast.data import (
    EpidemicSeries,
    NormStats,
    SplitSpec,
    denormalize,
    load_csv,
    make_windows,
    normalize,
)
from epiforecast.errors import ConfigError, DataError


def write(tmp_path, text, name="series.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def toy_series(counts):
    counts = np.asarray(counts, dtype=float)
    return EpidemicSeries(
        regions=[f"r{i}" for i in range(counts.shape[0])],
        times=list(range(counts.shape[1])),
        counts=counts,
    )


class TestLoadCsv:
    def test_minimal_file(self, tmp_path):
        s = load_csv(write(tmp_path, "r1\n5\n"))
        assert s.regions == ["r1"]
        assert s.counts.shape == (1, 1)
        assert s.counts[0, 0] == 5.0

    def test_regions_are_columns_time_is_rows(self, tmp_path):
        s = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"))
        assert s.regions == ["a", "b"]
        assert s.counts.shape == (2, 3)
        np.testing.assert_array_equal(s.counts, [[1, 3, 5], [2, 4, 6]])
        assert s.times == [0, 1, 2]

    def test_ragged_row_reports_row_number(self, tmp_path):
        with pytest.raises(DataError, match="row 3"):
            load_csv(write(tmp_path, "a,b\n1,2\n1\n"))

    def test_non_numeric_cell(self, tmp_path):
        with pytest.raises(DataError, match="row 2.*'x'"):
            load_csv(write(tmp_path, "a,b\n1,x\n"))

    def test_negative_count(self, tmp_path):
        with pytest.raises(DataError, match="row 4.*negative"):
            load_csv(write(tmp_path, "a\n1\n2\n-3\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_csv(tmp_path / "absent.csv")

    def test_header_only(self, tmp_path):
        with pytest.raises(DataError, match="no data rows"):
            load_csv(write(tmp_path, "a,b\n"))

    def test_duplicate_labels(self, tmp_path):
        with pytest.raises(DataError, match="duplicate"):
            load_csv(write(tmp_path, "a,a\n1,2\n"))

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(DataError, match="non-finite"):
            load_csv(write(tmp_path, "a\nnan\n"))


class TestSplitSpec:
    def test_default_ratios_partition(self):
        sp = SplitSpec(348)
        assert sp.train_end == 174
        assert sp.val_end == 174 + 69
        counts = {"train": 0, "val": 0, "test": 0}
        for t in range(348):
            counts[sp.split_of(t)] += 1
        assert counts == {"train": 174, "val": 69, "test": 105}

    def test_membership_is_chronological(self):
        sp = SplitSpec(100)
        labels = [sp.split_of(t) for t in range(100)]
        assert labels == sorted(labels, key=["train", "val", "test"].index)

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            SplitSpec(10, ratios=(0.5, 0.2, 0.2))

    def test_out_of_range_index(self):
        with pytest.raises(ConfigError):
            SplitSpec(10).split_of(10)

    @given(L=st.integers(min_value=1, max_value=5000))
    @settings(max_examples=100, deadline=None)
    def test_boundaries_monotone(self, L):
        sp = SplitSpec(L)
        assert 0 <= sp.train_end <= sp.val_end <= L


class TestNormalize:
    def test_arithmetic_example(self):
        s = toy_series([[0.0, 200.0, 50.0, 999.0]])
        values, stats = normalize(s, SplitSpec(4, ratios=(0.5, 0.25, 0.25)))
        assert values[0, 2] == 0.25
        assert stats.lo[0] == 0.0 and stats.hi[0] == 200.0

    def test_constant_region_maps_to_zero(self):
        s = toy_series([[7.0, 7.0, 7.0, 7.0], [1.0, 2.0, 3.0, 4.0]])
        values, _ = normalize(s, SplitSpec(4))
        np.testing.assert_array_equal(values[0], 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        s = toy_series(rng.uniform(0, 100, (3, 40)))
        values, stats = normalize(s, SplitSpec(40))
        back = denormalize(values, stats, axis=0)
        np.testing.assert_allclose(back, s.counts, atol=1e-9)

    def test_denormalize_endpoints(self):
        stats = NormStats(lo=np.array([10.0]), hi=np.array([30.0]))
        assert denormalize(np.array([0.0]), stats)[0] == 10.0
        assert denormalize(np.array([1.0]), stats)[0] == 30.0
        assert denormalize(np.array([0.5]), stats)[0] == 20.0

    def test_stats_from_train_span_only(self):
        counts = np.arange(20, dtype=float).reshape(1, 20)
        s = toy_series(counts)
        _, stats = normalize(s, SplitSpec(20))
        assert stats.hi[0] == 9.0  # train span is the first 10 steps
        full_hi = counts.max()
        assert full_hi != stats.hi[0]  # leakage canary

    def test_heldout_values_may_exceed_one(self):
        s = toy_series(np.arange(20, dtype=float).reshape(1, 20))
        values, _ = normalize(s, SplitSpec(20))
        assert values[0, -1] > 1.0

    def test_global_mode_shares_one_range(self):
        s = toy_series([[0.0, 10.0], [100.0, 50.0]])
        values, stats = normalize(s, SplitSpec(2, ratios=(1.0, 0.0, 0.0)), mode="global")
        assert stats.mode == "global"
        np.testing.assert_array_equal(stats.lo, [0.0, 0.0])
        np.testing.assert_array_equal(stats.hi, [100.0, 100.0])
        assert values[1, 0] == 1.0

    def test_unknown_mode(self):
        s = toy_series([[1.0, 2.0]])
        with pytest.raises(ConfigError, match="mode"):
            normalize(s, SplitSpec(2, ratios=(1.0, 0.0, 0.0)), mode="zscore")

    def test_stats_round_trip_dict(self):
        stats = NormStats(lo=np.array([1.0, 2.0]), hi=np.array([3.0, 9.0]), mode="per-region")
        again = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.lo, stats.lo)
        np.testing.assert_array_equal(again.hi, stats.hi)
        assert again.mode == stats.mode

    @given(
        st.lists(
            # width=32 caps the dynamic range: a subnormal float64 span under
            # a ~1e6 value would overflow the scaled held-out points to inf
            st.floats(min_value=0, max_value=1e6, allow_nan=False, width=32),
            min_size=4,
            max_size=60,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_train_span_lands_in_unit_interval(self, row):
        s = toy_series(np.array([row]))
        sp = SplitSpec(len(row))
        values, _ = normalize(s, sp)
        train = values[0, : sp.train_end]
        assert (train >= -1e-12).all() and (train <= 1 + 1e-12).all()


class TestMakeWindows:
    def test_counts_and_first_target(self):
        L, T, h = 348, 20, 3
        values = np.zeros((2, L))
        split = SplitSpec(L)
        out = make_windows(values, T, h, split)
        total = sum(len(v) for v in out.values())
        assert total == L - T - h + 1 == 326
        first = min(s.t + h for v in out.values() for s in v)
        assert first == 22

    def test_exact_boundary_single_sample(self):
        values = np.arange(14, dtype=float).reshape(1, 14)
        out = make_windows(values, 10, 4, SplitSpec(14, ratios=(1.0, 0.0, 0.0)))
        assert sum(len(v) for v in out.values()) == 1
        (s,) = out["train"]
        np.testing.assert_array_equal(s.input[0], np.arange(10))
        assert s.target[0] == 13.0 and s.t == 9

    def test_too_short_names_minimum(self):
        with pytest.raises(ConfigError, match="at least 24"):
            make_windows(np.zeros((1, 20)), 20, 4, SplitSpec(20))

    def test_membership_follows_target(self):
        L, T, h = 40, 5, 2
        split = SplitSpec(L)
        out = make_windows(np.zeros((1, L)), T, h, split)
        for name, samples in out.items():
            for s in samples:
                assert split.split_of(s.t + h) == name

    def test_chronology_across_splits(self):
        out = make_windows(np.zeros((1, 60)), 5, 2, SplitSpec(60))
        last_train = max(s.t for s in out["train"])
        first_test = min(s.t for s in out["test"])
        assert last_train < first_test

    def test_inputs_may_cross_boundaries(self):
        # a window whose target is the first validation index reaches back
        # into the training span
        L, T, h = 40, 6, 1
        split = SplitSpec(L)
        out = make_windows(np.arange(40, dtype=float).reshape(1, 40), T, h, split)
        first_val = out["val"][0]
        assert first_val.t + h == split.train_end
        assert first_val.t - T + 1 < split.train_end

    def test_window_contents(self):
        values = np.vstack([np.arange(30.0), np.arange(30.0) * 10])
        out = make_windows(values, 4, 3, SplitSpec(30))
        for name in ("train", "val", "test"):
            for s in out[name]:
                np.testing.assert_array_equal(s.input, values[:, s.t - 3 : s.t + 1])
                np.testing.assert_array_equal(s.target, values[:, s.t + 3])

    @given(
        L=st.integers(min_value=2, max_value=120),
        T=st.integers(min_value=1, max_value=30),
        h=st.integers(min_value=1, max_value=12),
    )
    @settings(max_examples=150, deadline=None)
    def test_count_partition_property(self, L, T, h):
        split = SplitSpec(L)
        if L < T + h:
            with pytest.raises(ConfigError):
                make_windows(np.zeros((1, L)), T, h, split)
            return
        out = make_windows(np.zeros((1, L)), T, h, split)
        assert sum(len(v) for v in out.values()) == L - T - h + 1
