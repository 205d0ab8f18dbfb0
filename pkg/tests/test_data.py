import numpy as np
import pytest

from cape.data import (DataError, TimeSeriesRecord, denormalize, load_csv,
                       make_timestamps, make_views, make_windows,
                       mask_patches, patchify, sample_view_pair, save_csv,
                       split_indices, unpatchify, zscore_normalize)


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


HEADER = "disease_id,region_id,timestamp,value,r0_lower,r0_upper\n"


class TestLoadCsv:
    def test_three_rows_one_record(self, tmp_path):
        p = write(tmp_path, HEADER +
                  "flu,us,2001-01-01,5.0,1.0,2.0\n"
                  "flu,us,2001-01-08,6.0,1.0,2.0\n"
                  "flu,us,2001-01-15,7.0,1.0,2.0\n")
        recs = load_csv(p)
        assert len(recs) == 1
        assert len(recs[0]) == 3
        assert recs[0].r0_range == (1.0, 2.0)
        np.testing.assert_array_equal(recs[0].values, [5.0, 6.0, 7.0])

    def test_duplicate_timestamp_rejected(self, tmp_path):
        p = write(tmp_path, HEADER +
                  "flu,us,2001-01-01,5.0,1.0,2.0\n"
                  "flu,us,2001-01-01,6.0,1.0,2.0\n")
        with pytest.raises(DataError, match="duplicate"):
            load_csv(p)

    def test_nan_row_dropped_and_counted(self, tmp_path):
        p = write(tmp_path, HEADER +
                  "flu,us,2001-01-01,5.0,1.0,2.0\n"
                  "flu,us,2001-01-08,NaN,1.0,2.0\n"
                  "flu,us,2001-01-15,7.0,1.0,2.0\n")
        recs = load_csv(p)
        assert len(recs[0]) == 2
        assert recs[0].meta["dropped_rows"] == 1

    def test_malformed_row_reports_line(self, tmp_path):
        p = write(tmp_path, HEADER +
                  "flu,us,2001-01-01,5.0,1.0,2.0\n"
                  "flu,us,not-a-date,5.0,1.0,2.0\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(p)
        p2 = write(tmp_path, HEADER + "flu,us,2001-01-01,-3.0,1.0,2.0\n",
                   name="neg.csv")
        with pytest.raises(DataError, match="line 2"):
            load_csv(p2)

    def test_empty_series_skipped(self, tmp_path, caplog):
        p = write(tmp_path, HEADER +
                  "flu,us,2001-01-01,,1.0,2.0\n"
                  "rsv,us,2001-01-01,2.0,1.0,5.0\n")
        with caplog.at_level("WARNING"):
            recs = load_csv(p)
        assert [r.disease_id for r in recs] == ["rsv"]
        assert "skipped" in caplog.text

    def test_r0_columns_optional(self, tmp_path):
        p = write(tmp_path, "disease_id,region_id,timestamp,value\n"
                            "flu,us,2001-01-01,5.0\n"
                            "flu,us,2001-01-08,6.0\n")
        recs = load_csv(p)
        assert recs[0].r0_range == (0.0, 20.0)

    def test_save_load_roundtrip(self, tmp_path):
        rec = TimeSeriesRecord("flu", "us", make_timestamps(5),
                               np.array([1.5, 2.25, 3.0, 0.125, 9.75]),
                               r0_range=(1.2, 1.4))
        p = tmp_path / "out.csv"
        save_csv([rec], p)
        back = load_csv(p)[0]
        np.testing.assert_array_equal(back.values, rec.values)
        assert back.timestamps == rec.timestamps
        assert back.r0_range == rec.r0_range


class TestNormalize:
    def test_basic(self):
        rec = TimeSeriesRecord("d", "r", make_timestamps(3),
                               np.array([1.0, 2.0, 3.0]))
        out = zscore_normalize(rec)
        assert abs(out.values.mean()) < 1e-9
        assert abs(out.values.std() - 1.0) < 1e-9

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        rec = TimeSeriesRecord("d", "r", make_timestamps(50),
                               rng.uniform(0, 100, size=50))
        out = zscore_normalize(rec)
        np.testing.assert_allclose(denormalize(out.values, out.norm_state),
                                   rec.values, atol=1e-9)

    def test_train_split_stats_only(self):
        values = np.concatenate([np.arange(60.0), np.arange(60.0) + 500.0])
        rec = TimeSeriesRecord("d", "r", make_timestamps(120), values)
        out = zscore_normalize(rec, train_frac=0.5)
        train = out.values[:60]
        test = out.values[60:]
        assert abs(train.mean()) < 1e-9
        assert abs(test.mean()) > 1.0  # test split keeps its shift

    def test_constant_series_rejected(self):
        rec = TimeSeriesRecord("d", "r", make_timestamps(10), np.ones(10))
        with pytest.raises(DataError, match="constant"):
            zscore_normalize(rec)


class TestWindows:
    def make(self, n):
        return TimeSeriesRecord("d", "r", make_timestamps(n),
                                np.arange(float(n)))

    def test_window_counts(self):
        assert len(make_windows(self.make(40), T=36, h=4, stride=1)) == 1
        assert len(make_windows(self.make(41), T=36, h=4, stride=1)) == 2

    def test_count_formula_random(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(10, 200))
            T = int(rng.integers(2, 50))
            h = int(rng.integers(1, 20))
            stride = int(rng.integers(1, 10))
            got = len(make_windows(self.make(n), T=T, h=h, stride=stride))
            expected = 0 if n < T + h else (n - T - h) // stride + 1
            assert got == expected, (n, T, h, stride)

    def test_too_short_is_empty_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            assert make_windows(self.make(10), T=36, h=4) == []
        assert "no windows" in caplog.text

    def test_chronology_and_content(self):
        wins = make_windows(self.make(44), T=36, h=4, stride=2)
        assert [w.source[2] for w in wins] == [0, 2, 4]
        np.testing.assert_array_equal(wins[1].x, np.arange(2.0, 38.0))
        np.testing.assert_array_equal(wins[1].y, np.arange(38.0, 42.0))


class TestPatches:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=36)
        assert np.array_equal(unpatchify(patchify(x, 4)), x)

    def test_mask_counts(self):
        rng = np.random.default_rng(3)
        ps = patchify(np.ones(36), 4)  # C = 9
        masked = mask_patches(ps, 0.3, rng)
        assert masked.mask.sum() == 3
        np.testing.assert_array_equal(masked.patches[masked.mask], 0.0)
        # untouched patches keep their values
        np.testing.assert_array_equal(masked.patches[~masked.mask], 1.0)

    def test_mask_minimum_one(self):
        rng = np.random.default_rng(4)
        ps = patchify(np.ones(8), 4)  # C = 2, round(0.1*2) = 0 -> floor 1
        assert mask_patches(ps, 0.1, rng).mask.sum() == 1

    def test_mask_deterministic_per_seed(self):
        ps = patchify(np.arange(36.0), 4)
        m1 = mask_patches(ps, 0.3, np.random.default_rng(9)).mask
        m2 = mask_patches(ps, 0.3, np.random.default_rng(9)).mask
        assert np.array_equal(m1, m2)


class TestViews:
    def test_full_overlap(self):
        rng = np.random.default_rng(5)
        vp = sample_view_pair(np.arange(80.0), T=36, patch_len=4, rng=rng,
                              overlap_patches=9)
        assert vp.start_a == vp.start_b
        assert vp.n_overlap == 9
        np.testing.assert_array_equal(vp.view_a, vp.view_b)

    def test_single_patch_overlap(self):
        rng = np.random.default_rng(6)
        vp = sample_view_pair(np.arange(64.0), T=16, patch_len=4, rng=rng,
                              overlap_patches=1)
        assert vp.n_overlap == 1
        # overlap indexes the same absolute values in both views
        a = vp.view_a[vp.omega_a[0] * 4:(vp.omega_a[0] + 1) * 4]
        b = vp.view_b[vp.omega_b[0] * 4:(vp.omega_b[0] + 1) * 4]
        np.testing.assert_array_equal(a, b)

    def test_overlap_fraction_range(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            vp = sample_view_pair(np.arange(90.0), T=36, patch_len=4, rng=rng)
            frac = vp.n_overlap / 9
            assert 0.25 <= frac <= 1.0

    def test_alignment_is_consistent(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            vp = sample_view_pair(np.arange(90.0), T=36, patch_len=4, rng=rng)
            for ia, ib in zip(vp.omega_a, vp.omega_b):
                np.testing.assert_array_equal(
                    vp.view_a[ia * 4:(ia + 1) * 4],
                    vp.view_b[ib * 4:(ib + 1) * 4])

    def test_short_series_skipped(self, caplog):
        rec = TimeSeriesRecord("d", "r", make_timestamps(40), np.arange(40.0))
        rng = np.random.default_rng(9)
        with caplog.at_level("WARNING"):
            assert make_views(rec, T=36, patch_len=4, rng=rng) is None
        assert "skipped" in caplog.text


def test_split_indices():
    (a0, a1), (b0, b1), (c0, c1) = split_indices(100)
    assert (a0, a1) == (0, 60)
    assert (b0, b1) == (60, 70)
    assert (c0, c1) == (70, 100)
    with pytest.raises(DataError):
        split_indices(100, (0.5, 0.2, 0.2))
