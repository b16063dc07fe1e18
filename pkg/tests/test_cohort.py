import logging

import numpy as np
import pytest

from senn_icu.cohort import (
    D_S,
    D_X,
    DEFAULT_SOFA_RULES,
    MIN_LOS,
    ORGANS,
    GeneratorConfig,
    PatientRecord,
    SofaRule,
    aggregate_hourly,
    apply_scalers,
    fit_scalers,
    generate_cohort,
    hourly_median,
    label_record,
    load_sofa_rules,
    locf,
    mortality_labels,
    read_cohort,
    read_scalers,
    scale_values,
    score_series,
    score_sofa,
    unscale_values,
    window_max,
    write_cohort,
    write_scalers,
)
from senn_icu.imputer import build_mask

RENAL = DEFAULT_SOFA_RULES[4]


def brute_window_max(scaled, window=24):
    """Double loop over the strictly-future window; the empty final window keeps its own value."""
    T, N = scaled.shape
    out = np.empty_like(scaled)
    for t in range(T):
        for j in range(N):
            future = [scaled[u, j] for u in range(t + 1, min(t + window, T - 1) + 1)]
            out[t, j] = max(future) if future else scaled[t, j]
    return out


def record_with_marker(marker_values, feature, T=None, death=None, d_x=8, d_s=3):
    T = len(marker_values) if T is None else T
    values = np.full((T, d_x), np.nan)
    values[:, feature] = marker_values
    return PatientRecord(0, np.zeros(d_s), build_mask(values), death)


@pytest.fixture(scope="module")
def cohort_2000():
    return generate_cohort(2000, 0.089, rng_seed=1)


class TestSofaRules:
    def test_renal_below_all(self):
        assert RENAL.score(1.0) == 0

    def test_renal_above_all(self):
        assert RENAL.score(6.0) == 4

    @pytest.mark.parametrize("rule", DEFAULT_SOFA_RULES, ids=ORGANS)
    def test_cut_point_takes_higher_score(self, rule):
        for k, c in enumerate(rule.cuts):
            assert rule.score(c) == k + 1

    @pytest.mark.parametrize("rule", DEFAULT_SOFA_RULES, ids=ORGANS)
    def test_monotone(self, rule):
        lo, hi = min(rule.cuts), max(rule.cuts)
        xs = np.linspace(lo - abs(lo), hi * 2, 500)
        s = rule.score(xs)
        d = np.diff(s)
        assert np.all(d >= 0) if rule.direction == "increasing" else np.all(d <= 0)
        assert set(s.tolist()) == {0, 1, 2, 3, 4}

    def test_missing_scores_zero(self):
        row = np.full(D_X, np.nan)
        assert score_sofa(row).tolist() == [0] * 6

    def test_bad_cut_order(self):
        with pytest.raises(ValueError):
            SofaRule("renal", 4, (2.0, 1.0, 3.0, 4.0))
        with pytest.raises(ValueError):
            SofaRule("renal", 4, (1.0, 2.0, 3.0))

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "rules.csv"
        lines = ["# organ,feature,direction,c1..c4,marker"]
        for r in DEFAULT_SOFA_RULES:
            lines.append(",".join([r.organ, str(r.feature), r.direction] + [repr(c) for c in r.cuts] + [r.marker]))
        path.write_text("\n".join(lines))
        assert load_sofa_rules(path) == DEFAULT_SOFA_RULES

    def test_load_rejects_short_file(self, tmp_path):
        path = tmp_path / "rules.csv"
        path.write_text("renal,4,increasing,1.2,2.0,3.5,5.0\n")
        with pytest.raises(ValueError, match="expected 6"):
            load_sofa_rules(path)


class TestLocfScoring:
    def test_locf(self):
        x = np.array([np.nan, 1.0, np.nan, np.nan, 3.0, np.nan])
        got = locf(x)
        assert np.isnan(got[0])
        assert got[1:].tolist() == [1.0, 1.0, 1.0, 3.0, 3.0]

    def test_locf_2d_columns_independent(self):
        x = np.array([[1.0, np.nan], [np.nan, 2.0], [np.nan, np.nan]])
        got = locf(x)
        assert got[:, 0].tolist() == [1.0, 1.0, 1.0]
        assert np.isnan(got[0, 1]) and got[1:, 1].tolist() == [2.0, 2.0]

    def test_series_carries_markers(self):
        values = np.full((4, D_X), np.nan)
        values[1, 4] = 6.0  # renal
        s = score_series(values)
        assert s[:, 4].tolist() == [0, 4, 4, 4]
        assert np.all(s[:, [0, 1, 2, 3, 5]] == 0)


class TestLabels:
    def test_constant_scores(self):
        rec = record_with_marker(np.full(50, 2.5), feature=4, d_x=D_X)
        lab = label_record(rec)
        assert np.all(lab.sofa_raw[:, 4] == 2)
        np.testing.assert_array_equal(lab.target, lab.sofa_scaled)

    def test_spike_at_hour_30(self):
        marker = np.full(60, 1.0)
        marker[30] = 6.0
        marker[31:] = 1.0
        lab = label_record(record_with_marker(marker, feature=4, d_x=D_X))
        assert lab.sofa_raw[30, 4] == 4 and lab.sofa_raw[31, 4] == 0
        hot = np.nonzero(lab.target[:, 4] == 1.0)[0]
        assert hot.tolist() == list(range(6, 30))
        np.testing.assert_array_equal(lab.target, brute_window_max(lab.sofa_scaled))

    def test_scaled_is_raw_over_four(self):
        rng = np.random.default_rng(0)
        rec = record_with_marker(rng.uniform(0.5, 7.0, 48), feature=4, d_x=D_X)
        lab = label_record(rec)
        np.testing.assert_array_equal(lab.sofa_scaled, lab.sofa_raw / 4.0)
        assert lab.sofa_scaled.min() >= 0 and lab.sofa_scaled.max() <= 1

    def test_survivor_all_zero(self):
        lab = label_record(record_with_marker(np.ones(48), 4, d_x=D_X))
        assert np.all(lab.mortality == 0)

    def test_mortality_window(self):
        y = mortality_labels(60, 50)
        assert np.nonzero(y)[0].tolist() == list(range(26, 50))
        y = mortality_labels(48, 48)
        assert np.nonzero(y)[0].tolist() == list(range(24, 48))

    def test_window_max_random_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            T = int(rng.integers(1, 80))
            scaled = rng.integers(0, 5, size=(T, 6)) / 4.0
            np.testing.assert_array_equal(window_max(scaled), brute_window_max(scaled))

    def test_rejects_scaled_record(self, cohort_2000):
        params = fit_scalers(cohort_2000[:50])
        with pytest.raises(ValueError, match="raw"):
            label_record(apply_scalers(params, cohort_2000[0]))


class TestRecord:
    def test_short_stay(self):
        with pytest.raises(ValueError, match="48"):
            record_with_marker(np.ones(47), 4)

    def test_death_outside_stay(self):
        with pytest.raises(ValueError, match="death"):
            record_with_marker(np.ones(48), 4, death=49)
        with pytest.raises(ValueError, match="death"):
            record_with_marker(np.ones(48), 4, death=0)


class TestGenerator:
    def test_prevalence_band(self, cohort_2000):
        realised = np.mean([r.died for r in cohort_2000])
        assert 0.069 <= realised <= 0.109

    def test_min_stay(self, cohort_2000):
        assert min(r.los_hours for r in cohort_2000) >= MIN_LOS

    def test_dims(self, cohort_2000):
        r = cohort_2000[0]
        assert r.series.values.shape[1] == D_X and r.static.shape == (D_S,)

    def test_deterministic(self):
        a, b = generate_cohort(20, 0.2, rng_seed=5), generate_cohort(20, 0.2, rng_seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.series.values, y.series.values, equal_nan=True)
            assert np.array_equal(x.static, y.static) and x.death_hour == y.death_hour
        c = generate_cohort(20, 0.2, rng_seed=6)
        assert not np.array_equal(a[0].series.values, c[0].series.values, equal_nan=True)

    def test_missingness_rates(self, cohort_2000):
        obs = np.concatenate([r.series.mask for r in cohort_2000[:500]])
        missing = 1 - obs.mean(axis=0)
        assert missing.min() >= 0.1 - 0.02 and missing.max() <= 0.9 + 0.02

    def test_signal_before_death(self, cohort_2000):
        dying = np.concatenate([r.latent[-24:] for r in cohort_2000 if r.died]).mean()
        surviving = np.concatenate([r.latent for r in cohort_2000 if not r.died]).mean()
        assert dying > surviving

    def test_custom_dims(self):
        recs = generate_cohort(5, 0.2, rng_seed=0, config=GeneratorConfig(d_x=12, d_s=D_S))
        assert recs[0].series.values.shape[1] == 12

    @pytest.mark.parametrize("n,p", [(0, 0.1), (10, 0.0), (10, 1.0), (10, -0.2)])
    def test_invalid(self, n, p):
        with pytest.raises(ValueError):
            generate_cohort(n, p)


class TestAggregation:
    def test_hourly_median_of_events(self):
        out = aggregate_hourly([0.1, 0.5, 0.9, 1.2, 2.7], [0, 0, 0, 1, 0], [3.0, 1.0, 2.0, 5.0, 7.0], 3, 2)
        assert out[0, 0] == 2.0 and out[1, 1] == 5.0 and out[2, 0] == 7.0
        assert np.isnan(out[1, 0]) and np.isnan(out[0, 1])

    def test_even_count_median(self):
        out = aggregate_hourly([0.0, 0.5], [0, 0], [1.0, 4.0], 1, 1)
        assert out[0, 0] == 2.5

    def test_hourly_median_counts(self):
        reps = np.array([[[1.0, 9.0, 2.0], [5.0, 0.0, 0.0]]])
        counts = np.array([[3, 0]])
        out = hourly_median(reps, counts)
        assert out[0, 0] == 2.0 and np.isnan(out[0, 1])


class TestScaling:
    def _records(self, values, static=None):
        values = np.asarray(values, dtype=np.float64)
        T = values.shape[0]
        if T < MIN_LOS:
            values = np.vstack([values, np.full((MIN_LOS - T, values.shape[1]), np.nan)])
        st = np.zeros(3) if static is None else static
        return [PatientRecord(0, st, build_mask(values))]

    def test_percentile_bounds(self):
        recs = self._records(np.arange(1.0, 101.0)[:, None])
        p = fit_scalers(recs)
        # linear interpolation between order statistics x_(k) at k = p/100 * (n - 1)
        x = np.arange(1.0, 101.0)
        def pct(q):
            k = q / 100 * (x.size - 1)
            lo = int(np.floor(k))
            return x[lo] + (k - lo) * (x[min(lo + 1, x.size - 1)] - x[lo])
        assert abs(p.lo[0] - pct(1)) < 1e-12 and abs(p.hi[0] - pct(99)) < 1e-12
        assert abs(p.lo[0] - 1.99) < 1e-12 and abs(p.hi[0] - 99.01) < 1e-12

    def test_constant_feature(self, caplog):
        recs = self._records(np.full((60, 1), 4.2))
        with caplog.at_level(logging.WARNING):
            p = fit_scalers(recs)
        assert p.iqr[0] == 1.0 and "IQR" in caplog.text
        scaled = apply_scalers(p, recs[0])
        assert np.all(scaled.series.values[~np.isnan(scaled.series.values)] == 0.0)

    def test_not_idempotent_and_forbidden(self):
        recs = self._records(np.random.default_rng(0).normal(size=(60, 2)))
        p = fit_scalers(recs)
        once = apply_scalers(p, recs[0])
        assert once.scaled and not recs[0].scaled
        with pytest.raises(ValueError, match="already scaled"):
            apply_scalers(p, once)
        with pytest.raises(ValueError):
            fit_scalers([once])

    def test_round_trip(self, cohort_2000):
        p = fit_scalers(cohort_2000[:200])
        x = cohort_2000[300].series.values
        back = unscale_values(p, scale_values(p, x))
        clipped = np.clip(x, p.lo, p.hi)
        ok = ~np.isnan(x)
        assert np.max(np.abs(back[ok] - clipped[ok])) <= 1e-12 * max(1.0, np.abs(clipped[ok]).max())

    def test_scaled_then_median_of_replicates(self):
        # repeated same-hour values are reduced by their median before scaling
        hourly = aggregate_hourly([0.2, 0.4, 0.6], [0, 0, 0], [1.0, 2.0, 100.0], 1, 1)
        assert hourly[0, 0] == 2.0

    def test_refit_on_more_data_changes_params(self, cohort_2000):
        train, test = cohort_2000[:300], cohort_2000[300:400]
        a, b = fit_scalers(train), fit_scalers(train + test)
        assert not np.array_equal(a.median, b.median)

    def test_binary_static_untouched(self, cohort_2000):
        p = fit_scalers(cohort_2000[:200])
        s = apply_scalers(p, cohort_2000[0]).static
        np.testing.assert_array_equal(s[1:], cohort_2000[0].static[1:])

    def test_missing_stays_missing(self, cohort_2000):
        p = fit_scalers(cohort_2000[:200])
        r = cohort_2000[5]
        s = apply_scalers(p, r)
        np.testing.assert_array_equal(np.isnan(s.series.values), np.isnan(r.series.values))
        np.testing.assert_array_equal(s.series.mask, r.series.mask)

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_scalers([])

    def test_scaler_file_round_trip(self, tmp_path, cohort_2000):
        p = fit_scalers(cohort_2000[:100])
        write_scalers(tmp_path / "s.tsv", p)
        q = read_scalers(tmp_path / "s.tsv")
        for f in ("lo", "hi", "median", "iqr", "static_lo", "static_hi", "static_median", "static_iqr"):
            assert np.array_equal(getattr(p, f), getattr(q, f))


class TestCohortFile:
    def test_round_trip_exact(self, tmp_path, cohort_2000):
        recs = cohort_2000[:40]
        write_cohort(tmp_path / "c.csv", recs)
        back = read_cohort(tmp_path / "c.csv")
        assert len(back) == 40
        for a, b in zip(recs, back):
            assert a.patient_id == b.patient_id and a.death_hour == b.death_hour
            assert np.array_equal(a.static, b.static)
            assert np.array_equal(a.series.values, b.series.values, equal_nan=True)
            assert np.array_equal(a.series.mask, b.series.mask)

    def test_layout(self, tmp_path, cohort_2000):
        write_cohort(tmp_path / "c.csv", cohort_2000[:1])
        lines = (tmp_path / "c.csv").read_text(encoding="utf-8").splitlines()
        assert lines[1] == "# schema_version=1"
        header = lines[5].split(",")
        assert header[0] == "P" and len(header) == 4 + D_S
        first = lines[6].split(",")
        assert first[0] == "0" and len(first) == 1 + D_X
        assert "" in first  # missing cells are empty fields
        assert len(lines) == 6 + cohort_2000[0].los_hours

    def test_deterministic_bytes(self, tmp_path):
        write_cohort(tmp_path / "a.csv", generate_cohort(5, 0.2, rng_seed=2))
        write_cohort(tmp_path / "b.csv", generate_cohort(5, 0.2, rng_seed=2))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_truncated_file(self, tmp_path, cohort_2000):
        write_cohort(tmp_path / "c.csv", cohort_2000[:1])
        text = (tmp_path / "c.csv").read_text().splitlines()
        (tmp_path / "c.csv").write_text("\n".join(text[:-3]) + "\n")
        with pytest.raises(ValueError, match="truncated"):
            read_cohort(tmp_path / "c.csv")

    def test_wrong_schema(self, tmp_path, cohort_2000):
        write_cohort(tmp_path / "c.csv", cohort_2000[:1])
        text = (tmp_path / "c.csv").read_text().replace("schema_version=1", "schema_version=9")
        (tmp_path / "c.csv").write_text(text)
        with pytest.raises(ValueError, match="schema"):
            read_cohort(tmp_path / "c.csv")
