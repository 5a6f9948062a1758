import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from lungvol.evalstat import (
    EvalReport,
    ZeroVarianceError,
    bland_altman_np,
    compare_measurements,
    evaluate_pairs,
    mae_ml,
    mape_percent,
    pearson_r,
    percentile,
    qq_points,
    shapiro_wilk,
    write_report_files,
)


def loop_mae_ml(pred, ref):
    return math.fsum(abs(p - r) for p, r in zip(pred, ref)) / len(pred) * 1000.0


def loop_mape(pred, ref):
    return math.fsum(abs(p - r) / r for p, r in zip(pred, ref)) / len(pred) * 100.0


def loop_pearson(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def loop_quantile(values, q):
    """Linear interpolation between order statistics at 1-indexed position q*(N-1)+1."""
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    if lo + 1 < len(s):
        return s[lo] * (1 - frac) + s[lo + 1] * frac
    return s[lo]


class TestBasicMetrics:
    def test_perfect_prediction(self):
        pred = np.array([2.0, 4.0, 6.0])
        assert mae_ml(pred, pred) == 0.0
        assert mape_percent(pred, pred) == 0.0

    def test_single_pair(self):
        assert mae_ml([2.0], [4.0]) == pytest.approx(2000.0)
        assert mape_percent([2.0], [4.0]) == pytest.approx(50.0)

    def test_matches_loop_oracles(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(1.0, 9.0, size=10_000)
        ref = rng.uniform(1.0, 9.0, size=10_000)
        assert abs(mae_ml(pred, ref) - loop_mae_ml(pred, ref)) <= 1e-9
        assert abs(mape_percent(pred, ref) - loop_mape(pred, ref)) <= 1e-9

    def test_mape_rejects_zero_reference(self):
        with pytest.raises(ValueError, match="zero reference"):
            mape_percent([1.0], [0.0])

    def test_scale_equivariance(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(2, 8, 50)
        ref = rng.uniform(2, 8, 50)
        c = 3.7
        assert mae_ml(c * pred, c * ref) == pytest.approx(c * mae_ml(pred, ref))
        assert mape_percent(c * pred, c * ref) == pytest.approx(mape_percent(pred, ref))
        bias0, lo0, hi0, _ = bland_altman_np(pred, ref)
        bias1, lo1, hi1, _ = bland_altman_np(c * pred, c * ref)
        assert (bias1, lo1, hi1) == pytest.approx((c * bias0, c * lo0, c * hi0))
        assert pearson_r(c * pred, c * ref) == pytest.approx(pearson_r(pred, ref))


class TestPearson:
    def test_affine_is_one(self):
        x = np.array([1.0, 2.0, 5.0, 9.0])
        assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0)

    def test_negation_is_minus_one(self):
        x = np.array([1.0, 2.0, 5.0])
        assert pearson_r(x, -x) == pytest.approx(-1.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=10_000)
        y = 0.5 * x + rng.normal(size=10_000)
        assert abs(pearson_r(x, y) - loop_pearson(x, y)) <= 1e-9

    def test_zero_variance_is_explicit(self):
        with pytest.raises(ZeroVarianceError):
            pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=100)
        y = rng.normal(size=100)
        assert pearson_r(x + 5.0, y - 3.0) == pytest.approx(pearson_r(x, y))


class TestBlandAltman:
    def test_constant_difference(self):
        ref = np.array([2.0, 4.0, 6.0])
        bias, lo, hi, diffs = bland_altman_np(ref + 0.5, ref)
        assert bias == pytest.approx(500.0)
        assert lo == pytest.approx(500.0)
        assert hi == pytest.approx(500.0)

    def test_symmetric_five_point_example(self):
        # diffs -2..2 L: P2.5 interpolates between the first two order statistics
        pred = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        ref = np.zeros(5)
        bias, lo, hi, _ = bland_altman_np(pred, ref)
        assert bias == pytest.approx(0.0)
        assert lo == pytest.approx(-1900.0)
        assert hi == pytest.approx(1900.0)

    def test_1_to_1000_ml_example(self):
        diffs_ml = np.arange(1, 1001, dtype=np.float64)
        pred = diffs_ml / 1000.0
        _, lo, hi, _ = bland_altman_np(pred, np.zeros(1000))
        assert lo == pytest.approx(25.975)
        assert hi == pytest.approx(975.025)

    def test_matches_loop_quantile_rule(self):
        rng = np.random.default_rng(4)
        pred = rng.normal(5.0, 1.0, size=10_000)
        ref = rng.normal(5.0, 1.0, size=10_000)
        bias, lo, hi, diffs = bland_altman_np(pred, ref)
        assert abs(bias - loop_quantile(diffs, 0.5) * 1000) <= 1e-9
        assert abs(lo - loop_quantile(diffs, 0.025) * 1000) <= 1e-9
        assert abs(hi - loop_quantile(diffs, 0.975) * 1000) <= 1e-9

    def test_needs_three_pairs(self):
        with pytest.raises(ValueError, match="at least 3"):
            bland_altman_np([1.0, 2.0], [1.0, 2.0])

    @given(st.lists(st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=3, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_percentile_ordering(self, diffs):
        pred = np.asarray(diffs)
        bias, lo, hi, _ = bland_altman_np(pred, np.zeros(len(diffs)))
        assert lo <= bias <= hi


class TestPercentileConvention:
    def test_against_hand_rule(self):
        rng = np.random.default_rng(5)
        for n in (3, 5, 10, 137, 1000):
            x = rng.normal(size=n)
            for q in (0.025, 0.5, 0.975, 0.1):
                assert percentile(x, q) == pytest.approx(loop_quantile(x, q), abs=1e-12)


class TestShapiroWilk:
    # classic right-skewed sample; normality clearly rejected
    SKEWED = np.array([148, 154, 158, 160, 161, 162, 166, 170, 182, 195, 236], dtype=np.float64)

    def test_skewed_sample(self):
        w, p = shapiro_wilk(self.SKEWED)
        assert w == pytest.approx(0.79, abs=0.01)
        assert p < 0.01

    def test_matches_reference_implementation_on_canonical_samples(self):
        # scipy.stats.shapiro is a published implementation of the same
        # Royston algorithm; W must agree within 1e-3 on every sample
        rng = np.random.default_rng(6)
        samples = [
            self.SKEWED,
            np.arange(1.0, 21.0),                      # uniform ramp, n=20
            rng.standard_normal(50),
            rng.lognormal(size=137),
            rng.uniform(size=500),
            rng.standard_normal(4),                    # small-n branch
            rng.standard_normal(11),                   # boundary of small-n p fit
            rng.standard_normal(12),                   # first large-n p fit
        ]
        for x in samples:
            w_ours, p_ours = shapiro_wilk(x)
            w_ref, p_ref = scipy_stats.shapiro(x)
            assert abs(w_ours - w_ref) < 1e-3
            assert abs(p_ours - p_ref) < 1e-3

    def test_normal_calibration(self):
        # fixed seeds: at alpha=0.05 at least 90% of normal samples must pass
        passes = 0
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal(500)
            _, p = shapiro_wilk(x)
            passes += p > 0.05
        assert passes >= 90

    def test_uniform_power(self):
        x = np.random.default_rng(7).uniform(size=500)
        _, p = shapiro_wilk(x)
        assert p < 0.01

    def test_n_limits(self):
        with pytest.raises(ValueError, match="3 <= N"):
            shapiro_wilk([1.0, 2.0])
        with pytest.raises(ValueError, match="3 <= N"):
            shapiro_wilk(np.zeros(5001))

    def test_zero_variance_rejected(self):
        with pytest.raises(ZeroVarianceError):
            shapiro_wilk(np.full(10, 3.0))

    def test_n3_branch(self):
        w, p = shapiro_wilk(np.array([1.0, 2.0, 4.0]))
        w_ref, p_ref = scipy_stats.shapiro([1.0, 2.0, 4.0])
        assert w == pytest.approx(w_ref, abs=1e-6)
        assert p == pytest.approx(p_ref, abs=1e-3)


class TestQQ:
    def test_two_point_example(self):
        pts = qq_points(np.array([-1.0, 1.0]))
        assert pts[0, 0] == pytest.approx(-0.67448975)
        assert pts[1, 0] == pytest.approx(0.67448975)
        np.testing.assert_array_equal(pts[:, 1], [-1.0, 1.0])

    def test_symmetric_sample_symmetric_points(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        pts = qq_points(x)
        np.testing.assert_allclose(pts[:, 0], -pts[::-1, 0], atol=1e-12)
        np.testing.assert_allclose(pts[:, 1], -pts[::-1, 1], atol=1e-12)

    def test_normal_scores_on_identity_line(self):
        from scipy.special import ndtri
        n = 101
        x = ndtri((np.arange(1, n + 1) - 0.5) / n)
        pts = qq_points(x)
        np.testing.assert_allclose(pts[:, 0], pts[:, 1], atol=1e-6)


class TestReports:
    def test_equal_measurements(self, tmp_path):
        a = np.array([2.0, 3.5, 5.0, 6.5])
        report = compare_measurements(a, a, "A", "B", tmp_path)
        assert report.pearson_r == pytest.approx(1.0)
        assert report.bias_ml == 0.0
        assert report.p2_5_ml == 0.0
        assert report.p97_5_ml == 0.0

    def test_constant_offset_bias(self, tmp_path):
        a = np.array([2.0, 3.0, 4.0, 5.0, 6.0])
        report = compare_measurements(a, a + 0.56, "CT", "PFT", tmp_path)
        assert report.bias_ml == pytest.approx(-560.0)

    def test_fields_match_oracles(self, tmp_path):
        rng = np.random.default_rng(8)
        ref = rng.uniform(2, 8, 200)
        pred = ref + rng.normal(0, 0.3, 200)
        report = evaluate_pairs([f"c{i}" for i in range(200)], pred, ref)
        assert abs(report.mae_ml - loop_mae_ml(pred, ref)) <= 1e-9
        assert abs(report.mape_pct - loop_mape(pred, ref)) <= 1e-9
        assert abs(report.pearson_r - loop_pearson(pred, ref)) <= 1e-9
        diffs = pred - ref
        assert abs(report.bias_ml - loop_quantile(diffs, 0.5) * 1000) <= 1e-9
        assert abs(report.p2_5_ml - loop_quantile(diffs, 0.025) * 1000) <= 1e-9
        assert abs(report.p97_5_ml - loop_quantile(diffs, 0.975) * 1000) <= 1e-9
        assert report.n == 200

    def test_degenerate_r_reported_as_none(self):
        report = evaluate_pairs(["a", "b", "c"], [1.0, 1.0, 1.0], [2.0, 3.0, 4.0])
        assert report.pearson_r is None

    def test_report_files_deterministic(self, tmp_path):
        rng = np.random.default_rng(9)
        ref = rng.uniform(2, 8, 30)
        pred = ref + rng.normal(0, 0.2, 30)
        report = evaluate_pairs([f"c{i}" for i in range(30)], pred, ref)
        for d in ("one", "two"):
            write_report_files(report, tmp_path / d, "m", "model", "six_layer")
        for name in ("m_predictions.csv", "m_metrics.csv", "m_scatter.svg",
                     "m_bland_altman.svg", "m_qq.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_metrics_csv_header(self, tmp_path):
        report = evaluate_pairs(["a", "b", "c"], [2.0, 3.0, 4.0], [2.1, 2.9, 4.2])
        write_report_files(report, tmp_path, "m", "dual", "six_layer")
        lines = (tmp_path / "m_metrics.csv").read_text().strip().split("\n")
        assert lines[0] == "model,architecture,mape_pct,mae_ml,pearson_r,n"
        assert lines[1].startswith("dual,six_layer,")

    def test_svg_has_identity_line_and_canvas(self, tmp_path):
        report = evaluate_pairs(["a", "b", "c"], [2.0, 3.0, 4.0], [2.1, 2.9, 4.2])
        write_report_files(report, tmp_path, "m", "dual", "six_layer")
        svg = (tmp_path / "m_scatter.svg").read_text()
        assert 'width="800" height="800"' in svg
        assert 'stroke="red"' in svg
