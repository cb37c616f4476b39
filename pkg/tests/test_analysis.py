"""Fit, ratio-verdict, moment, and regularity-scan tests.

Every expected value here is exact arithmetic, an independent brute-force
recomputation, or a frozen-seed synthetic ensemble checked before pinning.
"""

import json

import numpy as np
import pytest

from clegasket.analysis import (
    dimension_fit,
    line_fit,
    moment_stability,
    one_arm_exponent_fit,
    plot_fit_svg,
    ratio_convergence,
    volume_regularity_scan,
    write_report,
)
from clegasket.errors import InvalidParameterError
from clegasket.grid import DyadicSquare, GasketMask, enumerate_squares
from clegasket.measures import GasketRep, MeasureTable, box_count_2q_raw, box_count_raw, d_cle
from clegasket.percolation import OneArmResult

UNIT = DyadicSquare(0, 0, 0)


class TestLineFit:
    def test_exact_line(self):
        slope, intercept, se, r2 = line_fit([1, 2, 3, 4], [3, 5, 7, 9])
        assert slope == 2.0 and intercept == 1.0
        assert se == 0.0 and r2 == 1.0

    def test_noisy_line_se_positive(self):
        rng = np.random.default_rng(0)
        x = np.arange(10.0)
        y = 0.5 * x + rng.normal(0, 0.1, 10)
        slope, _, se, r2 = line_fit(x, y)
        assert abs(slope - 0.5) < 0.05
        assert se > 0
        assert 0.9 < r2 <= 1.0

    def test_degenerate_inputs(self):
        with pytest.raises(InvalidParameterError):
            line_fit([1.0], [2.0])
        with pytest.raises(InvalidParameterError):
            line_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


class TestDimensionFit:
    def test_full_square_counts_exact(self):
        fit = dimension_fit({k: 4.0**k for k in range(3, 9)}, trim=(0, 0), bootstrap=0)
        assert fit.slope == 2.0
        assert fit.se == 0.0
        assert fit.r2 == 1.0
        assert fit.window == (3, 4, 5, 6, 7, 8)

    def test_segment_counts(self):
        fit = dimension_fit({k: float(2**k) for k in range(0, 10)})
        assert abs(fit.slope - 1.0) < 0.01
        # default trim removed two scales from each end
        assert fit.window == (2, 3, 4, 5, 6, 7)

    def test_zero_count_scale_dropped_with_warning(self):
        counts = {k: float(2**k) for k in range(0, 8)}
        counts[0] = 0.0
        with pytest.warns(UserWarning, match="zero count"):
            fit = dimension_fit(counts, trim=(0, 0), bootstrap=0)
        assert fit.window == tuple(range(1, 8))
        assert abs(fit.slope - 1.0) < 1e-12

    def test_too_few_scales(self):
        with pytest.raises(InvalidParameterError):
            dimension_fit({k: 4.0**k for k in range(3)}, trim=(0, 0))
        with pytest.raises(InvalidParameterError, match="trim"):
            dimension_fit({k: 4.0**k for k in range(6)})  # trim leaves 2

    def test_scale_invariance(self):
        counts = {k: 2.0 ** (1.9 * k) for k in range(2, 8)}
        scaled = {k: 7.3 * v for k, v in counts.items()}
        f1 = dimension_fit(counts, trim=(0, 0), bootstrap=0)
        f2 = dimension_fit(scaled, trim=(0, 0), bootstrap=0)
        assert abs(f1.slope - f2.slope) < 1e-12
        assert f2.intercept > f1.intercept

    def test_bootstrap_ci_brackets_slope(self):
        rng = np.random.default_rng(8)
        counts = {
            k: (2.0 ** (1.9 * k)) * np.exp(rng.normal(0, 0.3, size=200))
            for k in range(2, 8)
        }
        fit = dimension_fit(counts, trim=(0, 0), bootstrap=500, seed=1)
        assert fit.ci is not None
        assert fit.ci[0] < fit.slope < fit.ci[1]
        assert abs(fit.slope - 1.9) < 0.05

    def test_bootstrap_ci_shrinks_with_replicas(self):
        # iid multiplicative noise; quadrupling replicas should halve the CI
        rng = np.random.default_rng(3)
        widths = []
        for reps, bseed in ((1000, 1), (4000, 2)):
            counts = {
                k: (2.0 ** (1.9 * k)) * np.exp(rng.normal(0, 0.4, size=reps))
                for k in range(2, 8)
            }
            fit = dimension_fit(counts, trim=(0, 0), bootstrap=1000, seed=bseed)
            widths.append(fit.ci[1] - fit.ci[0])
        ratio = widths[0] / widths[1]
        assert 1.7 <= ratio <= 2.3

    def test_bootstrap_deterministic(self):
        rng = np.random.default_rng(9)
        counts = {k: 4.0**k * np.exp(rng.normal(0, 0.2, 50)) for k in range(2, 8)}
        a = dimension_fit(counts, trim=(0, 0), bootstrap=200, seed=4)
        b = dimension_fit(counts, trim=(0, 0), bootstrap=200, seed=4)
        assert a.ci == b.ci


class TestOneArmFit:
    def test_exact_power_law(self):
        r = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
        fit = one_arm_exponent_fit((r, r**-0.10417))
        assert abs(fit.slope + 0.10417) < 1e-6
        assert fit.se < 1e-9

    def test_prefactor_invariance(self):
        r = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
        f1 = one_arm_exponent_fit((r, r**-0.10417))
        f2 = one_arm_exponent_fit((r, 3.7 * r**-0.10417))
        assert abs(f1.slope - f2.slope) < 1e-12

    def test_accepts_result_object(self):
        r = (2.0, 4.0, 8.0, 16.0)
        p = tuple(float(x) ** -0.25 for x in r)
        res = OneArmResult(r=r, p_hat=p, se=(0.0,) * 4, reps=100, few_reps=False)
        fit = one_arm_exponent_fit(res)
        assert abs(fit.slope + 0.25) < 1e-9

    def test_zero_estimates_dropped(self):
        r = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
        p = r**-0.5
        p[2] = 0.0
        with pytest.warns(UserWarning, match="zero arm frequency"):
            fit = one_arm_exponent_fit((r, p))
        assert len(fit.window) == 4
        assert abs(fit.slope + 0.5) < 1e-9

    def test_too_few_radii(self):
        with pytest.raises(InvalidParameterError):
            one_arm_exponent_fit(([2.0, 4.0, 8.0], [0.5, 0.4, 0.3]))

    def test_octave_span_required(self):
        r = [8.0, 10.0, 12.0, 16.0, 24.0]
        with pytest.raises(InvalidParameterError, match="octave"):
            one_arm_exponent_fit((r, [0.5] * 5))


class TestRatioConvergence:
    def test_self_ratio_identically_one(self):
        rng = np.random.default_rng(1)
        vals = {k: rng.uniform(1, 2, size=20) for k in range(3, 9)}
        rs = ratio_convergence(vals, vals, pair=("box", "box"))
        assert all(m == 1.0 for m in rs.medians)
        assert rs.cov_tail == 0.0
        assert rs.trend_slope == 0.0
        assert rs.verdict

    def test_constant_multiple(self):
        rng = np.random.default_rng(2)
        denom = {k: rng.uniform(1, 2, size=30) for k in range(3, 9)}
        numer = {k: 2.5 * v for k, v in denom.items()}
        rs = ratio_convergence(numer, denom)
        assert all(abs(m - 2.5) < 1e-12 for m in rs.medians)
        assert rs.verdict

    def test_all_ones_doubled_over_plain(self):
        # full mask: the doubled-square variant counts every square too,
        # so the ratio sits exactly at its k -> inf limit of 1
        rep = GasketRep.from_mask(GasketMask.full(UNIT, 9))
        numer, denom = {}, {}
        for k in range(2, 6):
            numer[k] = [float(box_count_2q_raw(rep, UNIT, k))]
            denom[k] = [float(box_count_raw(rep, UNIT, k))]
        rs = ratio_convergence(numer, denom)
        assert all(m == 1.0 for m in rs.medians)
        assert rs.verdict

    def test_converging_ratio_passes(self):
        base = np.ones(10)
        denom = {k: base for k in range(3, 9)}
        numer = {k: base * (1.0 + 2.0**-k) for k in range(3, 9)}
        rs = ratio_convergence(numer, denom)
        assert rs.verdict
        assert rs.cov_tail < 0.01

    def test_trending_ratio_fails(self):
        base = np.ones(10)
        denom = {k: base for k in range(3, 9)}
        numer = {k: base * 2.0 ** (0.1 * k) for k in range(3, 9)}
        rs = ratio_convergence(numer, denom)
        assert not rs.verdict
        assert abs(rs.trend_slope - 0.1) < 1e-9

    def test_dispersed_tail_fails_cov(self):
        denom = {k: np.ones(5) for k in range(3, 9)}
        numer = {k: np.ones(5) for k in range(3, 9)}
        numer[7] = np.full(5, 3.0)
        rs = ratio_convergence(numer, denom)
        assert rs.cov_tail > 0.1
        assert not rs.verdict

    def test_zero_denominator_scale_excluded(self):
        denom = {k: np.ones(8) for k in range(3, 9)}
        numer = {k: np.full(8, 1.5) for k in range(3, 9)}
        denom[4] = np.array([1.0] * 7 + [0.0])
        rs = ratio_convergence(numer, denom)
        assert rs.excluded == (4,)
        assert 4 not in rs.k_values
        assert rs.verdict

    def test_replica_mismatch(self):
        with pytest.raises(InvalidParameterError):
            ratio_convergence(
                {k: np.ones(3) for k in range(3, 9)},
                {k: np.ones(4) for k in range(3, 9)},
            )

    def test_too_few_scales(self):
        with pytest.raises(InvalidParameterError):
            ratio_convergence(
                {k: np.ones(3) for k in range(3)}, {k: np.ones(3) for k in range(3)}
            )


class TestMomentStability:
    def test_constant_values(self):
        vals = {k: np.full(150, 2.0) for k in range(4, 9)}
        ms = moment_stability(vals)
        assert ms.verdict
        for i, n in enumerate(ms.orders):
            assert all(m == 2.0**n for m in ms.moments[i])
            assert ms.spread[i] == 1.0

    def test_spread_failure(self):
        vals = {4: np.full(120, 1.0), 5: np.full(120, 1.0), 6: np.full(120, 40.0)}
        ms = moment_stability(vals)
        assert not ms.verdict
        assert ms.spread[0] == 40.0

    def test_higher_orders_reported_not_judged(self):
        # order-4 spread above threshold alone must not fail the verdict
        vals = {4: np.full(120, 1.0), 5: np.full(120, 1.8)}
        ms = moment_stability(vals)
        assert ms.spread[3] == pytest.approx(1.8**4)
        assert ms.spread[3] > 10.0
        assert ms.verdict

    def test_replica_floor(self):
        with pytest.raises(InvalidParameterError, match="50"):
            moment_stability({4: np.ones(50)})

    def test_doubling_replicas_consistent(self):
        rng = np.random.default_rng(5)
        v = rng.lognormal(0.0, 0.5, size=800)
        m_half = moment_stability({4: v[:400]}, orders=(2,), min_reps=100)
        m_full = moment_stability({4: v}, orders=(2,), min_reps=100)
        a, b = m_half.moments[0][0], m_full.moments[0][0]
        assert abs(b - a) / a <= 0.10


def brute_regularity(table, radii, a, margin):
    """Independent per-pair distance scan of the same bounds."""
    d = d_cle(table.kappa).d
    centers = [(sq, sq.center) for sq in table.values]
    x0, y0 = float(table.window.x0), float(table.window.y0)
    side = float(table.window.side)
    checks = violations = 0
    for sq, (zx, zy) in centers:
        zx, zy = float(zx), float(zy)
        if not (
            x0 + margin <= zx <= x0 + side - margin
            and y0 + margin <= zy <= y0 + side - margin
        ):
            continue
        for r in radii:
            mass = 0.0
            for other, v in table.values.items():
                cx, cy = other.center
                if (float(cx) - zx) ** 2 + (float(cy) - zy) ** 2 <= r * r:
                    mass += v
            checks += 1
            if not (r ** (d + a) <= mass <= r ** (d - a)):
                violations += 1
    return checks, violations


class TestRegularityScan:
    def test_uniform_mass_matches_brute_force(self):
        # single-scale uniform profile: mass(ball) = value * lattice count,
        # violations exactly reproducible by direct pairwise distances
        k = 4
        values = {sq: 4.0**-k for sq in enumerate_squares(UNIT, k)}
        table = MeasureTable(
            scheme="box", kappa=6.0, k=k, window=UNIT, values=values
        )
        radii = (0.25, 0.125)
        scan = volume_regularity_scan(table, radii, a=0.3)
        checks, violations = brute_regularity(table, sorted(radii), 0.3, 0.25)
        assert (scan.checks, scan.violations) == (checks, violations)
        assert scan.checks > 0
        # 2-dimensional uniform mass is too heavy at r=1/4 for a d~1.9 set
        assert scan.violations > 0
        assert scan.fraction == scan.violations / scan.checks

    def test_sparse_profile_matches_brute_force(self):
        rng = np.random.default_rng(11)
        k = 4
        values = {
            sq: float(rng.uniform(0.5, 2.0)) * 4.0**-k
            for sq in enumerate_squares(UNIT, k)
            if rng.random() < 0.45
        }
        table = MeasureTable(scheme="box", kappa=6.0, k=k, window=UNIT, values=values)
        scan = volume_regularity_scan(table, (0.125,), a=0.25)
        checks, violations = brute_regularity(table, [0.125], 0.25, 0.125)
        assert (scan.checks, scan.violations) == (checks, violations)

    def test_empty_table(self):
        table = MeasureTable(scheme="box", kappa=6.0, k=4, window=UNIT, values={})
        scan = volume_regularity_scan(table, (0.125,), a=0.2)
        assert scan.checks == 0 and scan.violations == 0
        assert scan.fraction == 0.0

    def test_parameter_guards(self):
        table = MeasureTable(scheme="box", kappa=6.0, k=4, window=UNIT, values={})
        with pytest.raises(InvalidParameterError):
            volume_regularity_scan(table, (0.125,), a=0.0)
        with pytest.raises(InvalidParameterError):
            volume_regularity_scan(table, (0.125,), a=0.31)
        with pytest.raises(InvalidParameterError):
            volume_regularity_scan(table, (), a=0.2)
        with pytest.raises(InvalidParameterError, match="dyadic"):
            volume_regularity_scan(table, (0.3,), a=0.2)


class TestReports:
    def test_json_report_round_trip(self, tmp_path):
        fit = dimension_fit({k: 4.0**k for k in range(3, 9)}, trim=(0, 0), bootstrap=0)
        path = tmp_path / "report.json"
        payload = write_report(
            path,
            fit=fit,
            verdicts=[{"name": "demo", "passed": True}],
            inputs={"mask.cgmk": "a1b2c3d4:128"},
        )
        loaded = json.loads(path.read_text())
        assert loaded == json.loads(json.dumps(payload))
        assert loaded["fit"]["slope"] == 2.0
        assert loaded["fit"]["window"] == [3, 4, 5, 6, 7, 8]
        assert loaded["verdicts"][0]["passed"] is True
        assert loaded["inputs"]["mask.cgmk"].endswith(":128")

    def test_svg_plot_written(self, tmp_path):
        fit = dimension_fit({k: 4.0**k for k in range(3, 9)}, trim=(0, 0), bootstrap=0)
        path = tmp_path / "fit.svg"
        x = np.arange(3, 9, dtype=float)
        plot_fit_svg(path, x, 2.0 * x, fit, xlabel="k", ylabel="log2 count")
        text = path.read_text()
        assert "<svg" in text[:500]
        assert "log2 count" in text
