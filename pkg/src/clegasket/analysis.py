"""Statistical layer: slope fits, ratio diagnostics, moment and regularity
scans, JSON/SVG reporting.

All fits are ordinary least squares on (k, log2 value); nothing here invents
asymptotics.  Verdict thresholds are explicit arguments with the documented
defaults, reported alongside the data they judge.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from matplotlib.figure import Figure
from scipy import ndimage

from .errors import InvalidParameterError
from .grid import as_dyadic
from .measures import MeasureTable, d_cle

__all__ = [
    "MomentStability",
    "RatioSeries",
    "RegularityScan",
    "SlopeFit",
    "dimension_fit",
    "line_fit",
    "moment_stability",
    "one_arm_exponent_fit",
    "plot_fit_svg",
    "ratio_convergence",
    "volume_regularity_scan",
    "write_report",
]


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    se: float
    r2: float
    window: tuple
    method: str = "ols-log2"
    ci: tuple | None = None

    def __post_init__(self):
        if len(self.window) < 4:
            raise InvalidParameterError("fit window needs at least 4 points")
        if not self.se >= 0:
            raise InvalidParameterError("standard error must be nonnegative")


def line_fit(x, y) -> tuple[float, float, float, float]:
    """Least squares of y on x: (slope, intercept, slope se, r^2).

    Exact power-law inputs give zero residual, hence se = 0 and r^2 = 1.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 2 or len(y) != n:
        raise InvalidParameterError("need two equal-length samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise InvalidParameterError("degenerate abscissae")
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = yc - slope * xc
    ssr = float(resid @ resid)
    sst = float(yc @ yc)
    se = math.sqrt(ssr / (n - 2) / sxx) if n > 2 else 0.0
    r2 = 1.0 if sst == 0 else 1.0 - ssr / sst
    return slope, intercept, se, r2


def _as_replica_map(counts) -> dict[int, np.ndarray]:
    out = {}
    for k, v in counts.items():
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        out[int(k)] = arr
    return out


def dimension_fit(counts, trim=(2, 2), bootstrap: int = 1000,
                  seed: int = 0) -> SlopeFit:
    """Slope of log2(mean count) against level k; the slope estimates the
    mass dimension directly.

    ``counts`` maps k to a scalar count or an array of per-replica counts.
    Scales whose mean count is zero are dropped with a warning.  ``trim``
    then excludes that many of the (coarsest, finest) remaining scales:
    coarse scales see the window boundary, fine ones the representation
    resolution, and both contaminations are one-sided.  Pass (0, 0) to fit
    a window chosen by hand.  When every scale carries the same replica
    count, a bootstrap CI over joint replica resamples is attached
    (percentile 2.5/97.5, ``bootstrap`` resamples).
    """
    data = _as_replica_map(counts)
    ks = sorted(data)
    kept = []
    for k in ks:
        if data[k].mean() > 0:
            kept.append(k)
        else:
            warnings.warn(f"dropping scale k={k}: zero count", stacklevel=2)
    lo, hi = int(trim[0]), int(trim[1])
    if lo < 0 or hi < 0:
        raise InvalidParameterError("trim counts must be nonnegative")
    kept = kept[lo : len(kept) - hi if hi else len(kept)]
    if len(kept) < 4:
        raise InvalidParameterError(
            "need at least 4 scales with positive counts after trimming; "
            "pass trim=(0, 0) to keep every scale"
        )
    x = np.array(kept, dtype=float)
    y = np.log2([data[k].mean() for k in kept])
    slope, intercept, se, r2 = line_fit(x, y)
    ci = None
    widths = {len(data[k]) for k in kept}
    if bootstrap > 0 and len(widths) == 1 and widths.pop() > 1:
        reps = len(data[kept[0]])
        mat = np.vstack([data[k] for k in kept])  # (scales, reps)
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, reps, size=(bootstrap, reps))
        slopes = np.empty(bootstrap)
        xc = x - x.mean()
        sxx = float(xc @ xc)
        for b in range(bootstrap):
            yb = np.log2(mat[:, idx[b]].mean(axis=1))
            slopes[b] = float(xc @ (yb - yb.mean())) / sxx
        ci = (float(np.percentile(slopes, 2.5)), float(np.percentile(slopes, 97.5)))
    return SlopeFit(slope, intercept, se, r2, tuple(kept), ci=ci)


def one_arm_exponent_fit(result) -> SlopeFit:
    """Slope of log2(arm frequency) against log2(radius); radii with zero
    estimates are dropped with a warning.

    Accepts a percolation one-arm result object or a (radii, frequencies)
    pair.  Requires >= 4 surviving radii spanning >= 2 octaves.
    """
    if hasattr(result, "r") and hasattr(result, "p_hat"):
        r, p = np.asarray(result.r, float), np.asarray(result.p_hat, float)
    else:
        r, p = (np.asarray(a, dtype=float) for a in result)
    keep = p > 0
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} radii with zero arm frequency",
            stacklevel=2,
        )
    r, p = r[keep], p[keep]
    if len(r) < 4:
        raise InvalidParameterError("need at least 4 radii with positive estimates")
    if r.max() / r.min() < 4.0 * (1 - 1e-12):
        raise InvalidParameterError("radii must span at least 2 octaves")
    slope, intercept, se, r2 = line_fit(np.log2(r), np.log2(p))
    return SlopeFit(slope, intercept, se, r2, tuple(float(v) for v in r))


@dataclass(frozen=True)
class RatioSeries:
    """Per-scale medians of per-replica ratios between two schemes."""

    pair: tuple
    k_values: tuple
    medians: tuple
    dispersion: tuple  # CV across replicas per scale
    excluded: tuple  # scales dropped for zero denominators
    tail: int
    cov_tail: float
    trend_slope: float
    verdict: bool


def ratio_convergence(
    numer: dict,
    denom: dict,
    pair=("box2q", "box"),
    cov_tol: float = 0.1,
    slope_tol: float = 0.02,
    tail: int = 3,
) -> RatioSeries:
    """Per-replica ratios aggregated by median per scale, with a stability
    verdict over the finest ``tail`` scales: coefficient of variation of
    the tail medians within ``cov_tol`` and their log2 trend slope within
    ``slope_tol`` of flat.

    The limiting value itself is never asserted, only its stabilization.
    Stabilization is a tail property; coarse scales still converging do
    not count against it.  Scales where any denominator replica is zero
    are excluded and noted.
    """
    if tail < 2:
        raise InvalidParameterError("tail window needs at least 2 scales")
    a = _as_replica_map(numer)
    b = _as_replica_map(denom)
    common = sorted(set(a) & set(b))
    medians, dispersion, kept, excluded = [], [], [], []
    for k in common:
        if len(a[k]) != len(b[k]):
            raise InvalidParameterError(f"replica counts differ at k={k}")
        if (b[k] == 0).any():
            excluded.append(k)
            continue
        ratios = a[k] / b[k]
        if (ratios < 0).any():
            raise InvalidParameterError("ratios must be nonnegative")
        med = float(np.median(ratios))
        medians.append(med)
        dispersion.append(float(ratios.std() / ratios.mean()))
        kept.append(k)
    if len(kept) < max(4, tail):
        raise InvalidParameterError("need at least 4 usable common scales")
    tail_med = np.array(medians[-tail:])
    cov_tail = float(tail_med.std() / tail_med.mean())
    trend, *_ = line_fit(np.array(kept[-tail:], float), np.log2(tail_med))
    verdict = cov_tail <= cov_tol and abs(trend) <= slope_tol
    return RatioSeries(
        pair=tuple(pair),
        k_values=tuple(kept),
        medians=tuple(medians),
        dispersion=tuple(dispersion),
        excluded=tuple(excluded),
        tail=tail,
        cov_tail=cov_tail,
        trend_slope=float(trend),
        verdict=verdict,
    )


@dataclass(frozen=True)
class MomentStability:
    orders: tuple
    k_values: tuple
    moments: tuple  # moments[i][j]: order i+1 at scale k_values[j]
    spread: tuple  # max/min over scales per order
    threshold: float
    verdict: bool


def moment_stability(
    values: dict,
    orders=(1, 2, 3, 4),
    threshold: float = 10.0,
    min_reps: int = 100,
) -> MomentStability:
    """Empirical moments per scale; verdict PASS when every order <= 2
    moment varies across scales by at most ``threshold`` (max/min)."""
    data = _as_replica_map(values)
    for k, arr in data.items():
        if len(arr) < min_reps:
            raise InvalidParameterError(
                f"scale k={k} has {len(arr)} replicas, needs {min_reps}"
            )
    ks = sorted(data)
    if not ks:
        raise InvalidParameterError("no scales given")
    moments = []
    spread = []
    verdict = True
    for n in orders:
        row = [float(np.mean(data[k] ** n)) for k in ks]
        moments.append(tuple(row))
        lo, hi = min(row), max(row)
        ratio = math.inf if lo <= 0 else hi / lo
        spread.append(ratio)
        if n <= 2 and ratio > threshold:
            verdict = False
    return MomentStability(
        orders=tuple(orders),
        k_values=tuple(ks),
        moments=tuple(moments),
        spread=tuple(spread),
        threshold=threshold,
        verdict=verdict,
    )


@dataclass(frozen=True)
class RegularityScan:
    a: float
    radii: tuple
    margin: float
    checks: int
    violations: int
    by_radius: tuple  # ((r, checks, violations), ...)

    @property
    def fraction(self) -> float:
        return self.violations / self.checks if self.checks else 0.0


def _table_grid(table: MeasureTable) -> np.ndarray:
    m = 2 ** (table.k - table.window.k)
    grid = np.zeros((m, m))
    ox, oy = table.window.ix * m, table.window.iy * m
    for q, v in table.values.items():
        grid[q.iy - oy, q.ix - ox] = v
    return grid


def volume_regularity_scan(
    table: MeasureTable,
    radii,
    a: float,
    interior_margin: float | None = None,
) -> RegularityScan:
    """Check r^(d+a) <= mass(ball(z, r)) <= r^(d-a) at every occupied square
    center z, for each dyadic radius r.

    Ball mass sums table values over squares whose centers lie within r,
    via an exact disk convolution on the table's grid.  Centers within
    ``interior_margin`` (default: the largest radius) of the window edge are
    skipped: a ball must fit inside the window for its mass to mean anything.
    """
    if not 0.0 < a <= 0.3:
        raise InvalidParameterError("a must lie in (0, 0.3]")
    radii = sorted(float(r) for r in radii)
    if not radii:
        raise InvalidParameterError("no radii given")
    for r in radii:
        # every float is dyadic; capping the denominator rules out values
        # like 0.3 that are only dyadic by round-off
        if as_dyadic(r).denominator > 2**24:
            raise InvalidParameterError(f"radius {r!r} is not a clean dyadic")
    margin = radii[-1] if interior_margin is None else float(interior_margin)
    d = d_cle(table.kappa).d
    grid = _table_grid(table)
    m = grid.shape[0]
    side = float(table.window.side) / m
    occupied = grid > 0
    # interior restriction: square centers at least margin from the window
    # edge (dyadic coordinates, so the comparisons are float-exact)
    x0, y0 = float(table.window.x0), float(table.window.y0)
    w = float(table.window.side)
    cx = x0 + (np.arange(m) + 0.5) * side
    cy = y0 + (np.arange(m) + 0.5) * side
    in_x = (cx >= x0 + margin) & (cx <= x0 + w - margin)
    in_y = (cy >= y0 + margin) & (cy <= y0 + w - margin)
    usable = occupied & in_y[:, None] & in_x[None, :]
    checks = violations = 0
    by_radius = []
    offsets = np.arange(-m + 1, m)
    for r in radii:
        rc = r / side  # radius in cell units; centers differ by integers
        width = int(math.floor(rc))
        o = offsets[np.abs(offsets) <= width]
        kernel = (o[None, :] ** 2 + o[:, None] ** 2) <= rc * rc
        mass = ndimage.convolve(grid, kernel.astype(float), mode="constant")
        vals = mass[usable]
        lo, hi = r ** (d + a), r ** (d - a)
        bad = int(((vals < lo) | (vals > hi)).sum())
        checks += len(vals)
        violations += bad
        by_radius.append((r, int(len(vals)), bad))
    return RegularityScan(
        a=a,
        radii=tuple(radii),
        margin=margin,
        checks=checks,
        violations=violations,
        by_radius=tuple(by_radius),
    )


def write_report(path, fit: SlopeFit | None = None, verdicts=(), inputs=None,
                 extra=None) -> dict:
    """JSON report: fit summary, verdict list, input digests."""
    payload = {
        "fit": None
        if fit is None
        else {
            "slope": fit.slope,
            "se": fit.se,
            "r2": fit.r2,
            "window": list(fit.window),
            "intercept": fit.intercept,
            "ci": None if fit.ci is None else list(fit.ci),
        },
        "verdicts": list(verdicts),
        "inputs": dict(inputs or {}),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


def plot_fit_svg(path, x, y, fit: SlopeFit | None = None, xlabel="k",
                 ylabel="log2 value", title="") -> None:
    """Scatter of (x, y) with the fitted line overlaid, written as SVG."""
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ax.plot(x, y, "o", label="data")
    if fit is not None:
        xs = np.linspace(x.min(), x.max(), 64)
        ax.plot(xs, fit.slope * xs + fit.intercept,
                label=f"slope {fit.slope:.4f}")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.savefig(path, format="svg")
