"""Renormalized gasket-measure estimators over dyadic windows.

Three interchangeable estimators of the gasket measure at level ``k``:
counting hit squares, counting squares whose doubled square is hit, and
the tube-area (Minkowski) estimator.  The two counting schemes satisfy
exact scaling and additivity identities which are verified through
integer counts, so the corresponding residuals are literally zero rather
than merely small.

Every estimator is a pure function of the *representation* (a fine
occupancy mask or an explicit point set); the fineness preconditions
bound the gap to the idealized set being represented.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    AccuracyWarning,
    InvalidLevelError,
    InvalidParameterError,
    MarginError,
    ResolutionError,
)
from .grid import DyadicSquare, GasketMask, enumerate_squares

__all__ = [
    "DEFAULT_SUPERSAMPLE",
    "Exponent",
    "GasketRep",
    "MeasureTable",
    "MIN_REP_MARGIN",
    "SCHEMES",
    "additivity_defect",
    "box_count",
    "box_count_2q",
    "box_count_2q_raw",
    "box_count_raw",
    "d_cle",
    "edge_band",
    "minkowski_content",
    "read_table_csv",
    "renorm_factor",
    "scaling_check",
    "tabulate",
    "write_table_csv",
]

# A mask must be at least this many levels finer than any query level.
MIN_REP_MARGIN = 4

DEFAULT_SUPERSAMPLE = 8

# Pixels whose center-to-seed-pixel-center distance is within this cushion of
# the disk radius get an exact point-distance check; a seed point sits at most
# h*sqrt(2)/2 from its pixel center, so 0.75 px is a safe certificate.
EDT_CUSHION = 0.75

SCHEMES = ("box", "box2q", "minkowski", "sites")


@dataclass(frozen=True)
class Exponent:
    """Gasket dimension for one kappa, cross-checked between closed forms."""

    kappa: float
    d: float


@lru_cache(maxsize=None)
def _d_cle_cached(kappa: float) -> Exponent:
    q = Fraction(kappa)
    if not Fraction(8, 3) < q < 8:
        raise InvalidParameterError(f"kappa {kappa} outside (8/3, 8)")
    direct = 1 + 2 / q + 3 * q / 32
    complement = 2 - (8 - q) * (3 * q - 8) / (32 * q)
    if abs(direct - complement) > Fraction(1, 10**12):
        raise InvalidParameterError(f"dimension forms disagree at kappa {kappa}")
    return Exponent(float(kappa), float(direct))


def d_cle(kappa) -> Exponent:
    """Gasket dimension 1 + 2/kappa + 3*kappa/32 for kappa in (8/3, 8).

    Both published closed forms are evaluated in exact rational arithmetic
    and compared; the result is cached per kappa.
    """
    return _d_cle_cached(float(kappa))


def renorm_factor(kappa, k: int) -> float:
    """Mass of one counted level-k square: 2^(-d*k)."""
    return 2.0 ** (-d_cle(kappa).d * k)


@dataclass(frozen=True)
class GasketRep:
    """A finite stand-in for the gasket: fine mask or point set, plus window.

    Exactly one of ``mask`` / ``points`` is set.  Points are absolute
    coordinates; any point outside the window is discarded at construction
    since no query can see it.
    """

    window: DyadicSquare
    mask: GasketMask | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        if (self.mask is None) == (self.points is None):
            raise InvalidParameterError("exactly one of mask/points required")
        if self.mask is not None and self.mask.bounds != self.window:
            raise MarginError("mask bounds must coincide with the window")
        if self.points is not None:
            pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
            x0, x1 = float(self.window.x0), float(self.window.x0 + self.window.side)
            y0, y1 = float(self.window.y0), float(self.window.y0 + self.window.side)
            keep = (
                (pts[:, 0] >= x0) & (pts[:, 0] < x1)
                & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
            )
            object.__setattr__(self, "points", pts[keep])

    @classmethod
    def from_mask(cls, mask: GasketMask) -> "GasketRep":
        return cls(window=mask.bounds, mask=mask)

    @classmethod
    def from_points(cls, points, window: DyadicSquare) -> "GasketRep":
        return cls(window=window, points=points)

    @property
    def level(self) -> int | None:
        return None if self.mask is None else self.mask.level

    def is_empty(self) -> bool:
        if self.mask is not None:
            return self.mask.popcount == 0
        return len(self.points) == 0

    def rescaled(self, j: int) -> "GasketRep":
        """Exact dyadic shrink by 2^-j toward the origin."""
        if j < 0:
            raise InvalidLevelError("rescale exponent must be nonnegative")
        w = self.window
        w2 = DyadicSquare(w.k + j, w.ix, w.iy)
        if self.mask is not None:
            return GasketRep(window=w2, mask=self.mask.rescale(j))
        return GasketRep(window=w2, points=self.points / 2.0**j)


def _check_query(rep: GasketRep, B: DyadicSquare, k: int) -> None:
    if not rep.window.contains_square(B):
        raise InvalidParameterError("query square outside the window")
    if k < B.k:
        raise InvalidLevelError(f"level {k} coarser than the query square ({B.k})")
    if rep.mask is not None and rep.mask.level < k + MIN_REP_MARGIN:
        raise ResolutionError(
            f"mask level {rep.mask.level} too coarse for level-{k} queries "
            f"(needs {k + MIN_REP_MARGIN})"
        )


def _level_grid(rep: GasketRep, k: int) -> np.ndarray:
    """Window-local occupancy of level-k squares, [row=iy offset, col=ix offset]."""
    if rep.mask is not None:
        return rep.mask.downsample(k).bits
    return GasketMask.from_points(rep.points, rep.window, k).bits


def _local_slice(window: DyadicSquare, B: DyadicSquare, k: int):
    m = 2 ** (k - B.k)
    c0 = B.ix * m - window.ix * 2 ** (k - window.k)
    r0 = B.iy * m - window.iy * 2 ** (k - window.k)
    return slice(r0, r0 + m), slice(c0, c0 + m)


def box_count_raw(rep: GasketRep, B: DyadicSquare, k: int) -> int:
    """Number of level-k squares inside B meeting the representation."""
    _check_query(rep, B, k)
    grid = _level_grid(rep, k)
    rs, cs = _local_slice(rep.window, B, k)
    return int(grid[rs, cs].sum())


def box_count(rep: GasketRep, B: DyadicSquare, k: int, kappa=6.0) -> float:
    """Level-k square-count estimator on B: 2^(-d*k) * #hit squares."""
    return box_count_raw(rep, B, k) * renorm_factor(kappa, k)


def _prefix_sum(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(grid, axis=0, dtype=np.int64), axis=1, out=s[1:, 1:])
    return s


def _doubled_hits(rep: GasketRep, k: int) -> np.ndarray:
    """Window-local grid: does the doubled (closed) square of each level-k
    square meet the representation?  Data beyond the window cannot exist, so
    the doubled square is clipped to it; callers drop the edge band where the
    clipping bites."""
    m = 2 ** (k - rep.window.k)
    if rep.points is not None:
        hits = np.zeros((m, m), dtype=bool)
        if len(rep.points):
            scale = float(2**k)
            tx = rep.points[:, 0] * scale - rep.window.ix * m
            ty = rep.points[:, 1] * scale - rep.window.iy * m
            # point in closed 2Q  <=>  |t - (u + 1/2)| <= 1 per axis
            lx = np.maximum(np.ceil(tx - 1.5).astype(np.int64), 0)
            hx = np.minimum(np.floor(tx + 0.5).astype(np.int64), m - 1)
            ly = np.maximum(np.ceil(ty - 1.5).astype(np.int64), 0)
            hy = np.minimum(np.floor(ty + 0.5).astype(np.int64), m - 1)
            for a, b, c, d in zip(ly, hy, lx, hx):
                if a <= b and c <= d:
                    hits[a : b + 1, c : d + 1] = True
        return hits
    fine = rep.mask.bits
    nf = fine.shape[0]
    s = _prefix_sum(fine)
    c2 = 2 ** (rep.mask.level - k - 1)
    u = np.arange(m, dtype=np.int64)
    lo = np.clip((2 * u - 1) * c2, 0, nf)
    hi = np.clip((2 * u + 3) * c2 + 1, 0, nf)  # closed edge: one extra fine cell
    counts = (
        s[np.ix_(hi, hi)] - s[np.ix_(lo, hi)] - s[np.ix_(hi, lo)] + s[np.ix_(lo, lo)]
    )
    return counts > 0


def edge_band(window: DyadicSquare, k: int) -> np.ndarray:
    """Window-local bool grid marking level-k squares whose doubled square
    pokes out of the window.  Such squares are still counted (nothing can
    live beyond the window), but tables report them for transparency."""
    m = 2 ** (k - window.k)
    band = np.zeros((m, m), dtype=bool)
    band[0, :] = band[-1, :] = True
    band[:, 0] = band[:, -1] = True
    return band


def box_count_2q_raw(rep: GasketRep, B: DyadicSquare, k: int) -> int:
    """Number of level-k squares inside B whose doubled (closed) square meets
    the representation.  Doubled squares are clipped to the window, which is
    exact because the representation never extends beyond it."""
    _check_query(rep, B, k)
    hits = _doubled_hits(rep, k)
    rs, cs = _local_slice(rep.window, B, k)
    return int(hits[rs, cs].sum())


def box_count_2q(rep: GasketRep, B: DyadicSquare, k: int, kappa=6.0) -> float:
    """Doubled-square count estimator on B; dominates :func:`box_count`."""
    return box_count_2q_raw(rep, B, k) * renorm_factor(kappa, k)


def _seed_points(rep: GasketRep, B: DyadicSquare) -> np.ndarray:
    """Representative points of the representation restricted to B."""
    if rep.points is not None:
        pts = rep.points
        x0, x1 = float(B.x0), float(B.x0 + B.side)
        y0, y1 = float(B.y0), float(B.y0 + B.side)
        keep = (
            (pts[:, 0] >= x0) & (pts[:, 0] < x1)
            & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
        )
        return pts[keep]
    # Dyadic nesting: every fine cell is inside or outside B, never astride.
    rs, cs = _local_slice(rep.window, B, rep.mask.level)
    sub = rep.mask.bits[rs, cs]
    r, c = np.nonzero(sub)
    side = 0.5**rep.mask.level
    x = (cs.start + c + rep.window.ix * 2**rep.mask.depth + 0.5) * side
    y = (rs.start + r + rep.window.iy * 2**rep.mask.depth + 0.5) * side
    return np.column_stack((x, y))


def minkowski_content(
    rep: GasketRep,
    B: DyadicSquare,
    delta: float,
    supersample: int = DEFAULT_SUPERSAMPLE,
    kappa=6.0,
) -> float:
    """Tube estimator: delta^(d-2) * area of the delta-neighborhood of the
    representation restricted to B.

    The area is a pixel count at pitch delta/supersample: a pixel is covered
    when its center lies within delta of a seed point.  A distance transform
    on the seed-pixel grid certifies pixels far from the radius; only the
    remaining boundary band is checked against exact seed distances, so the
    disk boundary is not quantized to the grid.
    """
    if delta <= 0:
        raise InvalidParameterError("delta must be positive")
    if supersample < 1:
        raise InvalidParameterError("supersample must be at least 1")
    if not rep.window.contains_square(B):
        raise InvalidParameterError("query square outside the window")
    if supersample < 4:
        warnings.warn(
            f"supersample {supersample} below 4 pixels per delta", AccuracyWarning
        )
    h = delta / supersample
    if rep.mask is not None and 0.5**rep.mask.level > h:
        raise ResolutionError("mask cells coarser than the pixel pitch")
    seeds = _seed_points(rep, B)
    if len(seeds) == 0:
        return 0.0
    a0 = math.floor((float(B.x0) - delta) / h) - 1
    b0 = math.floor((float(B.y0) - delta) / h) - 1
    a1 = math.ceil((float(B.x0 + B.side) + delta) / h) + 1
    b1 = math.ceil((float(B.y0 + B.side) + delta) / h) + 1
    grid = np.zeros((b1 - b0, a1 - a0), dtype=bool)
    ax = np.floor(seeds[:, 0] / h).astype(np.int64) - a0
    ay = np.floor(seeds[:, 1] / h).astype(np.int64) - b0
    grid[ay, ax] = True
    dist = ndimage.distance_transform_edt(~grid)
    covered = int((dist <= supersample - EDT_CUSHION).sum())
    band = (dist > supersample - EDT_CUSHION) & (dist <= supersample + EDT_CUSHION)
    if band.any():
        by, bx = np.nonzero(band)
        centers = np.column_stack(((bx + a0 + 0.5) * h, (by + b0 + 0.5) * h))
        tree = cKDTree(seeds)
        near, _ = tree.query(centers, k=1, distance_upper_bound=delta * (1 + 1e-12))
        covered += int(np.isfinite(near).sum())
    d = d_cle(kappa).d
    return delta ** (d - 2.0) * covered * h * h


def scaling_check(
    rep: GasketRep,
    B: DyadicSquare,
    j: int,
    k: int,
    scheme: str = "box",
    kappa=6.0,
    delta: float | None = None,
    supersample: int = DEFAULT_SUPERSAMPLE,
) -> float:
    """Residual of the scale identity: shrink everything by 2^-j, measure at
    level j+k, and compare with 2^(-j*d) times the level-k value.

    Counting schemes compare integer counts against a single shared
    normalizer, so their residual is exactly 0.0; the tube scheme's residual
    reflects its pixel grid and is returned as a float.
    """
    if j < 1:
        raise InvalidParameterError("scale exponent j must be >= 1")
    rep2 = rep.rescaled(j)
    B2 = DyadicSquare(B.k + j, B.ix, B.iy)
    if scheme == "box":
        n1 = box_count_raw(rep2, B2, j + k)
        n0 = box_count_raw(rep, B, k)
        return (n1 - n0) * renorm_factor(kappa, j + k)
    if scheme == "box2q":
        n1 = box_count_2q_raw(rep2, B2, j + k)
        n0 = box_count_2q_raw(rep, B, k)
        return (n1 - n0) * renorm_factor(kappa, j + k)
    if scheme == "minkowski":
        dlt = 0.5**k if delta is None else delta
        v1 = minkowski_content(rep2, B2, dlt / 2**j, supersample, kappa)
        v0 = minkowski_content(rep, B, dlt, supersample, kappa)
        return v1 - 2.0 ** (-j * d_cle(kappa).d) * v0
    raise InvalidParameterError(f"unknown scheme {scheme!r}")


def additivity_defect(
    rep: GasketRep,
    B: DyadicSquare,
    j: int,
    k: int,
    scheme: str = "box",
    kappa=6.0,
    delta: float | None = None,
    supersample: int = DEFAULT_SUPERSAMPLE,
) -> float:
    """|sum over level-j squares inside B of the level-k value - value on B|.

    Zero exactly for the counting schemes (their level-k squares partition by
    level-j parent); the tube scheme overlaps across parent boundaries and
    returns the resulting defect.
    """
    if not B.k <= j <= k:
        raise InvalidLevelError(f"need {B.k} <= j <= {k}, got j={j}")
    subs = enumerate_squares(B, j)
    if scheme in ("box", "box2q"):
        raw = box_count_raw if scheme == "box" else box_count_2q_raw
        parts = sum(raw(rep, Q, k) for Q in subs)
        return abs(parts - raw(rep, B, k)) * renorm_factor(kappa, k)
    if scheme == "minkowski":
        dlt = 0.5**k if delta is None else delta
        parts = sum(minkowski_content(rep, Q, dlt, supersample, kappa) for Q in subs)
        return abs(parts - minkowski_content(rep, B, dlt, supersample, kappa))
    raise InvalidParameterError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class MeasureTable:
    """Per-square values of one estimator at one level.

    ``values`` omits zero entries.  For counting schemes ``counts`` holds the
    integer multiples of 2^(-d*k) behind each value.  ``clipped`` lists the
    squares whose doubled square was clipped to the window under the
    doubled-square scheme (still counted, reported for transparency).
    """

    scheme: str
    kappa: float
    k: int
    window: DyadicSquare
    values: dict
    counts: dict | None = None
    clipped: tuple = ()
    accuracy_warning: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"unknown scheme {self.scheme!r}")
        for v in self.values.values():
            if not (math.isfinite(v) and v >= 0):
                raise InvalidParameterError("table values must be finite and >= 0")

    def total(self) -> float:
        return float(sum(self.values.values()))


def _grid_table(rep, k, grid, kappa, scheme, clipped=()):
    norm = renorm_factor(kappa, k)
    m = grid.shape[0]
    ox = rep.window.ix * m
    oy = rep.window.iy * m
    r, c = np.nonzero(grid)
    values, counts = {}, {}
    for rr, cc in zip(r.tolist(), c.tolist()):
        q = DyadicSquare(k, ox + cc, oy + rr)
        values[q] = norm
        counts[q] = 1
    return MeasureTable(
        scheme=scheme,
        kappa=float(kappa),
        k=k,
        window=rep.window,
        values=values,
        counts=counts,
        clipped=clipped,
    )


def tabulate(
    rep: GasketRep,
    k: int,
    scheme: str = "box",
    kappa=6.0,
    delta: float | None = None,
    supersample: int = DEFAULT_SUPERSAMPLE,
) -> MeasureTable:
    """Full per-square table of one estimator over the window at level k."""
    _check_query(rep, rep.window, k)
    if scheme == "box":
        return _grid_table(rep, k, _level_grid(rep, k), kappa, scheme)
    if scheme == "box2q":
        band = edge_band(rep.window, k)
        hits = _doubled_hits(rep, k)
        m = band.shape[0]
        ox, oy = rep.window.ix * m, rep.window.iy * m
        r, c = np.nonzero(band)
        clipped = tuple(
            DyadicSquare(k, ox + cc, oy + rr)
            for rr, cc in zip(r.tolist(), c.tolist())
        )
        return _grid_table(rep, k, hits, kappa, scheme, clipped)
    if scheme == "minkowski":
        dlt = 0.5**k if delta is None else delta
        values = {}
        with warnings.catch_warnings():
            if supersample < 4:
                warnings.simplefilter("ignore", AccuracyWarning)
            for q in enumerate_squares(rep.window, k):
                v = minkowski_content(rep, q, dlt, supersample, kappa)
                if v:
                    values[q] = v
        return MeasureTable(
            scheme=scheme,
            kappa=float(kappa),
            k=k,
            window=rep.window,
            values=values,
            accuracy_warning=supersample < 4,
        )
    raise InvalidParameterError(f"unknown scheme {scheme!r}")


CSV_HEADER = ["scheme", "kappa", "k", "square_level", "ix", "iy", "value"]


def write_table_csv(table: MeasureTable, path) -> None:
    """Export a table, one square per row, values at 17 significant digits."""
    rows = sorted(table.values.items(), key=lambda kv: (kv[0].iy, kv[0].ix))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for q, v in rows:
            out.writerow(
                [table.scheme, f"{table.kappa:.17g}", table.k, q.k, q.ix, q.iy,
                 f"{v:.17g}"]
            )


def read_table_csv(path) -> list[tuple[str, float, int, DyadicSquare, float]]:
    """Rows of an exported table: (scheme, kappa, k, square, value)."""
    rows = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != CSV_HEADER:
            raise InvalidParameterError(f"unexpected header {header!r}")
        for rec in rd:
            scheme, kappa, k, qk, ix, iy, v = rec
            rows.append(
                (scheme, float(kappa), int(k),
                 DyadicSquare(int(qk), int(ix), int(iy)), float(v))
            )
    return rows
