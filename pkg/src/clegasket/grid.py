"""Exact dyadic-square geometry: square families, dilations, annuli, occupancy masks.

Coordinates of squares, rectangles, and annuli are dyadic rationals held as
``fractions.Fraction``, so tiling, rescaling, and containment checks are exact.
Squares and rectangles are half-open, ``[a, b)`` on both axes: every point of a
window lies in exactly one square per level and sibling counts add without
boundary ties.

Occupancy masks (`GasketMask`) store one bit per level-``k`` square inside a
bounding square.  Bits are a dense numpy array in memory; on disk the payload
switches to run-length encoding past depth ``MAX_DENSE_DEPTH``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import FormatError, InvalidLevelError, InvalidParameterError

__all__ = [
    "InvalidLevelError",
    "InvalidParameterError",
    "FormatError",
    "MAX_DENSE_DEPTH",
    "DyadicSquare",
    "Rect",
    "Annulus",
    "GasketMask",
    "enumerate_squares",
    "dilate",
    "annulus_of",
    "read_mask",
    "write_mask",
]

MAX_DENSE_DEPTH = 14

MASK_MAGIC = b"CGMK"
MASK_VERSION = 1


def as_dyadic(x) -> Fraction:
    """Coerce to an exact dyadic rational; reject anything else."""
    f = Fraction(x)
    d = f.denominator
    if d & (d - 1):
        raise InvalidParameterError(f"not a dyadic rational: {x!r}")
    return f


@dataclass(frozen=True, order=True)
class DyadicSquare:
    """Half-open square ``[ix/2^k, (ix+1)/2^k) x [iy/2^k, (iy+1)/2^k)``."""

    k: int
    ix: int
    iy: int

    def __post_init__(self):
        if self.k < 0:
            raise InvalidLevelError(f"negative level: {self.k}")

    @property
    def side(self) -> Fraction:
        return Fraction(1, 2**self.k)

    @property
    def x0(self) -> Fraction:
        return Fraction(self.ix, 2**self.k)

    @property
    def y0(self) -> Fraction:
        return Fraction(self.iy, 2**self.k)

    @property
    def center(self) -> tuple[Fraction, Fraction]:
        return (
            Fraction(2 * self.ix + 1, 2 ** (self.k + 1)),
            Fraction(2 * self.iy + 1, 2 ** (self.k + 1)),
        )

    def contains_point(self, x, y) -> bool:
        x, y = Fraction(x), Fraction(y)
        return self.x0 <= x < self.x0 + self.side and self.y0 <= y < self.y0 + self.side

    def contains_square(self, other: "DyadicSquare") -> bool:
        if other.k < self.k:
            return False
        shift = other.k - self.k
        return (other.ix >> shift) == self.ix and (other.iy >> shift) == self.iy

    def ancestor(self, j: int) -> "DyadicSquare":
        """Enclosing square at coarser level ``j <= k``."""
        if not 0 <= j <= self.k:
            raise InvalidLevelError(f"ancestor level {j} outside [0, {self.k}]")
        shift = self.k - j
        return DyadicSquare(j, self.ix >> shift, self.iy >> shift)

    def children(self) -> list["DyadicSquare"]:
        k, ix, iy = self.k + 1, 2 * self.ix, 2 * self.iy
        return [DyadicSquare(k, ix + dx, iy + dy) for dy in (0, 1) for dx in (0, 1)]

    def to_rect(self) -> "Rect":
        h = Fraction(1, 2 ** (self.k + 1))
        cx, cy = self.center
        return Rect(cx, cy, h, h)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned half-open rectangle given by center and half-widths."""

    cx: Fraction
    cy: Fraction
    hw: Fraction
    hh: Fraction

    def __post_init__(self):
        for name in ("cx", "cy", "hw", "hh"):
            object.__setattr__(self, name, Fraction(getattr(self, name)))
        if self.hw <= 0 or self.hh <= 0:
            raise InvalidParameterError("rectangle half-widths must be positive")

    @property
    def x0(self) -> Fraction:
        return self.cx - self.hw

    @property
    def x1(self) -> Fraction:
        return self.cx + self.hw

    @property
    def y0(self) -> Fraction:
        return self.cy - self.hh

    @property
    def y1(self) -> Fraction:
        return self.cy + self.hh

    def contains_point(self, x, y) -> bool:
        x, y = Fraction(x), Fraction(y)
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def contains_rect(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0
            and other.x1 <= self.x1
            and self.y0 <= other.y0
            and other.y1 <= self.y1
        )

    def intersection(self, other: "Rect") -> "Rect | None":
        x0, x1 = max(self.x0, other.x0), min(self.x1, other.x1)
        y0, y1 = max(self.y0, other.y0), min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect((x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2)


@dataclass(frozen=True)
class Annulus:
    """Region between two concentric rectangles: ``outer`` minus ``inner``."""

    outer: Rect
    inner: Rect

    def __post_init__(self):
        if not self.outer.contains_rect(self.inner):
            raise InvalidParameterError("inner rectangle must sit inside outer")

    def contains_point(self, x, y) -> bool:
        return self.outer.contains_point(x, y) and not self.inner.contains_point(x, y)

    def disjoint_from(self, other: "Annulus") -> bool:
        """Exact emptiness test for the intersection of two annular regions.

        The overlap of the outer rectangles is swept on the grid of all edge
        breakpoints; a cell survives only if it avoids both inner rectangles.
        Half-open semantics make each cell entirely in or out of every
        rectangle involved, so a single interior sample per cell is exact.
        """
        common = self.outer.intersection(other.outer)
        if common is None:
            return True
        xs = sorted(
            {
                v
                for v in (
                    common.x0, common.x1,
                    self.inner.x0, self.inner.x1,
                    other.inner.x0, other.inner.x1,
                )
                if common.x0 <= v <= common.x1
            }
        )
        ys = sorted(
            {
                v
                for v in (
                    common.y0, common.y1,
                    self.inner.y0, self.inner.y1,
                    other.inner.y0, other.inner.y1,
                )
                if common.y0 <= v <= common.y1
            }
        )
        for x0, x1 in zip(xs, xs[1:]):
            for y0, y1 in zip(ys, ys[1:]):
                mx, my = (x0 + x1) / 2, (y0 + y1) / 2
                if self.contains_point(mx, my) and other.contains_point(mx, my):
                    return False
        return True


def enumerate_squares(bounds: DyadicSquare, k: int) -> list[DyadicSquare]:
    """All level-``k`` squares inside ``bounds``, row-major (iy outer, ix inner)."""
    if k < bounds.k:
        raise InvalidLevelError(f"level {k} coarser than bounding square level {bounds.k}")
    m = 2 ** (k - bounds.k)
    bx, by = bounds.ix * m, bounds.iy * m
    return [DyadicSquare(k, bx + ix, by + iy) for iy in range(m) for ix in range(m)]


def dilate(square: DyadicSquare, lam) -> Rect:
    """Concentric rescaling ``lam * Q``: same center, side multiplied by ``lam``."""
    lam = as_dyadic(lam)
    if lam <= 0:
        raise InvalidParameterError(f"dilation factor must be positive, got {lam}")
    cx, cy = square.center
    h = lam * square.side / 2
    return Rect(cx, cy, h, h)


def annulus_of(square: DyadicSquare) -> Annulus:
    """Dyadic annulus around a square: its double minus its 3/2 dilation."""
    return Annulus(dilate(square, 2), dilate(square, Fraction(3, 2)))


class GasketMask:
    """One occupancy bit per level-``k`` square inside a bounding square.

    ``bits[r, c]`` covers the square with global indices
    ``(bounds.ix * 2^depth + c, bounds.iy * 2^depth + r)`` where
    ``depth = level - bounds.k``.  Treated as immutable after construction.
    """

    def __init__(self, bounds: DyadicSquare, level: int, bits: np.ndarray):
        if level < bounds.k:
            raise InvalidLevelError(
                f"mask level {level} coarser than bounding level {bounds.k}"
            )
        m = 2 ** (level - bounds.k)
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != (m, m):
            raise InvalidParameterError(
                f"bit array shape {bits.shape} does not match depth {level - bounds.k}"
            )
        self.bounds = bounds
        self.level = level
        self.bits = bits
        self.bits.setflags(write=False)

    @property
    def depth(self) -> int:
        return self.level - self.bounds.k

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def fraction(self) -> float:
        return self.popcount / self.bits.size

    def get(self, ix: int, iy: int) -> bool:
        """Bit of the level-``level`` square with global indices (ix, iy)."""
        m = self.bits.shape[0]
        c = ix - self.bounds.ix * m
        r = iy - self.bounds.iy * m
        if not (0 <= c < m and 0 <= r < m):
            raise InvalidParameterError(f"square ({ix}, {iy}) outside mask bounds")
        return bool(self.bits[r, c])

    def occupied_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Global (ix, iy) index arrays of all set bits."""
        r, c = np.nonzero(self.bits)
        m = self.bits.shape[0]
        return c + self.bounds.ix * m, r + self.bounds.iy * m

    def cell_centers(self) -> np.ndarray:
        """Centers of occupied squares as an (n, 2) float array."""
        ix, iy = self.occupied_indices()
        s = 0.5 ** self.level
        return np.column_stack(((ix + 0.5) * s, (iy + 0.5) * s))

    def downsample(self, j: int) -> "GasketMask":
        """Coarsen to level ``j`` by OR-reducing 2x2 blocks."""
        if not self.bounds.k <= j <= self.level:
            raise InvalidLevelError(
                f"target level {j} outside [{self.bounds.k}, {self.level}]"
            )
        bits = self.bits
        for _ in range(self.level - j):
            m = bits.shape[0] // 2
            bits = bits.reshape(m, 2, m, 2).any(axis=(1, 3))
        return GasketMask(self.bounds, j, bits)

    def rescale(self, j: int) -> "GasketMask":
        """Exact dyadic shrink by 2^-j: identical bits, all levels deepened by j.

        Requires the bounding square to shrink onto the dyadic grid, which
        holds for every bounding square since indices carry over unchanged.
        """
        if j < 0:
            raise InvalidLevelError("rescale exponent must be nonnegative")
        b = self.bounds
        return GasketMask(DyadicSquare(b.k + j, b.ix, b.iy), self.level + j, self.bits)

    @classmethod
    def zeros(cls, bounds: DyadicSquare, level: int) -> "GasketMask":
        m = 2 ** (level - bounds.k)
        return cls(bounds, level, np.zeros((m, m), dtype=bool))

    @classmethod
    def full(cls, bounds: DyadicSquare, level: int) -> "GasketMask":
        m = 2 ** (level - bounds.k)
        return cls(bounds, level, np.ones((m, m), dtype=bool))

    @classmethod
    def from_points(cls, points: np.ndarray, bounds: DyadicSquare, level: int) -> "GasketMask":
        """Mark every level square containing at least one of the points.

        Points outside the bounding square are ignored.  Binning is half-open,
        matching square semantics.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        m = 2 ** (level - bounds.k)
        scale = float(2**level)
        c = np.floor(points[:, 0] * scale).astype(np.int64) - bounds.ix * m
        r = np.floor(points[:, 1] * scale).astype(np.int64) - bounds.iy * m
        keep = (c >= 0) & (c < m) & (r >= 0) & (r < m)
        bits = np.zeros((m, m), dtype=bool)
        bits[r[keep], c[keep]] = True
        return cls(bounds, level, bits)


def _encode_rle(flat: np.ndarray) -> bytes:
    """Run lengths over the flat bit sequence, alternating and zero-first."""
    runs = []
    change = np.flatnonzero(np.diff(flat))
    edges = np.concatenate(([0], change + 1, [flat.size]))
    lengths = np.diff(edges)
    if flat.size and flat[0]:
        runs.append(0)
    runs.extend(int(v) for v in lengths)
    out = bytearray()
    for r in runs:
        while r > 0xFFFFFFFF:
            # u32 ceiling: emit a max run and a zero-length run of the other bit
            out += struct.pack("<II", 0xFFFFFFFF, 0)
            r -= 0xFFFFFFFF
        out += struct.pack("<I", r)
    return bytes(out)


def _decode_rle(payload: bytes, nbits: int) -> np.ndarray:
    if len(payload) % 4:
        raise FormatError("run-length payload not a multiple of 4 bytes")
    runs = np.frombuffer(payload, dtype="<u4")
    flat = np.zeros(nbits, dtype=bool)
    pos, bit = 0, False
    for r in runs:
        end = pos + int(r)
        if end > nbits:
            raise FormatError("run-length payload overruns mask size")
        if bit:
            flat[pos:end] = True
        pos, bit = end, not bit
    if pos != nbits:
        raise FormatError("run-length payload does not cover mask size")
    return flat


def write_mask(mask: GasketMask, path, dense: bool | None = None) -> None:
    """Serialize a mask: magic, version, levels, payload flag, payload, CRC32.

    Payload is the row-major bit sequence, either packed 8-per-byte LSB-first
    (flag 0) or run-length encoded as alternating little-endian u32 counts
    starting with a zero run (flag 1).  Dense is the default up to depth 14.
    """
    if dense is None:
        dense = mask.depth <= MAX_DENSE_DEPTH
    flat = mask.bits.reshape(-1)
    if dense:
        flag, payload = 0, np.packbits(flat, bitorder="little").tobytes()
    else:
        flag, payload = 1, _encode_rle(flat)
    header = MASK_MAGIC + struct.pack(
        "<BBiiiB",
        MASK_VERSION,
        mask.level,
        mask.bounds.k,
        mask.bounds.ix,
        mask.bounds.iy,
        flag,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_mask(path) -> GasketMask:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MASK_MAGIC:
        raise FormatError("bad magic, not a mask file")
    version, level, k0, ix, iy, flag = struct.unpack_from("<BBiiiB", blob, 4)
    if version != MASK_VERSION:
        raise FormatError(f"unsupported mask version {version}")
    body = 4 + struct.calcsize("<BBiiiB")
    payload, (crc,) = blob[body:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("mask payload CRC mismatch")
    bounds = DyadicSquare(k0, ix, iy)
    m = 2 ** (level - k0)
    nbits = m * m
    if flag == 0:
        if len(payload) != (nbits + 7) // 8:
            raise FormatError("dense payload length mismatch")
        flat = np.unpackbits(
            np.frombuffer(payload, dtype=np.uint8), bitorder="little"
        )[:nbits].astype(bool)
    elif flag == 1:
        flat = _decode_rle(payload, nbits)
    else:
        raise FormatError(f"unknown payload flag {flag}")
    return GasketMask(bounds, level, flat.reshape(m, m))
