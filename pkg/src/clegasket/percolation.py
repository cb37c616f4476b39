"""Critical site percolation on the triangular lattice.

Sites live on an n x n rhombus indexed (q, r) with the six-neighbor
stencil E, W, N, S, NE, SW = (+-1,0), (0,+-1), (+1,+1), (-1,-1); the
matching unit-distance embedding is (q - r/2, r*sqrt(3)/2).  For dyadic
bookkeeping the rhombus is registered onto the unit square by the shear
that sends site (q, r) to ((q+1/2)/n, (r+1/2)/n); the shear affects
constants, never exponents.

Interfaces live on the dual hexagonal lattice: dual vertices are the
triangle circumcenters, and each open/closed lattice edge crosses exactly
one dual edge.  With the boundary ring forced open, the complement of the
boundary cluster splits into chunks, each wrapped by exactly one outermost
interface loop.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    FormatError,
    InvalidParameterError,
    MissingBoundaryError,
    ResolutionError,
    UnsupportedParameterError,
)
from .grid import DyadicSquare
from .loops import LoopRecord, signed_area
from .measures import MeasureTable, d_cle

__all__ = [
    "ClusterSet",
    "InterfaceSet",
    "OneArmResult",
    "SHEAR_MATRIX",
    "SiteConfig",
    "boundary_cluster",
    "chunk_decomposition",
    "cluster_labels",
    "counting_measure",
    "has_open_crossing",
    "one_arm_probability",
    "read_config",
    "sample_config",
    "site_centers_unit",
    "trace_interfaces",
    "write_config",
]

# Neighbor offsets (dq, dr) and the matching connected-components structure
# indexed [1 + dr, 1 + dq].
NEIGHBOR_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1))
_STRUCTURE = np.array(
    [[1, 1, 0],
     [1, 1, 1],
     [0, 1, 1]], dtype=bool
)

# Columns of the embedding (q, r) -> (q - r/2, r*sqrt(3)/2); recorded in run
# manifests so the unit-square registration's distortion is documented.
SHEAR_MATRIX = ((1.0, -0.5), (0.0, math.sqrt(3.0) / 2.0))

GEOMETRIES = ("rhombus", "hexagon")
BOUNDARIES = ("open", "free")


@dataclass(frozen=True)
class SiteConfig:
    """One sampled configuration; ``bits[r, q]`` is True when site (q, r) is
    open."""

    n: int
    p: float
    seed: int
    replica: int
    boundary: str
    geometry: str
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.n, self.n):
            raise InvalidParameterError("bits must be n x n")
        object.__setattr__(self, "bits", bits)
        bits.setflags(write=False)


@dataclass(frozen=True)
class ClusterSet:
    """Connected components under the six-neighbor stencil.

    ``labels`` is 0 on sites outside the clustered phase; ``boundary_label``
    is the label of the cluster containing the open boundary ring when the
    decomposition was built from one.
    """

    labels: np.ndarray
    count: int
    boundary_label: int | None = None

    def sizes(self) -> np.ndarray:
        """Site count per label, index 0 = unclustered phase."""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)


def _ring_mask(n: int) -> np.ndarray:
    ring = np.zeros((n, n), dtype=bool)
    ring[0, :] = ring[-1, :] = True
    ring[:, 0] = ring[:, -1] = True
    return ring


def sample_config(
    n: int,
    p: float,
    seed: int,
    replica: int = 0,
    boundary: str = "open",
    geometry: str = "rhombus",
) -> SiteConfig:
    """Draw iid site states from a counter-based stream keyed (seed, replica);
    the stream position supplies the per-site index.  With ``boundary="open"``
    the outer ring is forced open after sampling."""
    if n < 2:
        raise InvalidParameterError("n must be at least 2")
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError("p must lie in [0, 1]")
    if boundary not in BOUNDARIES:
        raise InvalidParameterError(f"unknown boundary {boundary!r}")
    if geometry not in GEOMETRIES:
        raise InvalidParameterError(f"unknown geometry {geometry!r}")
    if geometry == "hexagon":
        raise UnsupportedParameterError("hexagon windows are not implemented")
    rng = np.random.Generator(np.random.Philox(key=[seed, replica]))
    bits = rng.random((n, n)) < p
    if boundary == "open":
        bits |= _ring_mask(n)
    return SiteConfig(n, p, seed, replica, boundary, geometry, bits)


def cluster_labels(cfg: SiteConfig, phase: bool = True) -> ClusterSet:
    """Components of the open (or closed) sites."""
    target = cfg.bits if phase else ~cfg.bits
    labels, count = ndimage.label(target, structure=_STRUCTURE)
    return ClusterSet(labels.astype(np.int32), int(count))


def boundary_cluster(cfg: SiteConfig) -> ClusterSet:
    """Open clusters plus the label of the one containing the boundary ring.

    The ring is itself connected, so any all-open ring yields a single
    boundary label; a configuration without one is rejected.
    """
    ring = _ring_mask(cfg.n)
    if not cfg.bits[ring].all():
        raise MissingBoundaryError("boundary ring is not fully open")
    cs = cluster_labels(cfg, True)
    return ClusterSet(cs.labels, cs.count, int(cs.labels[0, 0]))


def chunk_decomposition(cfg: SiteConfig) -> tuple[np.ndarray, int, ClusterSet]:
    """Split the complement of the boundary cluster into connected chunks.

    Returns (chunk labels, chunk count, boundary ClusterSet).  Every site is
    either in the boundary cluster or in exactly one chunk, which is the
    partition the outermost interface loops induce.
    """
    bc = boundary_cluster(cfg)
    comp = bc.labels != bc.boundary_label
    chunk_labels, count = ndimage.label(comp, structure=_STRUCTURE)
    return chunk_labels.astype(np.int32), int(count), bc


# Dual-lattice bookkeeping.  Triangles: up (q,r) = sites {(q,r), (q+1,r),
# (q+1,r+1)}, down (q,r) = {(q,r), (q+1,r+1), (q,r+1)}.  Each lattice edge
# lies in exactly two triangles:
#   E : (q,r)-(q+1,r)    in up(q,r)   and down(q,r-1)
#   N : (q,r)-(q,r+1)    in down(q,r) and up(q-1,r)
#   NE: (q,r)-(q+1,r+1)  in up(q,r)   and down(q,r)
# Centroids in (q, r) coordinates: up (q+2/3, r+1/3), down (q+1/3, r+2/3).


def _tri_id(q: np.ndarray, r: np.ndarray, down, n: int) -> np.ndarray:
    w = n + 2
    return ((r + 1) * w + (q + 1)) * 2 + down


def _tri_coords(tid: np.ndarray, n: int) -> np.ndarray:
    w = n + 2
    down = tid % 2
    cell = tid // 2
    q = cell % w - 1
    r = cell // w - 1
    cq = q + np.where(down, 1.0 / 3.0, 2.0 / 3.0)
    cr = r + np.where(down, 2.0 / 3.0, 1.0 / 3.0)
    # unit-square registration: (q, r) -> ((q + 1/2)/n, (r + 1/2)/n)
    return np.column_stack(((cq + 0.5) / n, (cr + 0.5) / n))


def _interface_dual_edges(inside: np.ndarray, outside: np.ndarray, n: int):
    """Dual edges crossed by lattice edges between ``inside`` and ``outside``
    sites, as (tri_id_a, tri_id_b) arrays."""
    edges_a, edges_b = [], []

    def emit(mask_pairs, tri_a, tri_b):
        r, q = np.nonzero(mask_pairs)
        if len(r):
            edges_a.append(tri_a(q, r))
            edges_b.append(tri_b(q, r))

    b = inside
    o = outside
    # E edges between (q,r) and (q+1,r), either direction of membership
    east = (b[:, :-1] & o[:, 1:]) | (o[:, :-1] & b[:, 1:])
    emit(east, lambda q, r: _tri_id(q, r, 0, n), lambda q, r: _tri_id(q, r - 1, 1, n))
    # N edges between (q,r) and (q,r+1)
    north = (b[:-1, :] & o[1:, :]) | (o[:-1, :] & b[1:, :])
    emit(north, lambda q, r: _tri_id(q, r, 1, n), lambda q, r: _tri_id(q - 1, r, 0, n))
    # NE edges between (q,r) and (q+1,r+1)
    ne = (b[:-1, :-1] & o[1:, 1:]) | (o[:-1, :-1] & b[1:, 1:])
    emit(ne, lambda q, r: _tri_id(q, r, 0, n), lambda q, r: _tri_id(q, r, 1, n))
    if not edges_a:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(edges_a), np.concatenate(edges_b)


def _stitch_cycle(ta: np.ndarray, tb: np.ndarray) -> list[np.ndarray]:
    """Walk dual edges into closed vertex cycles.  Every dual vertex has
    degree exactly two (three pairwise-adjacent sites meet at each triangle,
    so a two-coloring crosses either zero or two of its edges)."""
    nbr: dict[int, list[int]] = {}
    for a, b in zip(ta.tolist(), tb.tolist()):
        nbr.setdefault(a, []).append(b)
        nbr.setdefault(b, []).append(a)
    for v, ns in nbr.items():
        if len(ns) != 2:
            raise RuntimeError(f"dual vertex {v} has degree {len(ns)}")
    cycles = []
    seen: set[int] = set()
    for start in nbr:
        if start in seen:
            continue
        cyc = [start]
        seen.add(start)
        prev, cur = start, nbr[start][0]
        while cur != start:
            cyc.append(cur)
            seen.add(cur)
            a, b = nbr[cur]
            prev, cur = cur, (b if a == prev else a)
        cycles.append(np.array(cyc, dtype=np.int64))
    return cycles


@dataclass(frozen=True)
class InterfaceSet:
    """Outermost interface loops of one configuration.

    ``loops[i]`` wraps the chunk with label ``loops[i].id``; ``enclosed``
    maps that label to the number of enclosed sites (the chunk size).
    """

    loops: list
    enclosed: dict
    boundary: ClusterSet


def trace_interfaces(cfg: SiteConfig, min_diameter: float = 0.0) -> InterfaceSet:
    """Outermost open/closed interface loops on the dual hexagonal lattice.

    Each chunk of the complement of the boundary cluster is wrapped by
    exactly one loop of dual edges between the chunk and the boundary
    cluster.  Loops are returned counterclockwise in the unit-square frame;
    ``min_diameter`` (sup-norm, unit-square frame) skips stitching chunks
    whose bounding box is smaller.
    """
    n = cfg.n
    chunk_labels, count, bc = chunk_decomposition(cfg)
    sizes = np.bincount(chunk_labels.ravel(), minlength=count + 1)
    boundary_mask = bc.labels == bc.boundary_label
    loops = []
    enclosed = {}
    objects = ndimage.find_objects(chunk_labels)
    for label in range(1, count + 1):
        sl = objects[label - 1]
        if sl is None:
            continue
        height = sl[0].stop - sl[0].start
        width = sl[1].stop - sl[1].start
        if max(height, width) / n < min_diameter:
            continue
        rlo = max(sl[0].start - 1, 0)
        rhi = min(sl[0].stop + 1, n)
        qlo = max(sl[1].start - 1, 0)
        qhi = min(sl[1].stop + 1, n)
        local_chunk = chunk_labels[rlo:rhi, qlo:qhi] == label
        local_boundary = boundary_mask[rlo:rhi, qlo:qhi]
        ta, tb = _interface_dual_edges(local_chunk, local_boundary, n)
        cycles = _stitch_cycle(ta, tb)
        if len(cycles) != 1:
            raise RuntimeError(
                f"chunk {label} produced {len(cycles)} interface cycles"
            )
        verts = _tri_coords(cycles[0], n)
        verts += np.array([qlo / n, rlo / n])  # undo the local crop
        if signed_area(verts) < 0:
            verts = verts[::-1].copy()
        loops.append(LoopRecord(int(label), -1, 1, verts))
        enclosed[int(label)] = int(sizes[label])
    return InterfaceSet(loops, enclosed, bc)


def has_open_crossing(cfg: SiteConfig, axis: str = "q") -> bool:
    """Left-right (axis q) or bottom-top (axis r) open crossing."""
    cs = cluster_labels(cfg, True)
    if axis == "q":
        a, b = cs.labels[:, 0], cs.labels[:, -1]
    elif axis == "r":
        a, b = cs.labels[0, :], cs.labels[-1, :]
    else:
        raise InvalidParameterError("axis must be 'q' or 'r'")
    both = np.intersect1d(a[a > 0], b[b > 0])
    return both.size > 0


@dataclass(frozen=True)
class OneArmResult:
    r: tuple
    p_hat: tuple
    se: tuple
    reps: int
    few_reps: bool


def one_arm_probability(
    n: int, r_list, reps: int, seed: int, p: float = 0.5
) -> OneArmResult:
    """Frequency that the center site's open cluster reaches Euclidean
    distance r, for each r, over independent replicas.

    Only the subgrid within the largest queried ball is simulated: the event
    "the cluster reaches distance r" is decided by the first exit, which
    lies inside the ball of radius max(r)+1, so the restriction is exact in
    distribution.  Estimates are monotone in r per replica by construction.
    """
    r_arr = sorted(float(r) for r in r_list)
    if not r_arr or r_arr[0] <= 0:
        raise InvalidParameterError("radii must be positive")
    if r_arr[-1] >= n / 2:
        raise InvalidParameterError("largest radius must stay below n/2")
    if reps < 1:
        raise InvalidParameterError("reps must be positive")
    rmax = r_arr[-1]
    # axial box: |dq|, |dr| <= 2d/sqrt(3) covers the Euclidean ball radius d
    half = math.ceil(2.0 * (rmax + 1.0) / math.sqrt(3.0)) + 1
    m = 2 * half + 1
    dq = np.arange(m) - half
    # squared Euclidean distance in the (q - r/2, r*sqrt(3)/2) embedding
    d2 = (
        dq[None, :] ** 2
        - dq[None, :] * dq[:, None]
        + dq[:, None] ** 2
    ).astype(float)
    hits = np.zeros(len(r_arr), dtype=np.int64)
    for rep in range(reps):
        rng = np.random.Generator(np.random.Philox(key=[seed, rep]))
        bits = rng.random((m, m)) < p
        if not bits[half, half]:
            continue
        labels, _ = ndimage.label(bits, structure=_STRUCTURE)
        mine = labels == labels[half, half]
        reach = math.sqrt(d2[mine].max())
        hits += reach >= np.asarray(r_arr)
    p_hat = hits / reps
    se = np.sqrt(p_hat * (1.0 - p_hat) / reps)
    return OneArmResult(
        r=tuple(r_arr),
        p_hat=tuple(p_hat.tolist()),
        se=tuple(se.tolist()),
        reps=reps,
        few_reps=reps < 100,
    )


def site_centers_unit(n: int) -> np.ndarray:
    """Unit-square positions ((q+1/2)/n, (r+1/2)/n) of all sites, row-major
    in r."""
    q = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(q, q)
    return np.column_stack((x.ravel(), y.ravel()))


def counting_measure(cluster: ClusterSet, window: DyadicSquare, k: int) -> MeasureTable:
    """Boundary-cluster site count per level-k square, times n^(-91/48).

    Sites are registered onto the unit square; binning is exact integer
    arithmetic, so no site ever lands in a neighboring square through float
    rounding.  Squares must span at least 4 lattice cells.
    """
    if cluster.boundary_label is None:
        raise MissingBoundaryError("cluster set lacks a boundary cluster")
    n = cluster.labels.shape[0]
    if n * 0.5**k < 4:
        raise ResolutionError(
            f"level-{k} squares span fewer than 4 lattice cells at n={n}"
        )
    r, q = np.nonzero(cluster.labels == cluster.boundary_label)
    # square index of site center (q + 1/2)/n at level k, exactly
    ix = ((2 * q + 1) << k) // (2 * n)
    iy = ((2 * r + 1) << k) // (2 * n)
    m = 2 ** (k - window.k)
    ox = window.ix * m
    oy = window.iy * m
    keep = (ix >= ox) & (ix < ox + m) & (iy >= oy) & (iy < oy + m)
    flat = (iy[keep] - oy) * m + (ix[keep] - ox)
    counts = np.bincount(flat, minlength=m * m)
    d = d_cle(6).d
    norm = float(n) ** (-d)
    values, count_map = {}, {}
    for idx in np.nonzero(counts)[0].tolist():
        sq = DyadicSquare(k, ox + idx % m, oy + idx // m)
        count_map[sq] = int(counts[idx])
        values[sq] = counts[idx] * norm
    return MeasureTable(
        scheme="sites",
        kappa=6.0,
        k=k,
        window=window,
        values=values,
        counts=count_map,
    )


_HEADER = struct.Struct("<IdQB")
MAGIC = b"CGPC"


def write_config(cfg: SiteConfig, path) -> None:
    """Snapshot: magic, n, p, seed, geometry code, bit-packed sites
    row-major, CRC32 of the packed payload.  The replica index and boundary
    mode are not part of the format; an all-open ring reads back as an open
    boundary."""
    payload = np.packbits(cfg.bits.ravel()).tobytes()
    blob = (
        MAGIC
        + _HEADER.pack(cfg.n, cfg.p, cfg.seed, GEOMETRIES.index(cfg.geometry))
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def read_config(path) -> SiteConfig:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError("bad magic")
    try:
        n, p, seed, geom = _HEADER.unpack_from(blob, 4)
    except struct.error as exc:
        raise FormatError("truncated header") from exc
    body = 4 + _HEADER.size
    payload = blob[body:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise FormatError("checksum mismatch")
    if len(payload) != (n * n + 7) // 8:
        raise FormatError("payload length does not match n")
    if geom >= len(GEOMETRIES):
        raise FormatError(f"unknown geometry code {geom}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: n * n]
    bits = bits.astype(bool).reshape(n, n)
    boundary = "open" if bits[_ring_mask(n)].all() else "free"
    return SiteConfig(n, p, seed, 0, boundary, GEOMETRIES[geom], bits)
