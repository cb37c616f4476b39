"""Conformal charts from polygonal Jordan domains onto the upper half-plane.

The chart is a geodesic-zipper composition: an opening square root, one
Moebius-plus-slit step per boundary sample, a closing corner map, and an
optional Moebius that moves a chosen boundary vertex to infinity.  Every
primitive has a closed-form inverse, so evaluation runs both ways.

The implied domain interpolates the boundary samples by hyperbolic
geodesics; refining edges tightens it toward the true polygon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .loewner import slit_backward, slit_forward

__all__ = ["ZipperChart", "polygon_chart", "refine_ring"]

_INF = complex(np.inf, 0.0)
# a vertex this close to the real axis (relative to its modulus) is treated
# as already welded and contributes no slit step
_DEGENERATE_IM = 1e-12


def _as_ring(vertices) -> np.ndarray:
    ring = np.asarray(vertices, dtype=complex).ravel()
    keep = [ring[0]]
    for z in ring[1:]:
        if z != keep[-1]:
            keep.append(z)
    while len(keep) > 1 and keep[-1] == keep[0]:
        keep.pop()
    ring = np.array(keep, dtype=complex)
    if len(ring) < 3:
        raise InvalidParameterError("need at least 3 distinct vertices")
    area = 0.5 * np.sum(
        ring.real * np.roll(ring, -1).imag - np.roll(ring, -1).real * ring.imag
    )
    if area <= 0:
        raise InvalidParameterError("ring must be counterclockwise")
    return ring


def refine_ring(ring, max_edge: float) -> np.ndarray:
    """Split every edge into equal pieces no longer than max_edge."""
    if max_edge <= 0:
        raise InvalidParameterError("max_edge must be positive")
    ring = np.asarray(ring, dtype=complex).ravel()
    out = []
    for a, b in zip(ring, np.roll(ring, -1)):
        pieces = max(1, int(np.ceil(abs(b - a) / max_edge)))
        out.extend(a + (b - a) * j / pieces for j in range(pieces))
    return np.array(out, dtype=complex)


def _mob_fwd(z, b):
    """z / (1 - z/b): sends b to infinity and infinity to -b."""
    with np.errstate(all="ignore"):
        out = z / (1.0 - z / b)
    out = np.where(np.isfinite(z), out, -b + 0j)
    return np.where(z == b, _INF, out)


def _mob_inv(w, b):
    """Inverse of _mob_fwd: w / (1 + w/b)."""
    with np.errstate(all="ignore"):
        out = w / (1.0 + w / b)
    out = np.where(np.isfinite(w), out, b + 0j)
    return np.where(w == -b, _INF, out)


def _zip_fwd(u, b, c):
    if np.isfinite(b):
        u = _mob_fwd(u, b)
    with np.errstate(all="ignore"):
        out = slit_forward(u, c * c)
    # the slit base (the previously welded sample, sitting exactly at 0) must
    # follow the domain-side bank, which lands at -c, not the exterior one
    out = np.where(u == 0, complex(-c, 0.0), out)
    return np.where(np.isfinite(u), out, _INF)


def _zip_inv(w, b, c):
    with np.errstate(all="ignore"):
        out = slit_backward(w, c * c)
    u = np.where(np.isfinite(w), out, _INF)
    if np.isfinite(b):
        u = _mob_inv(u, b)
    return u


@dataclass(frozen=True)
class ZipperChart:
    """Map between a polygonal domain and the upper half-plane.

    ``root`` maps to 0 and ``far`` to infinity; the anchor point supplied at
    construction maps to height 1, fixing the remaining scale freedom.
    ``ring`` is the boundary sample ring actually zipped (counterclockwise,
    ending at the root).
    """

    ring: tuple
    root: complex
    far: complex
    steps: tuple  # (b, c, lam) per absorbed sample; lam rescales beforehand
    x0: float
    q: float | None  # image of `far` before the final Moebius, None if auto
    scale: float = 1.0
    # final image of each ring sample, recorded at build time; replaying a
    # welded sample from scratch loses its bank to rounding, the record not
    boundary_images: tuple | None = None

    def to_half_plane(self, z):
        z = np.asarray(z, dtype=complex)
        scalar = z.ndim == 0
        z = np.atleast_1d(z)
        z0, z1 = self.ring[0], self.ring[1]
        with np.errstate(all="ignore"):
            w = 1j * np.sqrt((z - z1) / (z - z0))
        w = np.where(w.imag < 0, -w, w)
        w = np.where(z == z0, _INF, w)
        w = np.where(z == z1, 0j, w)
        for b, c, lam in self.steps:
            w = _zip_fwd(w / lam, b, c)
        v = _mob_fwd(w, self.x0)
        with np.errstate(all="ignore"):
            w = -(v * v)
        w = np.where(np.isfinite(v), w, _INF)
        if self.q is not None:
            q = self.q
            with np.errstate(all="ignore"):
                out = q * w / (q - w)
            out = np.where(np.isfinite(w), out, -q + 0j)
            w = np.where(w == q, _INF, out)
        with np.errstate(all="ignore"):
            w = np.where(np.isfinite(w), w * self.scale, _INF)
        w = np.where(z == self.far, _INF, w)
        if self.boundary_images is not None:
            lut = dict(zip(self.ring, self.boundary_images))
            for i, zi in enumerate(z):
                hit = lut.get(complex(zi))
                if hit is not None:
                    w[i] = hit
        return w[0] if scalar else w

    def from_half_plane(self, w):
        w = np.asarray(w, dtype=complex)
        scalar = w.ndim == 0
        w = np.atleast_1d(w) / self.scale
        if self.q is not None:
            q = self.q
            with np.errstate(all="ignore"):
                out = q * w / (q + w)
            out = np.where(np.isfinite(w), out, q + 0j)
            w = np.where(w == -q, _INF, out)
        with np.errstate(all="ignore"):
            v = 1j * np.sqrt(w)
        v = np.where(np.isfinite(w), v, _INF)
        u = _mob_inv(v, self.x0)
        for b, c, lam in reversed(self.steps):
            u = _zip_inv(u, b, c)
            if lam != 1.0:
                with np.errstate(all="ignore"):
                    u = np.where(np.isfinite(u), u * lam, _INF)
        z0, z1 = self.ring[0], self.ring[1]
        u2 = u * u
        with np.errstate(all="ignore"):
            z = (z1 + u2 * z0) / (1.0 + u2)
        z = np.where(np.isfinite(u), z, z0 + 0j)
        z = np.where(u2 == -1.0, _INF, z)
        return z[0] if scalar else z


def polygon_chart(vertices, root_index: int = 0, far_index: int | None = None,
                  max_edge: float | None = None,
                  anchor: complex | None = None) -> ZipperChart:
    """Build the chart for a counterclockwise simple polygon.

    The vertex at ``root_index`` maps to 0, the one at ``far_index``
    (default: the vertex halfway around the ring) to infinity, and the
    interior ``anchor`` (default: mean of the boundary samples, fine for
    convex domains) to height 1, which pins the chart scale.  ``max_edge``
    refines edges before zipping; the implied boundary approaches the true
    polygon as it shrinks.  ``far_index=-1`` sends the boundary sample
    right after the root to infinity instead; that choice never needs a
    closing Moebius, which helps on domains whose welds crowd badly.
    """
    base = _as_ring(vertices)
    m = len(base)
    root_index = int(root_index) % m
    adjacent_far = far_index == -1
    if not adjacent_far:
        far_index = (
            (root_index + m // 2) % m if far_index is None else int(far_index) % m
        )
        if far_index == root_index:
            raise InvalidParameterError("root and far vertices must differ")
        far = complex(base[far_index])
    root = complex(base[root_index])
    ring = refine_ring(base, max_edge) if max_edge is not None else base
    # rotate so the ring ends at the root: the root is then the last sample
    # absorbed, pinning its image at 0 before the corner map
    pos = int(np.argmin(np.abs(ring - root)))
    ring = np.roll(ring, -(pos + 1) % len(ring))
    if adjacent_far:
        far = complex(ring[0])
        far_pos = 0
    else:
        far_pos = int(np.argmin(np.abs(ring - far)))
        if ring[far_pos] != far:
            raise InvalidParameterError("far vertex lost during refinement")

    z0, z1 = ring[0], ring[1]
    with np.errstate(all="ignore"):
        work = 1j * np.sqrt((ring - z1) / (ring - z0))
    work = np.where(work.imag < 0, -work, work)
    work[0] = _INF
    work[1] = 0.0
    steps = []
    pending = 1.0
    # every step moves the whole tracked ring: welded samples keep sliding
    # along the real axis, and the ring start rides through infinity; the
    # coordinates inflate exponentially with weld count, so renormalize by
    # a recorded dilation whenever they threaten the double range
    for j in range(2, len(ring)):
        a = work[j]
        if not np.isfinite(a) or abs(a.imag) <= _DEGENERATE_IM * abs(a):
            continue
        mags = np.abs(work[np.isfinite(work)])
        mx = float(mags.max()) if len(mags) else 0.0
        if mx > 1e12:
            lam = mx * 1e-6
            work = np.where(np.isfinite(work), work / lam, _INF)
            pending *= lam
            a = work[j]
            if abs(a.imag) <= _DEGENERATE_IM * abs(a):
                continue
        asq = abs(a) ** 2
        b = asq / a.real if abs(a.real) > _DEGENERATE_IM * abs(a) else np.inf
        c = asq / a.imag
        if c <= 0:
            continue
        steps.append((float(b), float(c), float(pending)))
        pending = 1.0
        work = _zip_fwd(work, b, c)
        # the absorbed sample is the slit tip; pin it at 0 exactly so later
        # steps treat it as the base and keep it on the domain-side bank
        work[j] = 0.0
    if pending != 1.0:
        # no weld consumed the trailing rescale; undo it so the closing
        # maps agree with what a replay of the recorded steps produces
        with np.errstate(all="ignore"):
            work = np.where(np.isfinite(work), work * pending, _INF)
    x_img = work[0]
    if not np.isfinite(x_img) or abs(x_img.imag) > 1e-6 * max(1.0, abs(x_img)):
        raise InvalidParameterError("zipper failed to weld the ring start")
    x0 = float(x_img.real)
    q = None
    if far_pos != 0:
        v = _mob_fwd(work[far_pos : far_pos + 1], x0)
        with np.errstate(all="ignore"):
            q_img = np.where(np.isfinite(v), -(v * v), _INF)[0]
        if not np.isfinite(q_img) or q_img == 0:
            raise InvalidParameterError("far vertex collides with the root weld")
        q = float(q_img.real)
    chart = ZipperChart(
        ring=tuple(complex(z) for z in ring),
        root=root,
        far=far,
        steps=tuple(steps),
        x0=x0,
        q=q,
    )
    if anchor is None:
        anchor = complex(np.mean(ring))
    height = complex(chart.to_half_plane(anchor)).imag
    if not np.isfinite(height) or height <= 0:
        raise InvalidParameterError("anchor must map inside the half-plane")
    scale = 1.0 / height

    # push the welded samples through the closing maps once, at build time
    v = _mob_fwd(work, x0)
    with np.errstate(all="ignore"):
        img = np.where(np.isfinite(v), -(v * v), _INF)
    if q is not None:
        with np.errstate(all="ignore"):
            out = q * img / (q - img)
        out = np.where(np.isfinite(img), out, -q + 0j)
        img = np.where(img == q, _INF, out)
    with np.errstate(all="ignore"):
        img = np.where(np.isfinite(img), img * scale, _INF)
    img[-1] = 0.0
    img[far_pos] = _INF
    return ZipperChart(
        ring=chart.ring,
        root=root,
        far=far,
        steps=chart.steps,
        x0=x0,
        q=q,
        scale=scale,
        boundary_images=tuple(complex(w) for w in img),
    )
