"""Loop records: nested oriented closed curves, with a line-based text format.

A loop is a closed polyline; the last vertex connects back to the first
implicitly.  ``parent_id`` encodes nesting (-1 for outermost loops) and
``orientation`` the traversal sense (+1 counterclockwise, -1 clockwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidParameterError

__all__ = ["LoopRecord", "read_loops", "write_loops", "signed_area", "loop_diameter"]


@dataclass(frozen=True)
class LoopRecord:
    id: int
    parent_id: int
    orientation: int
    vertices: np.ndarray  # (m, 2) float, closed implicitly

    def __post_init__(self):
        if self.orientation not in (1, -1):
            raise InvalidParameterError("orientation must be +1 or -1")
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InvalidParameterError("vertices must be (m >= 3, 2)")
        if not np.isfinite(v).all():
            raise InvalidParameterError("vertices must be finite")
        object.__setattr__(self, "vertices", v)
        v.setflags(write=False)


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area; positive for counterclockwise traversal."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def loop_diameter(vertices: np.ndarray) -> float:
    """Bounding-box diameter (sup-norm extent) of a loop."""
    v = np.asarray(vertices, dtype=float)
    return float(max(np.ptp(v[:, 0]), np.ptp(v[:, 1])))


def write_loops(loops, path) -> None:
    """One loop per line: id, parent_id, orientation, vertex count, then the
    vertex coordinates interleaved, all space-separated decimals."""
    with open(path, "w") as fh:
        for lp in loops:
            head = f"{lp.id} {lp.parent_id} {lp.orientation:+d} {len(lp.vertices)}"
            coords = " ".join(repr(float(c)) for c in lp.vertices.ravel())
            fh.write(f"{head} {coords}\n")


def read_loops(path) -> list[LoopRecord]:
    loops = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                lid, parent, orient, m = (int(p) for p in parts[:4])
                flat = np.array([float(p) for p in parts[4:]], dtype=float)
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            if len(flat) != 2 * m:
                raise FormatError(
                    f"line {lineno}: expected {2 * m} coordinates, got {len(flat)}"
                )
            loops.append(LoopRecord(lid, parent, orient, flat.reshape(m, 2)))
    return loops
