"""Continuum loop-ensemble gasket sampling by a branching boundary exploration.

One driving path per unexplored component serves every target square center
in it: a chordal trace with a force point riding its own starting point is
run in a zipper chart of the component, and each collision of the force gap
closes one loop.  Loops large enough to matter at the working resolution are
replayed through the inverse flow, recorded, and used to clear the bits of
the centers they wind around; the leftover faces are re-charted and explored
recursively with independent child generators.  Interiors of recorded loops
are never re-entered, so the recorded loops form a flat (unnested) family.

Closures whose replayed polyline stays below the resolution scale are
absorbed: reflecting the squared force gap re-attaches the force point at
the tip and the same run continues.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import shapely
from shapely.errors import GEOSException
from shapely.geometry import LineString, Polygon
from shapely.geometry.polygon import orient

from .errors import InvalidParameterError, UnsupportedParameterError
from .grid import DyadicSquare, GasketMask
from .loewner import DrivingFunction, slit_backward, slit_forward
from .loops import LoopRecord, signed_area
from .zipper import ZipperChart, polygon_chart

__all__ = [
    "ExploreOptions",
    "ExplorationBranch",
    "ExploreResult",
    "explore_gasket",
    "gasket_fraction",
    "mark_disconnection",
    "winding_number",
]


@dataclass(frozen=True)
class ExploreOptions:
    """Tuning knobs for the exploration; defaults suit unit-window runs.

    ``max_steps`` is the total stepping budget summed over every component
    run; 0 explores nothing.  Steps, not capacity, meter the work: capacity
    units are chart-relative and a step far from every target legitimately
    spends a lot of capacity at once.  ``frame`` maps window
    coordinates to the physical plane as x*e1 + y*e2, so a sheared physical
    domain (e.g. a 60-degree rhombus) can keep the dyadic indexing of its
    window; loops are reported back in window coordinates.  ``root_choice``
    picks each component's starting boundary vertex: "detach" reuses the
    previous detachment point, "random" draws one from the component's own
    generator (for root-placement sensitivity studies).
    """

    max_steps: int = 10_000_000
    max_run_chunks: int = 1024
    chunk: int = 64
    c_res: float = 0.3
    c_sw: float = 1.0
    k_max: int = 9
    root_choice: str = "detach"
    frame: tuple[complex, complex] | None = None
    trace_budget: int = 512
    loop_budget: int = 256

    def __post_init__(self):
        if self.max_steps < 0:
            raise InvalidParameterError("max_steps must be nonnegative")
        if self.chunk < 1 or self.max_run_chunks < 1:
            raise InvalidParameterError("chunking parameters must be positive")
        if not 0 < self.c_res <= 1 or self.c_sw <= 0:
            raise InvalidParameterError("step-control constants out of range")
        if self.root_choice not in ("detach", "random"):
            raise InvalidParameterError(
                f"root_choice must be 'detach' or 'random', got {self.root_choice!r}"
            )


class ExploreResult(NamedTuple):
    mask: GasketMask
    loops: tuple
    partial: bool


@dataclass(frozen=True)
class ExplorationBranch:
    """A component exploration stopped at a disconnection event.

    ``driving`` carries the run's driving path with its force-point path;
    ``rho`` must equal kappa - 6 exactly.  ``loop`` holds the closed
    polyline (window coordinates) of the loop whose closure stopped the
    run, or None when the run stopped without closing one.
    """

    driving: DrivingFunction
    target: complex
    disconnect_time: float | None
    chart: ZipperChart
    rho: float
    loop: np.ndarray | None = None

    def __post_init__(self):
        if self.rho != self.driving.kappa - 6.0:
            raise InvalidParameterError("branch force weight must be kappa - 6")


def winding_number(vertices, points) -> np.ndarray:
    """Integer winding of a closed polyline around each point.

    ``vertices`` is (m, 2) with the first vertex repeated at the end;
    ``points`` is a complex scalar or array.  Signed crossing count of the
    upward ray; points exactly on an edge get whatever side the crossing
    test assigns them.
    """
    v = np.asarray(vertices, dtype=float)
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    x, y = pts.real, pts.imag
    wind = np.zeros(len(pts), dtype=int)
    for (x0, y0), (x1, y1) in zip(v[:-1], v[1:]):
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        upward = (y0 <= y) & (y < y1) & (cross > 0)
        downward = (y1 <= y) & (y < y0) & (cross < 0)
        wind += upward.astype(int) - downward.astype(int)
    return wind


def gasket_fraction(mask: GasketMask) -> float:
    """Set-bit fraction: popcount / 4^(mask level - window level)."""
    return mask.fraction()


def mark_disconnection(branch: ExplorationBranch, square: DyadicSquare) -> int:
    """Resolve one square's bit at a branch's disconnection event.

    Returns 0 when the branch's closing loop winds around the square center
    (the square fell off the gasket), else 1: the square stays pending in
    whichever child component contains its center.  Branches without a
    recorded loop cannot clear anything.
    """
    cx, cy = square.center
    center = complex(float(cx), float(cy))
    if branch.loop is not None:
        if abs(int(winding_number(branch.loop, center)[0])) == 1:
            return 0
    return 1


# ---------------------------------------------------------------------------
# internal machinery


@dataclass
class _State:
    steps_left: int
    loops: list = field(default_factory=list)
    next_id: int = 0
    partial: bool = False


class _Component(NamedTuple):
    ring: np.ndarray  # complex boundary vertices, CCW, physical coords
    targets: np.ndarray  # indices into the global target arrays
    rng: np.random.Generator
    root_hint: complex
    anchor: complex


class _RunRecord(NamedTuple):
    w_hist: np.ndarray  # driving value at each step time, length n+1
    g_hist: np.ndarray  # force gap at each step time, length n+1
    dt_hist: np.ndarray  # step sizes, length n
    closures: list  # accepted loop excursions as (start, end) step pairs


def _frame_matrix(frame) -> np.ndarray:
    if frame is None:
        e1, e2 = 1.0 + 0.0j, 1.0j
    else:
        e1, e2 = complex(frame[0]), complex(frame[1])
    mat = np.array([[e1.real, e2.real], [e1.imag, e2.imag]], dtype=float)
    if np.linalg.det(mat) <= 0:
        raise InvalidParameterError("frame must be orientation-preserving")
    return mat


def _apply_frame(mat, z):
    z = np.asarray(z, dtype=complex)
    return mat[0, 0] * z.real + mat[0, 1] * z.imag + 1j * (
        mat[1, 0] * z.real + mat[1, 1] * z.imag
    )


def _unapply_frame(mat, z):
    inv = np.linalg.inv(mat)
    z = np.asarray(z, dtype=complex)
    return inv[0, 0] * z.real + inv[0, 1] * z.imag + 1j * (
        inv[1, 0] * z.real + inv[1, 1] * z.imag
    )


def _ring_diameter(ring) -> float:
    return float(max(np.ptp(ring.real), np.ptp(ring.imag)))


def _chart_derivative(chart, z, h):
    with np.errstate(all="ignore"):
        zp = chart.to_half_plane(z + h)
        zm = chart.to_half_plane(z - h)
        return (zp - zm) / (2.0 * h)


def _replay(w_hist, dt_hist, step_idx, chart=None, stops=None, z0=None):
    """Flow samples backward through the inverse elementary slit maps.

    Sample ``j`` starts at step time ``step_idx[j]`` with value ``z0[j]``
    (the driving value there when ``z0`` is omitted, i.e. the trace tip)
    and is pulled through the inverse maps down to step ``stops[j]`` (the
    run start when omitted).  With ``chart`` the result additionally leaves
    the half plane into physical coordinates.
    """
    step_idx = np.asarray(step_idx, dtype=int)
    if z0 is None:
        z = w_hist[step_idx].astype(complex)
    else:
        z = np.array(z0, dtype=complex)
    if stops is None:
        stops = np.zeros(len(step_idx), dtype=int)
    else:
        stops = np.asarray(stops, dtype=int)
    lo = int(stops.min()) if len(step_idx) else 0
    hi = int(step_idx.max()) if len(step_idx) else 0
    for n in range(hi - 1, lo - 1, -1):
        sel = (step_idx > n) & (stops <= n)
        if not sel.any():
            continue
        zn = z[sel] - w_hist[n]
        z[sel] = w_hist[n] + slit_backward(zn, 4.0 * dt_hist[n])
    return z if chart is None else chart.from_half_plane(z)


def _run_component(chart, u0, d0, tau, kappa, rng, opts, steps_left):
    """Drive one branch until every tracked target is resolved or dropped.

    The trace itself carries no loop bookkeeping: loops emerge afterwards
    as regions the cut geometry seals off, so a run only has to flow the
    targets, absorb force-gap collisions into the reflected squared gap,
    and trace the barrier path through one batched replay at the end.
    Returns ``(rec, frozen, barrier)`` where ``frozen`` flags targets whose
    flow the singularity overran; their bits are settled afterwards from
    the traced geometry.  The step size tracks the gap to the nearest live
    target, so capacity spent far from any target is cheap.
    """
    rho = kappa - 6.0
    u = np.array(u0, dtype=complex)
    d = np.array(d0, dtype=complex)
    with np.errstate(all="ignore"):
        alive = np.isfinite(u) & (u.imag > 0) & np.isfinite(d) & (d != 0)
        alive &= u.imag > 0.5 * tau * np.abs(d)
    frozen = ~alive

    w = 0.0
    y = 0.0  # squared force gap
    w_hist = [0.0]
    g_hist = [0.0]
    dt_hist = []

    for _ in range(opts.max_run_chunks):
        if not alive.any() or len(dt_hist) >= steps_left:
            break
        ua = u[alive]
        da = d[alive]
        res_half = 0.5 * tau * np.abs(da)
        span = np.maximum(np.abs(ua - w), res_half)
        dt = (opts.c_res * 0.5 * float(span.min())) ** 2 / kappa
        sqkdt = math.sqrt(kappa * dt)
        coll_tol = (opts.c_sw * sqkdt) ** 2
        floor = 2.0 * math.sqrt(dt / (3.0 * kappa - 8.0))
        drift = (3.0 * kappa - 8.0) * dt
        xi = rng.standard_normal(opts.chunk)

        for i in range(opts.chunk):
            du = ua - w
            s = slit_forward(du, 4.0 * dt)
            with np.errstate(all="ignore"):
                da = da * du / s
            ua = w + s
            w = w - (sqkdt * xi[i] + rho * dt / max(math.sqrt(y), floor))
            y = abs(y + drift + 2.0 * math.sqrt(kappa * y * dt) * xi[i])
            w_hist.append(w)
            g_hist.append(math.sqrt(y))
            dt_hist.append(dt)
            if y <= coll_tol:
                y = 0.0  # force point swallowed: restart it at the tip
        u[alive] = ua
        d[alive] = da
        with np.errstate(all="ignore"):
            res_half = 0.5 * tau * np.abs(da)
            # a target the singularity brushes this closely lies within the
            # resolution of the trace: resolve it as boundary, stop flowing
            near = (
                ~np.isfinite(ua)
                | ~np.isfinite(da)
                | (ua.imag <= res_half)
                | (np.abs(ua - w) <= res_half)
            )
        if near.any():
            idx = np.flatnonzero(alive)
            frozen[idx[near]] = True
            alive[idx[near]] = False

    w_arr = np.array(w_hist)
    dt_arr = np.array(dt_hist)
    end = len(dt_arr)

    if end > 0:
        barrier_idx = np.unique(
            np.linspace(0, end, min(end + 1, opts.trace_budget)).astype(int)
        )
        barrier = _replay(w_arr, dt_arr, barrier_idx, chart)
    else:
        barrier = np.array([])

    rec = _RunRecord(
        w_hist=w_arr,
        g_hist=np.array(g_hist),
        dt_hist=dt_arr,
    )
    return rec, frozen, barrier


def _record_loop(state, loop_frame):
    ring_xy = np.column_stack([loop_frame.real, loop_frame.imag])
    ring_xy = np.vstack([ring_xy, ring_xy[:1]])
    orientation = 1 if signed_area(ring_xy) > 0 else -1
    state.loops.append(
        LoopRecord(
            id=state.next_id, parent_id=-1, orientation=orientation,
            vertices=ring_xy,
        )
    )
    state.next_id += 1
    return ring_xy


def _split_faces(ring, barrier_pts, loop_pieces, tau):
    """Faces left after removing the traced barrier and the accepted loops.

    The barrier is carved out as a thin corridor, then each face is closed
    (grow-shrink) to seal the dead-end corridor stubs poking into it and
    opened (shrink-grow) to shed fingers thinner than the resolution; both
    stop the ring crowding that otherwise accumulates over generations and
    defeats the welds.  Targets near those seams are settled separately, so
    the tau-scale reshaping never flips a decided bit.
    """
    comp_poly = Polygon(np.column_stack([ring.real, ring.imag])).buffer(0)
    removed = [
        LineString(
            np.column_stack([barrier_pts.real, barrier_pts.imag])
        ).buffer(tau / 8.0, quad_segs=4)
    ]
    for loop_pts in loop_pieces:
        removed.append(
            Polygon(np.column_stack([loop_pts.real, loop_pts.imag])).buffer(0)
        )
    leftover = comp_poly.difference(shapely.union_all(removed))
    r = tau / 4.0
    pieces = []
    for face in getattr(leftover, "geoms", [leftover]):
        if not isinstance(face, Polygon) or face.area < tau * tau / 4.0:
            continue
        shaped = (
            face.buffer(r, quad_segs=2)
            .buffer(-r, quad_segs=2)
            .intersection(comp_poly)
            .buffer(-r, quad_segs=2)
            .buffer(r * 0.875, quad_segs=2)
        )
        for g in getattr(shaped, "geoms", [shaped]):
            if not isinstance(g, Polygon) or g.area < tau * tau / 4.0:
                continue
            g = g.simplify(tau / 4.0, preserve_topology=True)
            tol = tau / 2.0
            for _ in range(8):  # cap ring length: weld cost and crowding
                if len(g.exterior.coords) <= 400:
                    break
                g = g.simplify(tol, preserve_topology=True)
                tol *= 2.0
            if isinstance(g, Polygon) and len(g.exterior.coords) >= 4:
                pieces.append(orient(g, 1.0))
    return pieces


def _build_chart(comp, tau, opts):
    """Chart the component, trying other far vertices and coarser rings.

    Deep bays crowd the weld: the chosen far vertex can land numerically on
    the root weld and, failing that, the ring is simplified and retried.
    """
    ring = comp.ring
    for attempt in range(3):
        if attempt > 0:
            tol = tau / 2.0 * 2.0 ** (attempt - 1)
            poly = Polygon(
                np.column_stack([ring.real, ring.imag])
            ).simplify(tol, preserve_topology=True)
            if poly.is_empty or not isinstance(poly, Polygon):
                return None
            ext = np.asarray(orient(poly, 1.0).exterior.coords)
            if len(ext) < 4:
                return None
            ring = ext[:-1, 0] + 1j * ext[:-1, 1]
        m = len(ring)
        max_edge = max(tau / 3.0, _ring_diameter(ring) / 64.0)
        if opts.root_choice == "random":
            root_idx = int(comp.rng.integers(m))
        else:
            root_idx = int(np.argmin(np.abs(ring - comp.root_hint)))
        far_choices = [int(np.argmax(np.abs(ring - ring[root_idx])))]
        far_choices += [(root_idx + off) % m for off in
                        (m // 2, m // 3, 2 * m // 3)]
        far_choices.append(-1)  # adjacent mode: no closing Moebius needed
        seen = set()
        for far_idx in far_choices:
            if far_idx in seen or far_idx == root_idx:
                continue
            seen.add(far_idx)
            try:
                chart = polygon_chart(
                    list(ring), root_index=root_idx, far_index=far_idx,
                    max_edge=max_edge, anchor=comp.anchor,
                )
            except (InvalidParameterError, ValueError, FloatingPointError):
                continue
            return chart, ring
    return None


def _explore_component(comp, ctx, state, queue):
    tau, kappa, opts, mat = ctx["tau"], ctx["kappa"], ctx["opts"], ctx["mat"]
    built = _build_chart(comp, tau, opts)
    if built is None:
        return  # degenerate component: its targets keep their bits
    chart, ring = built

    tz = ctx["centers_phys"][comp.targets]
    u0 = chart.to_half_plane(tz)
    d0 = _chart_derivative(chart, tz, tau / 16.0)

    rec, _, accepted, barrier_pts = _run_component(
        chart, u0, d0, tau, kappa, comp.rng, opts, state.steps_left,
    )

    cleared_local = np.zeros(len(comp.targets), dtype=bool)
    loop_pieces = []
    for pts, hit_pos in accepted:
        loop_pieces.append(pts)
        loop_frame = _unapply_frame(mat, pts)
        loop_frame = np.clip(
            loop_frame.real, ctx["wx0"], ctx["wx1"]
        ) + 1j * np.clip(loop_frame.imag, ctx["wy0"], ctx["wy1"])
        _record_loop(state, loop_frame)
        cleared_local[hit_pos] = True
        hit = comp.targets[hit_pos]
        if len(hit):
            ctx["bits"][ctx["rows"][hit], ctx["cols"][hit]] = False

    state.steps_left -= len(rec.dt_hist)
    if state.steps_left <= 0:
        state.partial = True
        return
    if len(rec.dt_hist) == 0:
        return

    pending = comp.targets[~cleared_local]
    if len(pending) == 0:
        return

    barrier_pts = barrier_pts[np.isfinite(barrier_pts)]
    if len(barrier_pts) < 2:
        return

    # a cell whose center lies within tau/2 of the traced path meets a loop
    # boundary at this resolution: its bit is settled as occupied here, and
    # it is excluded from the recursion regardless of how the faces reshape
    px = ctx["centers_phys"][pending]
    line = LineString(np.column_stack([barrier_pts.real, barrier_pts.imag]))
    contact = shapely.dwithin(
        line, shapely.points(px.real, px.imag), 0.5 * tau
    )
    pending = pending[~contact]
    if len(pending) == 0:
        return
    px = px[~contact]

    try:
        pieces = _split_faces(ring, barrier_pts, loop_pieces, tau)
    except (GEOSException, ValueError):
        return
    if not pieces:
        return

    detach = complex(barrier_pts[-1])
    assigned = np.zeros(len(pending), dtype=bool)
    children = comp.rng.spawn(len(pieces))
    for face, child_rng in zip(pieces, children):
        ext = np.asarray(face.exterior.coords)
        inside = shapely.contains_xy(face, px.real, px.imag) & ~assigned
        assigned |= inside
        if not inside.any():
            continue
        rep = face.representative_point()
        queue.append(
            _Component(
                ring=ext[:-1, 0] + 1j * ext[:-1, 1],
                targets=pending[inside],
                rng=child_rng,
                root_hint=detach,
                anchor=complex(rep.x, rep.y),
            )
        )


def explore_gasket(kappa, window: DyadicSquare, k: int, seed, opts=None):
    """Sample the gasket mask of a loop ensemble at level-``k`` resolution.

    Returns ``ExploreResult(mask, loops, partial)``: one bit per level-k
    square of ``window`` (1 = still meets the unexplored region when its
    component was resolved or abandoned), the loops recorded along the way
    in window coordinates, and whether the step budget ran out with work
    still pending.  Fixed ``seed`` and options give identical output.
    """
    if not 4.0 < float(kappa) < 8.0:
        raise UnsupportedParameterError(
            f"loop-ensemble exploration needs kappa in (4, 8), got {kappa}"
        )
    kappa = float(kappa)
    opts = opts if opts is not None else ExploreOptions()
    if k > opts.k_max:
        raise InvalidParameterError(f"resolution {k} exceeds k_max {opts.k_max}")
    if k < window.k:
        raise InvalidParameterError("resolution must be at least the window level")

    mat = _frame_matrix(opts.frame)
    m = 2 ** (k - window.k)
    cell = 0.5**k
    x0, y0, side = float(window.x0), float(window.y0), float(window.side)
    cols, rows = np.meshgrid(np.arange(m), np.arange(m))
    rows, cols = rows.ravel(), cols.ravel()
    centers_frame = x0 + (cols + 0.5) * cell + 1j * (y0 + (rows + 0.5) * cell)
    corners = [
        x0 + 1j * y0,
        (x0 + side) + 1j * y0,
        (x0 + side) + 1j * (y0 + side),
        x0 + 1j * (y0 + side),
    ]
    # start the exploration mid-edge: at a corner the chart is quadratically
    # compressed and the adaptive step collapses before the hull can grow
    ring_frame = []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        ring_frame += [a, (a + b) / 2.0]
    ring0 = _apply_frame(mat, np.array(ring_frame, dtype=complex))
    ctx = {
        "tau": (0.5 ** (k + 2)) * float(np.linalg.svd(mat, compute_uv=False)[-1]),
        "kappa": kappa,
        "opts": opts,
        "mat": mat,
        "centers_phys": _apply_frame(mat, centers_frame),
        "centers_frame": centers_frame,
        "bits": np.ones((m, m), dtype=bool),
        "rows": rows,
        "cols": cols,
        "wx0": x0, "wx1": x0 + side, "wy0": y0, "wy1": y0 + side,
    }

    state = _State(steps_left=int(opts.max_steps))
    queue: deque[_Component] = deque()
    queue.append(
        _Component(
            ring=ring0,
            targets=np.arange(len(centers_frame)),
            rng=np.random.default_rng(seed),
            root_hint=complex(ring0[1]),
            anchor=complex(
                _apply_frame(mat, (x0 + side / 2) + 1j * (y0 + side / 2))
            ),
        )
    )
    while queue:
        comp = queue.popleft()
        if len(comp.targets) == 0 or _ring_diameter(comp.ring) < ctx["tau"]:
            continue
        if state.steps_left <= 0:
            state.partial = True
            continue
        _explore_component(comp, ctx, state, queue)

    mask = GasketMask(window, k, ctx["bits"])
    return ExploreResult(mask=mask, loops=tuple(state.loops), partial=state.partial)
