"""Percolation tests: sampling, clustering, interfaces, one-arm, snapshots."""

import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from matplotlib.path import Path

from clegasket.errors import (
    FormatError,
    InvalidParameterError,
    MissingBoundaryError,
    ResolutionError,
    UnsupportedParameterError,
)
from clegasket.grid import DyadicSquare
from clegasket.loops import loop_diameter, signed_area
from clegasket.percolation import (
    NEIGHBOR_OFFSETS,
    ClusterSet,
    boundary_cluster,
    chunk_decomposition,
    cluster_labels,
    counting_measure,
    has_open_crossing,
    one_arm_probability,
    read_config,
    sample_config,
    site_centers_unit,
    trace_interfaces,
    write_config,
)

UNIT = DyadicSquare(0, 0, 0)


def bfs_labels(bits):
    """Reference union of sites under the six-neighbor stencil."""
    n = bits.shape[0]
    labels = np.zeros((n, n), dtype=np.int32)
    cur = 0
    for r0, q0 in zip(*np.nonzero(bits)):
        if labels[r0, q0]:
            continue
        cur += 1
        labels[r0, q0] = cur
        queue = deque([(r0, q0)])
        while queue:
            r, q = queue.popleft()
            for dq, dr in NEIGHBOR_OFFSETS:
                rr, qq = r + dr, q + dq
                if 0 <= rr < n and 0 <= qq < n and bits[rr, qq] and not labels[rr, qq]:
                    labels[rr, qq] = cur
                    queue.append((rr, qq))
    return labels, cur


class TestSampling:
    def test_deterministic(self):
        a = sample_config(32, 0.5, 7)
        b = sample_config(32, 0.5, 7)
        assert np.array_equal(a.bits, b.bits)
        c = sample_config(32, 0.5, 7, replica=1)
        assert not np.array_equal(a.bits, c.bits)
        d = sample_config(32, 0.5, 8)
        assert not np.array_equal(a.bits, d.bits)

    def test_boundary_forcing(self):
        cfg = sample_config(8, 0.0, 0, boundary="open")
        ring = np.zeros((8, 8), dtype=bool)
        ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
        assert np.array_equal(cfg.bits, ring)
        free = sample_config(8, 0.0, 0, boundary="free")
        assert not free.bits.any()

    def test_density(self):
        cfg = sample_config(256, 0.5, 3, boundary="free")
        assert abs(cfg.bits.mean() - 0.5) < 0.01

    def test_parameter_errors(self):
        with pytest.raises(InvalidParameterError):
            sample_config(1, 0.5, 0)
        with pytest.raises(InvalidParameterError):
            sample_config(8, 1.5, 0)
        with pytest.raises(InvalidParameterError):
            sample_config(8, 0.5, 0, boundary="wrap")
        with pytest.raises(UnsupportedParameterError):
            sample_config(8, 0.5, 0, geometry="hexagon")
        with pytest.raises(InvalidParameterError):
            sample_config(8, 0.5, 0, geometry="disk")


class TestClusters:
    def test_bfs_agreement(self):
        cases = 0
        for n in (8, 16, 33, 64):
            for p in (0.3, 0.5, 0.7):
                for seed in range(5):
                    boundary = "open" if seed % 2 else "free"
                    cfg = sample_config(n, p, seed, boundary=boundary)
                    cs = cluster_labels(cfg, True)
                    ref, ref_count = bfs_labels(cfg.bits)
                    assert cs.count == ref_count
                    pairs = set(
                        zip(cs.labels.ravel().tolist(), ref.ravel().tolist())
                    )
                    fwd, bwd = {}, {}
                    for a, b in pairs:
                        assert (a == 0) == (b == 0)
                        if a == 0:
                            continue
                        assert fwd.setdefault(a, b) == b
                        assert bwd.setdefault(b, a) == a
                    cases += 1
        assert cases >= 50

    def test_boundary_cluster(self):
        cfg = sample_config(16, 0.0, 0, boundary="open")
        bc = boundary_cluster(cfg)
        assert bc.boundary_label == bc.labels[0, 0] > 0
        assert bc.sizes()[bc.boundary_label] == 4 * 16 - 4

    def test_missing_boundary(self):
        cfg = sample_config(16, 0.0, 0, boundary="free")
        with pytest.raises(MissingBoundaryError):
            boundary_cluster(cfg)

    def test_full_lattice_has_no_chunks(self):
        cfg = sample_config(16, 1.0, 0)
        labels, count, bc = chunk_decomposition(cfg)
        assert count == 0
        assert bc.sizes()[bc.boundary_label] == 16 * 16

    def test_closed_interior_single_chunk(self):
        cfg = sample_config(4, 0.0, 0, boundary="open")
        labels, count, bc = chunk_decomposition(cfg)
        assert count == 1
        assert (labels > 0).sum() == 4  # the 2x2 interior


class TestInterfaces:
    def test_hand_checked_interior_loop(self):
        # 4x4 lattice, ring open, 2x2 interior closed.  Interface edges
        # from each interior site to the ring: 3 + 4 + 4 + 3 = 14, hence a
        # single 14-vertex dual loop enclosing 4 sites.
        cfg = sample_config(4, 0.0, 0, boundary="open")
        ifs = trace_interfaces(cfg)
        assert len(ifs.loops) == 1
        loop = ifs.loops[0]
        assert len(loop.vertices) == 14
        assert ifs.enclosed[loop.id] == 4
        assert loop.orientation == 1
        assert signed_area(loop.vertices) > 0
        assert loop.parent_id == -1

    def test_partition_identity(self):
        for seed in range(10):
            cfg = sample_config(64, 0.5, seed)
            ifs = trace_interfaces(cfg)
            bsize = ifs.boundary.sizes()[ifs.boundary.boundary_label]
            assert sum(ifs.enclosed.values()) == 64 * 64 - bsize
            labels, count, _ = chunk_decomposition(cfg)
            assert len(ifs.loops) == count

    def test_loops_enclose_their_chunks(self):
        for seed in (0, 1, 2):
            n = 24
            cfg = sample_config(n, 0.5, seed)
            chunk_labels, _, _ = chunk_decomposition(cfg)
            centers = site_centers_unit(n)
            ifs = trace_interfaces(cfg)
            for loop in ifs.loops:
                inside = Path(loop.vertices).contains_points(centers)
                member = (chunk_labels == loop.id).ravel()
                assert np.array_equal(inside, member)

    def test_min_diameter_filter(self):
        cfg = sample_config(64, 0.5, 4)
        full = trace_interfaces(cfg)
        sigma = 0.1
        big = trace_interfaces(cfg, min_diameter=sigma)
        assert len(big.loops) < len(full.loops)
        kept = {lp.id for lp in big.loops}
        for lp in full.loops:
            if loop_diameter(lp.vertices) >= sigma + 2.0 / 64:
                assert lp.id in kept

    def test_chunk_shells_are_single_closed_clusters(self):
        # color-swap structure: each chunk's contact layer with the boundary
        # cluster is closed and connected, so chunks correspond one-to-one
        # with closed clusters adjacent to the boundary cluster
        for n in (16, 32):
            for seed in range(10):
                cfg = sample_config(n, 0.5, seed)
                chunk_labels, count, bc = chunk_decomposition(cfg)
                closed = cluster_labels(cfg, False)
                bmask = bc.labels == bc.boundary_label
                touch = np.zeros_like(bmask)
                for dq, dr in NEIGHBOR_OFFSETS:
                    shifted = np.zeros_like(bmask)
                    src = bmask[
                        max(0, -dr) : bmask.shape[0] - max(0, dr),
                        max(0, -dq) : bmask.shape[1] - max(0, dq),
                    ]
                    shifted[
                        max(0, dr) : bmask.shape[0] - max(0, -dr),
                        max(0, dq) : bmask.shape[1] - max(0, -dq),
                    ] = src
                    touch |= shifted
                adjacent_closed = set()
                for label in range(1, count + 1):
                    shell = (chunk_labels == label) & touch
                    assert shell.any()
                    assert not cfg.bits[shell].any()  # shell is closed
                    ids = set(closed.labels[shell].tolist())
                    assert len(ids) == 1  # one closed cluster per shell
                    adjacent_closed |= ids
                assert len(adjacent_closed) == count


class TestCrossing:
    def test_edge_cases(self):
        assert has_open_crossing(sample_config(8, 1.0, 0, boundary="free"))
        assert not has_open_crossing(sample_config(8, 0.0, 0, boundary="free"))

    def test_crossing_complementarity(self):
        # an open left-right crossing exists iff no closed bottom-top
        # crossing does; exact on the triangular lattice
        for seed in range(200):
            cfg = sample_config(32, 0.5, seed, boundary="free")
            open_lr = has_open_crossing(cfg, "q")
            flipped = sample_config(32, 0.5, seed, boundary="free")
            closed_tb_labels, _ = bfs_labels(~flipped.bits)
            a = closed_tb_labels[0, :]
            b = closed_tb_labels[-1, :]
            closed_tb = np.intersect1d(a[a > 0], b[b > 0]).size > 0
            assert open_lr != closed_tb

    def test_crossing_probability_half(self):
        n, reps = 16, 10_000
        hits = sum(
            has_open_crossing(sample_config(n, 0.5, 77, replica=i, boundary="free"))
            for i in range(reps)
        )
        assert abs(hits / reps - 0.5) < 0.02


class TestOneArm:
    def test_radius_one_exact(self):
        # reach >= 1 iff the center is open with at least one open neighbor:
        # p = (1/2) * (1 - 2^-6)
        res = one_arm_probability(64, [1.0], reps=4000, seed=5)
        expect = 0.5 * (1 - 2.0**-6)
        assert res.p_hat[0] == pytest.approx(expect, abs=4 * res.se[0] + 1e-9)

    def test_monotone_and_se(self):
        res = one_arm_probability(64, [2.0, 4.0, 8.0], reps=500, seed=9)
        assert res.p_hat[0] >= res.p_hat[1] >= res.p_hat[2]
        for p, s in zip(res.p_hat, res.se):
            assert s == pytest.approx(math.sqrt(p * (1 - p) / 500), rel=1e-12)

    def test_degenerate_densities(self):
        ones = one_arm_probability(32, [2.0, 5.0], reps=50, seed=0, p=1.0)
        assert ones.p_hat == (1.0, 1.0)
        assert ones.few_reps
        rare = one_arm_probability(32, [5.0], reps=200, seed=0, p=0.01)
        assert rare.p_hat[0] < 0.05
        assert not rare.few_reps

    def test_deterministic(self):
        a = one_arm_probability(64, [3.0], reps=300, seed=4)
        b = one_arm_probability(64, [3.0], reps=300, seed=4)
        assert a.p_hat == b.p_hat

    def test_errors(self):
        with pytest.raises(InvalidParameterError):
            one_arm_probability(16, [8.0], reps=10, seed=0)
        with pytest.raises(InvalidParameterError):
            one_arm_probability(16, [], reps=10, seed=0)
        with pytest.raises(InvalidParameterError):
            one_arm_probability(16, [-1.0], reps=10, seed=0)
        with pytest.raises(InvalidParameterError):
            one_arm_probability(16, [2.0], reps=0, seed=0)


class TestCountingMeasure:
    def test_full_lattice(self):
        n, k = 64, 3
        cfg = sample_config(n, 1.0, 0)
        bc = boundary_cluster(cfg)
        t = counting_measure(bc, UNIT, k)
        d = float(Fraction(91, 48))
        per_square = (n / 2**k) ** 2
        assert len(t.values) == 4**k
        assert t.scheme == "sites" and t.kappa == 6.0
        for q, c in t.counts.items():
            assert c == per_square
            assert t.values[q] == per_square * n ** (-d)

    def test_total_is_cluster_size(self):
        cfg = sample_config(64, 0.5, 11)
        bc = boundary_cluster(cfg)
        t = counting_measure(bc, UNIT, 3)
        assert sum(t.counts.values()) == bc.sizes()[bc.boundary_label]

    def test_subwindow(self):
        n = 64
        cfg = sample_config(n, 0.5, 12)
        bc = boundary_cluster(cfg)
        whole = counting_measure(bc, UNIT, 3)
        quad = counting_measure(bc, DyadicSquare(1, 0, 0), 3)
        for q, c in quad.counts.items():
            assert whole.counts[q] == c
        assert sum(quad.counts.values()) == sum(
            c for q, c in whole.counts.items() if q.ix < 4 and q.iy < 4
        )

    def test_resolution_guard(self):
        cfg = sample_config(64, 0.5, 0)
        bc = boundary_cluster(cfg)
        with pytest.raises(ResolutionError):
            counting_measure(bc, UNIT, 5)  # 2 lattice cells per square

    def test_needs_boundary_label(self):
        cfg = sample_config(64, 0.5, 0)
        cs = cluster_labels(cfg, True)
        with pytest.raises(MissingBoundaryError):
            counting_measure(cs, UNIT, 3)


class TestConfigIO:
    def test_round_trip(self, tmp_path):
        cfg = sample_config(33, 0.5, 123)
        path = tmp_path / "cfg.cgpc"
        write_config(cfg, path)
        back = read_config(path)
        assert back.n == 33 and back.p == 0.5 and back.seed == 123
        assert back.boundary == "open" and back.geometry == "rhombus"
        assert np.array_equal(back.bits, cfg.bits)

    def test_free_boundary_inferred(self, tmp_path):
        cfg = sample_config(16, 0.2, 3, boundary="free")
        path = tmp_path / "cfg.cgpc"
        write_config(cfg, path)
        assert read_config(path).boundary == "free"

    def test_corruption_detected(self, tmp_path):
        cfg = sample_config(16, 0.5, 1)
        path = tmp_path / "cfg.cgpc"
        write_config(cfg, path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        bad = tmp_path / "bad.cgpc"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_config(bad)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.cgpc"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_config(path)
