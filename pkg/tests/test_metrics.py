import math

import numpy as np
import pytest

from cridiff import metrics
from cridiff.metrics import (
    asd,
    boundary_pixels,
    dsc,
    evaluate_pair,
    hsd,
    iou,
    write_metrics_csv,
)


def bf_boundary(mask):
    """Neighbor-scan oracle for the 4-connectivity boundary."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not m[ni, nj]:
                    pts.append((i, j))
                    break
    return sorted(pts)


def bf_directed(a, b):
    """All-pairs directed distances: for each point of a, min over b."""
    return [min(math.dist(p, q) for q in b) for p in a]


def bf_hsd_asd(pred, gt):
    ba, bb = bf_boundary(pred), bf_boundary(gt)
    if not ba and not bb:
        return 0.0, 0.0
    if not ba or not bb:
        return None, None
    d_ab, d_ba = bf_directed(ba, bb), bf_directed(bb, ba)
    h = max(max(d_ab), max(d_ba))
    a = (sum(d_ab) / len(d_ab) + sum(d_ba) / len(d_ba)) / 2
    return h, a


def rand_mask(rng, h=10, w=10, p=0.4):
    return (rng.random((h, w)) < p).astype(np.uint8)


class TestOverlap:
    def test_identical(self):
        m = np.eye(4, dtype=np.uint8)
        assert dsc(m, m) == 1.0 and iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dsc(a, b) == 0.0 and iou(a, b) == 0.0

    def test_counting_oracle(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, :4] = 1  # |P|=4
        b[:, 0] = 1  # |G|=4, overlap {(0,0)}... widen to overlap 2
        a[1, 0] = 1
        a[0, 3] = 0  # P = {(0,0),(0,1),(0,2),(1,0)}
        # G = {(0,0),(1,0),(2,0),(3,0)}; overlap = 2, union = 6
        assert dsc(a, b) == 0.5
        assert iou(a, b) == pytest.approx(1 / 3)
        assert dsc(a, b) == pytest.approx(2 * iou(a, b) / (1 + iou(a, b)))

    def test_both_empty_convention(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert dsc(z, z) == 1.0 and iou(z, z) == 1.0

    def test_dsc_iou_identity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            a, b = rand_mask(rng), rand_mask(rng)
            i = iou(a, b)
            assert abs(dsc(a, b) - 2 * i / (1 + i)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2)), np.zeros((3, 3)))


class TestBoundaryPixels:
    def test_single_pixel(self):
        m = np.zeros((3, 3), dtype=np.uint8)
        m[1, 1] = 1
        assert boundary_pixels(m).tolist() == [[1, 1]]

    def test_solid_block_ring(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[1:4, 1:4] = 1
        pts = boundary_pixels(m)
        assert len(pts) == 8
        assert [2, 2] not in pts.tolist()

    def test_scan_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            m = rand_mask(rng, 8, 8)
            assert sorted(map(tuple, boundary_pixels(m))) == bf_boundary(m)


class TestSurfaceDistances:
    def test_identical_masks_zero(self):
        m = rand_mask(np.random.default_rng(1))
        assert hsd(m, m) == 0.0 and asd(m, m) == 0.0

    def test_3_4_5_triangle(self):
        a = np.zeros((6, 6), dtype=np.uint8)
        b = np.zeros((6, 6), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert hsd(a, b) == 5.0 and asd(a, b) == 5.0

    def test_all_pairs_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a, b = rand_mask(rng), rand_mask(rng)
            eh, ea = bf_hsd_asd(a, b)
            if eh is None:
                assert hsd(a, b) is None and asd(a, b) is None
            else:
                assert hsd(a, b) == pytest.approx(eh, abs=1e-9)
                assert asd(a, b) == pytest.approx(ea, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            a, b = rand_mask(rng), rand_mask(rng)
            if not a.any() or not b.any():
                continue
            assert hsd(a, b) == hsd(b, a)
            assert asd(a, b) == pytest.approx(asd(b, a))

    def test_zero_iff_identical_boundaries(self):
        a = np.zeros((5, 5), dtype=np.uint8)
        a[1:4, 1:4] = 1
        # removing the center leaves the same boundary ring: distances stay 0
        hollow = a.copy()
        hollow[2, 2] = 0
        assert hsd(a, hollow) == 0.0 and asd(a, hollow) == 0.0
        # growing the block by one column does change the boundary set
        wider = a.copy()
        wider[1:4, 4] = 1
        assert hsd(a, wider) > 0 and asd(a, wider) > 0

    def test_undefined_when_one_empty(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = a.copy()
        b[1, 1] = 1
        assert hsd(a, b) is None and asd(a, b) is None
        r = evaluate_pair(a, b)
        assert r.undefined and "empty_mismatch" in r.flags

    def test_percentile_flag(self):
        a = np.zeros((10, 10), dtype=np.uint8)
        b = np.zeros((10, 10), dtype=np.uint8)
        a[0, 0:5] = 1
        b[0, 0] = 1
        assert hsd(a, b, percentile=50) <= hsd(a, b)

    def test_translation_invariance(self):
        rng = np.random.default_rng(11)
        a = np.zeros((16, 16), dtype=np.uint8)
        b = np.zeros((16, 16), dtype=np.uint8)
        a[2:6, 2:7] = rand_mask(rng, 4, 5, 0.6)
        b[3:7, 2:6] = rand_mask(rng, 4, 4, 0.6)
        at = np.roll(np.roll(a, 5, axis=0), 4, axis=1)
        bt = np.roll(np.roll(b, 5, axis=0), 4, axis=1)
        assert dsc(a, b) == dsc(at, bt)
        assert iou(a, b) == iou(at, bt)
        assert hsd(a, b) == pytest.approx(hsd(at, bt))
        assert asd(a, b) == pytest.approx(asd(at, bt))


class TestReporting:
    def test_csv_with_aggregate(self, tmp_path):
        rng = np.random.default_rng(2)
        pairs = [(rand_mask(rng), rand_mask(rng)) for _ in range(5)]
        reports = [evaluate_pair(p, g) for p, g in pairs]
        out = tmp_path / "metrics.csv"
        write_metrics_csv(out, [f"c{i}" for i in range(5)], reports)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "case_id,dsc,iou,hsd,asd,undefined_flags"
        assert len(lines) == 7
        agg = lines[-1].split(",")
        assert agg[0] == "mean"
        # aggregate equals hand-average of per-case rows
        dscs = [float(l.split(",")[1]) for l in lines[1:6]]
        assert float(agg[1]) == pytest.approx(np.mean(dscs), abs=5e-4)
        # 3 decimals for overlap, 2 for distances
        assert len(agg[1].split(".")[1]) == 3
        if agg[3]:
            assert len(agg[3].split(".")[1]) == 2

    def test_undefined_excluded_from_distance_means(self):
        full = np.ones((4, 4), dtype=np.uint8)
        empty = np.zeros((4, 4), dtype=np.uint8)
        reports = [evaluate_pair(full, full), evaluate_pair(empty, full)]
        row = metrics.aggregate_row(reports)
        assert row[3] == "0.00" and row[4] == "0.00"
        assert row[5] == "undefined=1"
