import numpy as np
import pytest
from hypothesis import given, strategies as st

from contour_rl.contours import (
    Contour, Pixel, ensure_ccw, extract_contour, gap_pixels, is_8_connected, line_pixels,
    moore_trace, rasterize_contour, refine_contour, signed_area,
)
from contour_rl.errors import DegenerateContour, EmptyMask, MultipleComponents, OpenCurve

from conftest import ring_mask


def midpoint_circle(r, cy, cx):
    pts, x, y, err = set(), r, 0, 1 - r
    while x >= y:
        for dx, dy in ((x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)):
            pts.add((cy + dy, cx + dx))
        y += 1
        if err < 0:
            err += 2 * y + 1
        else:
            x -= 1
            err += 2 * (y - x) + 1
    return pts


def oracle_trace(mask):
    """Independent boundary follower: square-sweep counter-clockwise from the
    bottom-most, right-most pixel, stopping on the first return to start."""
    pts = {tuple(p) for p in np.argwhere(mask)}
    start = max(pts)
    ccw = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    out, cur, d = [start], start, 0
    while True:
        for k in range(8):
            dd = (d + 6 + k) % 8  # begin sweeping 90 degrees to the right
            nxt = (cur[0] + ccw[dd][0], cur[1] + ccw[dd][1])
            if nxt in pts:
                break
        cur, d = nxt, dd
        if cur == start:
            return out
        out.append(cur)


def test_three_by_three_ring():
    m = ring_mask(3, 3, 0, 0, 2, 2)
    c = extract_contour(m)
    assert len(c) == 8
    assert c.point_set() == {tuple(p) for p in np.argwhere(m)}
    assert c.is_connected() and c.signed_area() > 0


def test_circle_matches_oracle():
    m = np.zeros((40, 40), dtype=np.uint8)
    for r, c in midpoint_circle(10, 20, 20):
        m[r, c] = 1
    c = extract_contour(m)
    ref = oracle_trace(m)
    assert len(c) == len(ref) == int(m.sum())
    assert c.point_set() == set(ref)
    c.validate(shape=m.shape)


def test_extract_errors():
    with pytest.raises(EmptyMask):
        extract_contour(np.zeros((5, 5)))
    two = ring_mask(10, 10, 0, 0, 2, 2) | ring_mask(10, 10, 5, 5, 8, 8)
    with pytest.raises(MultipleComponents):
        extract_contour(two)
    line = np.zeros((5, 5)); line[2, 0:5] = 1
    with pytest.raises(OpenCurve):
        extract_contour(line)


def test_moore_trace_starts_in_raster_order():
    m = ring_mask(8, 8, 2, 3, 6, 6)
    t = moore_trace(m)
    assert t[0] == Pixel(2, 3)
    assert len(t) == len(set(t)) == int(m.sum())


def test_refine_examples():
    closed = [(0, 0), (1, 0), (2, 0), (2, 1), (1, 1), (0, 1)]
    assert refine_contour(closed).points.tolist() == [list(p) for p in closed]
    # an out-and-back line is filled back along itself on the closing gap
    assert refine_contour([(0, 0), (1, 0), (2, 0)]).points.tolist() == [[0, 0], [1, 0], [2, 0], [1, 0]]
    c = refine_contour([(5, 2), (6, 7), (7, 2)])
    assert c.points[:6].tolist() == [[5, 2], [5, 3], [5, 4], [5, 5], [5, 6], [6, 7]]
    assert gap_pixels((0, 0), (4, 4)) == [(1, 1), (2, 2), (3, 3)]
    assert gap_pixels((0, 0), (4, 4)) == line_pixels((0, 0), (4, 4))[1:-1]


def _bresenham_oracle(a, b):
    # float-slope rasterization along the major axis
    (r0, c0), (r1, c1) = a, b
    n = max(abs(r1 - r0), abs(c1 - c0))
    if n == 0:
        return [tuple(a)]
    out = []
    for i in range(n + 1):
        t = i / n
        r = r0 + (r1 - r0) * t
        c = c0 + (c1 - c0) * t
        out.append((int(np.floor(r + 0.5)), int(np.floor(c + 0.5))))
    return out


coords = st.tuples(st.integers(-30, 30), st.integers(-30, 30))


@given(coords, coords)
def test_line_pixels_properties(a, b):
    line = line_pixels(a, b)
    assert line[0] == a and line[-1] == b
    assert len(line) == max(abs(a[0] - b[0]), abs(a[1] - b[1])) + 1
    steps = np.abs(np.diff(np.array(line), axis=0))
    assert np.all(steps.max(axis=1) == 1) if len(line) > 1 else True
    # every pixel stays within half a pixel of the true segment along the minor axis
    for p, q in zip(line, _bresenham_oracle(a, b)):
        assert abs(p[0] - q[0]) <= 1 and abs(p[1] - q[1]) <= 1


@given(st.lists(coords, min_size=2, max_size=12))
def test_refine_is_connected_and_keeps_order(pts):
    dedup = [p for i, p in enumerate(pts) if i == 0 or p != pts[i - 1]]
    while len(dedup) > 1 and dedup[-1] == dedup[0]:
        dedup.pop()
    if len(dedup) < 2:
        return
    c = refine_contour(dedup)
    assert is_8_connected(c.points)
    out = [tuple(p) for p in c.points]
    pos = 0
    for p in dedup:  # originals appear in order
        pos = out.index(p, pos)


@given(st.lists(coords, min_size=3, max_size=12))
def test_ensure_ccw_idempotent(pts):
    c = refine_contour(pts)
    if len(c) < 3:
        return
    once = ensure_ccw(c)
    assert ensure_ccw(once) == once
    assert signed_area(once.points) >= 0


def test_ensure_ccw_square_and_reverse():
    sq = Contour([(0, 0), (1, 0), (1, 1), (0, 1)])  # down, right, up: CCW on screen
    assert sq.signed_area() == pytest.approx(1.0)
    assert ensure_ccw(sq) == sq
    assert ensure_ccw(sq.reversed()) == sq
    with pytest.raises(DegenerateContour):
        ensure_ccw(Contour([(0, 0), (0, 1)]))


def test_contour_indexing_wraps_and_validate():
    c = Contour([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert c[4] == c[0] and c[-1] == Pixel(0, 1)
    c.validate(shape=(2, 2))
    with pytest.raises(DegenerateContour):
        c.validate(shape=(1, 1))
    with pytest.raises(OpenCurve):
        Contour([(0, 0), (3, 0), (3, 3)]).validate(require_ccw=False)
    assert rasterize_contour(c, (3, 3)).sum() == 4
