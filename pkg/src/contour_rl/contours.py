"""Pixel contours: tracing, gap refinement and orientation.

Coordinates are ``(row, col)`` with rows growing downward. A contour is
counter-clockwise when it turns left as seen on screen, which makes the
shoelace sum over ``(col, row)`` pairs negative. :func:`signed_area` folds
that sign in, so CCW contours have positive area.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateContour,
    EmptyMask,
    MultipleComponents,
    NotAThinRing,
    OpenCurve,
)


class Pixel(NamedTuple):
    row: int
    col: int


# Clockwise on screen, starting north. Index order is reused by the tracer.
_CW_OFFSETS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {arr.shape}")
    return arr


class Contour:
    """Closed, ordered pixel sequence. The last point implicitly joins the first."""

    __slots__ = ("_points",)

    def __init__(self, points):
        arr = _as_points(points).copy()
        arr.setflags(write=False)
        self._points = arr

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def __getitem__(self, i) -> Pixel:
        r, c = self._points[i % len(self._points)]
        return Pixel(int(r), int(c))

    def __iter__(self):
        for r, c in self._points:
            yield Pixel(int(r), int(c))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Contour):
            return NotImplemented
        return np.array_equal(self._points, other._points)

    def __hash__(self):
        return hash(self._points.tobytes())

    def __repr__(self) -> str:
        return f"Contour(T={len(self)})"

    def point_set(self) -> set[Pixel]:
        return set(self)

    def reversed(self) -> "Contour":
        return Contour(self._points[::-1])

    def signed_area(self) -> float:
        return signed_area(self._points)

    def is_connected(self) -> bool:
        return is_8_connected(self._points)

    def validate(self, shape: tuple[int, int] | None = None, require_ccw: bool = True) -> None:
        """Raise if any contour invariant is violated."""
        pts = self._points
        if len(pts) < 3:
            raise DegenerateContour(f"contour has {len(pts)} points, need at least 3")
        steps = np.roll(pts, -1, axis=0) - pts
        cheb = np.abs(steps).max(axis=1)
        if np.any(cheb == 0):
            raise DegenerateContour("contour repeats a point consecutively")
        if np.any(cheb > 1):
            i = int(np.argmax(cheb > 1))
            raise OpenCurve(f"gap between points {i} and {(i + 1) % len(pts)}")
        if require_ccw and signed_area(pts) <= 0:
            raise DegenerateContour("contour is not counter-clockwise")
        if shape is not None:
            h, w = shape
            if pts.min() < 0 or pts[:, 0].max() >= h or pts[:, 1].max() >= w:
                raise DegenerateContour(f"contour leaves the {h}x{w} image")


def signed_area(points) -> float:
    """Shoelace area, positive for counter-clockwise (screen) orientation."""
    pts = _as_points(points).astype(np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 1], pts[:, 0]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return -0.5 * float(np.sum(x * yn - xn * y))


def is_8_connected(points) -> bool:
    pts = _as_points(points)
    if len(pts) < 2:
        return False
    cheb = np.abs(np.roll(pts, -1, axis=0) - pts).max(axis=1)
    return bool(np.all(cheb == 1))


def line_pixels(a: Sequence[int], b: Sequence[int]) -> list[Pixel]:
    """Integer line from ``a`` to ``b`` inclusive (Bresenham, any octant)."""
    r0, c0 = int(a[0]), int(a[1])
    r1, c1 = int(b[0]), int(b[1])
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    out = []
    if dc >= dr:
        err = dc // 2
        r = r0
        for c in range(c0, c1 + sc, sc):
            out.append(Pixel(r, c))
            err -= dr
            if err < 0:
                r += sr
                err += dc
    else:
        err = dr // 2
        c = c0
        for r in range(r0, r1 + sr, sr):
            out.append(Pixel(r, c))
            err -= dc
            if err < 0:
                c += sc
                err += dr
    return out


def gap_pixels(a: Sequence[int], b: Sequence[int]) -> list[Pixel]:
    """Pixels strictly between ``a`` and ``b`` that make the pair 8-connected.

    Points on the same or adjacent rows are joined along the row of ``a``,
    so the final inserted pixel sits diagonally (or directly) next to ``b``.
    Larger gaps fall back to :func:`line_pixels`.
    """
    r0, c0 = int(a[0]), int(a[1])
    r1, c1 = int(b[0]), int(b[1])
    if max(abs(r1 - r0), abs(c1 - c0)) <= 1:
        return []
    if abs(r1 - r0) <= 1:
        step = 1 if c1 > c0 else -1
        return [Pixel(r0, c) for c in range(c0 + step, c1, step)]
    return line_pixels((r0, c0), (r1, c1))[1:-1]


def _drop_repeats(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return points
    keep = np.any(points != np.roll(points, 1, axis=0), axis=1)
    if not keep.any():
        return points[:1]
    return points[keep]


def refine_contour(points: Iterable[Sequence[int]]) -> Contour:
    """Fill every gap of an ordered cyclic point sequence (closing gap included).

    Original points keep their order; consecutive duplicates are dropped.
    """
    pts = _drop_repeats(_as_points(list(points)))
    if len(pts) < 2:
        return Contour(pts)
    out = []
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        out.append(Pixel(int(a[0]), int(a[1])))
        out.extend(gap_pixels(a, b))
    return Contour(_drop_repeats(np.array(out, dtype=np.int64)))


def ensure_ccw(contour: Contour) -> Contour:
    if len(contour) < 3:
        raise DegenerateContour(f"contour has {len(contour)} points, need at least 3")
    if contour.signed_area() < 0:
        return contour.reversed()
    return contour


def moore_trace(mask: np.ndarray) -> list[Pixel]:
    """Moore-neighbour boundary following with Jacob's stopping criterion.

    Starts at the first foreground pixel in raster order and walks the outer
    boundary clockwise (on screen). Returns the visited pixels; the start is
    not repeated at the end.
    """
    m = np.asarray(mask) != 0
    h, w = m.shape
    nz = np.flatnonzero(m)
    if nz.size == 0:
        raise EmptyMask("mask has no foreground pixels")
    start = divmod(int(nz[0]), w)

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and m[r, c]

    # entered from the west; that neighbour is background by raster order
    start_back = 6
    cur, back = start, start_back
    trace = [Pixel(*start)]
    limit = 4 * m.size + 8
    for _ in range(limit):
        found = None
        for k in range(1, 9):
            d = (back + k) % 8
            dr, dc = _CW_OFFSETS[d]
            r, c = cur[0] + dr, cur[1] + dc
            if fg(r, c):
                found = (r, c)
                prev = (back + k - 1) % 8
                pr, pc = cur[0] + _CW_OFFSETS[prev][0], cur[1] + _CW_OFFSETS[prev][1]
                break
        if found is None:
            return trace  # isolated pixel
        # direction from the new pixel to the background pixel we swept last
        back = _CW_OFFSETS.index((pr - found[0], pc - found[1]))
        cur = found
        if cur == start and back == start_back:
            return trace
        trace.append(Pixel(*cur))
    raise OpenCurve("boundary trace did not return to its start")


def extract_contour(mask: np.ndarray) -> Contour:
    """Order a one-pixel-thick closed ring into a CCW :class:`Contour`."""
    m = np.asarray(mask) != 0
    if not m.any():
        raise EmptyMask("mask has no foreground pixels")
    _, n_comp = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    if n_comp > 1:
        raise MultipleComponents(f"mask has {n_comp} 8-connected components")
    trace = moore_trace(m)
    if len(set(trace)) != len(trace):
        raise OpenCurve("boundary trace revisits pixels; the curve is not a closed ring")
    if len(trace) < 3:
        raise OpenCurve(f"only {len(trace)} boundary pixels, not a closed ring")
    if len(trace) != int(m.sum()):
        raise NotAThinRing(
            f"trace covers {len(trace)} of {int(m.sum())} pixels; ring is not one pixel thick"
        )
    contour = Contour(trace)
    if not contour.is_connected():
        raise OpenCurve("traced ring does not close on itself")
    return ensure_ccw(contour)


def rasterize_contour(contour: Contour | np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    pts = contour.points if isinstance(contour, Contour) else _as_points(contour)
    out = np.zeros(shape, dtype=bool)
    out[pts[:, 0], pts[:, 1]] = True
    return out
