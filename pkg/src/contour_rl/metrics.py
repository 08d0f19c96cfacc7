"""Segmentation metrics and the test-time contouring pipeline."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn
from .contours import Contour, line_pixels, rasterize_contour
from .data import Sample
from .env import HOME, EnvConfig, Episode
from .errors import BothEmpty, DegenerateContour, DegenerateTrace, EmptySet
from .io import atomic_write_text, write_points_csv, write_ppm

REPORT_FIELDS = ["id", "dice", "hausdorff", "steps", "termination_reason", "landing_row", "landing_col"]

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class PixelSet:
    """A set of pixels inside an ``(H, W)`` frame, stored as a boolean mask."""

    __slots__ = ("mask",)

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)

    @classmethod
    def from_points(cls, points, shape) -> "PixelSet":
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        h, w = shape
        if len(pts) and (pts.min() < 0 or pts[:, 0].max() >= h or pts[:, 1].max() >= w):
            raise ValueError(f"points fall outside the {h}x{w} frame")
        m = np.zeros(shape, dtype=bool)
        m[pts[:, 0], pts[:, 1]] = True
        return cls(m)

    @property
    def bounds(self) -> tuple[int, int]:
        return self.mask.shape

    def __len__(self) -> int:
        return int(self.mask.sum())

    def points(self) -> np.ndarray:
        return np.argwhere(self.mask)

    def members(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.points()}


def _mask(s) -> np.ndarray:
    return s.mask if isinstance(s, PixelSet) else np.asarray(s, dtype=bool)


def dice(pred, truth) -> float:
    """``2 |P & G| / (|P| + |G|)`` on masks or :class:`PixelSet` objects."""
    a, b = _mask(pred), _mask(truth)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise BothEmpty("dice is undefined for two empty sets")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _as_point_array(s) -> np.ndarray:
    if isinstance(s, PixelSet):
        return s.points().astype(np.float64)
    if isinstance(s, Contour):
        return s.points.astype(np.float64)
    return np.asarray(s, dtype=np.float64).reshape(-1, 2)


def _directed(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    worst = 0.0
    for i in range(0, len(a), chunk):
        blk = a[i:i + chunk]
        d2 = (blk[:, None, 0] - b[None, :, 0]) ** 2 + (blk[:, None, 1] - b[None, :, 1]) ** 2
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def hausdorff(g, p) -> float:
    """Symmetric Hausdorff distance between two point sets (Euclidean)."""
    a, b = _as_point_array(g), _as_point_array(p)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("hausdorff distance needs two non-empty sets")
    return max(_directed(a, b), _directed(b, a))


def close_trace(trace) -> Contour:
    """Join the end of a trace back to its start with a discrete line."""
    pts = [tuple(int(v) for v in p) for p in trace]
    dedup = [p for i, p in enumerate(pts) if i == 0 or p != pts[i - 1]]
    if len(dedup) < 3:
        raise DegenerateTrace(f"trace has {len(dedup)} distinct consecutive points")
    first, last = dedup[0], dedup[-1]
    if max(abs(first[0] - last[0]), abs(first[1] - last[1])) > 1:
        dedup.extend(tuple(q) for q in line_pixels(last, first)[1:-1])
    while len(dedup) > 1 and dedup[-1] == dedup[0]:
        dedup.pop()
    if len(dedup) < 3:
        raise DegenerateTrace("closed trace collapses to fewer than 3 points")
    return Contour(dedup)


def fill_contour(contour, height: int, width: int) -> PixelSet:
    """Contour pixels plus everything the border flood fill cannot reach.

    The exterior is grown with 4-connectivity, so diagonal contour steps do
    not leak.
    """
    pts = contour.points if isinstance(contour, Contour) else np.asarray(contour, dtype=np.int64)
    if len(pts) == 0:
        raise DegenerateContour("cannot fill an empty contour")
    wall = rasterize_contour(pts, (height, width))
    labels, _ = ndimage.label(~wall, structure=_FOUR_CONNECTED)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    exterior = np.isin(labels, border[border > 0])
    return PixelSet(~exterior)


# ----------------------------------------------------------------- pipeline

@dataclass
class TraceResult:
    sample_id: str
    landing_spot: tuple[int, int]
    episode: Episode
    closed: Contour | None

    @property
    def closed_ok(self) -> bool:
        return self.episode.termination_reason == HOME and self.closed is not None


def trace_samples(samples, policy: nn.Network, landing_net: nn.Network,
                  env_config: EnvConfig | None = None) -> list[TraceResult]:
    """Landing spot then a greedy test-mode episode per sample, in lock-step."""
    from .landing import predict_landing
    from .ppo import run_episodes

    env_config = env_config or EnvConfig()
    spots = [predict_landing(landing_net, s.image) for s in samples]
    episodes = [Episode(s, env_config, landing_spot=spot) for s, spot in zip(samples, spots)]
    if episodes:
        run_episodes(policy, episodes, greedy=True)
    out = []
    for s, spot, ep in zip(samples, spots, episodes):
        closed = None
        if ep.termination_reason == HOME:
            try:
                closed = close_trace(ep.trace)
            except DegenerateTrace:
                closed = None
        out.append(TraceResult(s.id, (int(spot[0]), int(spot[1])), ep, closed))
    return out


def score_trace(sample: Sample, result: TraceResult) -> dict:
    h, w = sample.shape
    ep = result.episode
    row = {
        "id": sample.id,
        "steps": ep.step_count,
        "termination_reason": ep.termination_reason,
        "landing_row": result.landing_spot[0],
        "landing_col": result.landing_spot[1],
    }
    if result.closed_ok:
        pred = fill_contour(result.closed, h, w)
        truth = fill_contour(sample.contour, h, w)
        row["dice"] = dice(pred, truth)
        row["hausdorff"] = hausdorff(sample.contour, result.closed)
    else:
        # failed episodes count as dice 0 rather than being dropped
        row["dice"] = 0.0
        row["hausdorff"] = hausdorff(sample.contour, np.array(ep.trace))
    return row


@dataclass
class MetricReport:
    per_image: list[dict]
    aggregate: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows) -> "MetricReport":
        rows = sorted(rows, key=lambda r: r["id"])
        return cls(rows, aggregate_rows(rows))


def aggregate_rows(rows) -> dict:
    d = np.array([r["dice"] for r in rows], dtype=np.float64)
    hd = np.array([r["hausdorff"] for r in rows], dtype=np.float64)
    return {
        "n": len(rows),
        "dice_mean": float(d.mean()),
        "dice_std": float(d.std()),
        "hausdorff_mean": float(hd.mean()),
        "hausdorff_std": float(hd.std()),
    }


def evaluate(samples_test, policy: nn.Network, landing_net: nn.Network,
             env_config: EnvConfig | None = None, results: list | None = None) -> MetricReport:
    """Landing, greedy tracing, closing, then Dice on fills and Hausdorff on contours."""
    if not samples_test:
        raise ValueError("no test samples to evaluate")
    traced = trace_samples(samples_test, policy, landing_net, env_config)
    if results is not None:
        results.extend(traced)
    return MetricReport.from_rows(score_trace(s, r) for s, r in zip(samples_test, traced))


def write_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in report.per_image:
            w.writerow({k: row[k] for k in REPORT_FIELDS})
    atomic_write_text(json_path, json.dumps(report.aggregate, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["dice"] = float(r["dice"])
        r["hausdorff"] = float(r["hausdorff"])
        r["steps"] = int(r["steps"])
    return rows


def overlay(image: np.ndarray, truth=None, predicted=None) -> np.ndarray:
    """Grey image with the ground truth in red and the prediction in blue."""
    g = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    h, w = g.shape
    for pts, colour in ((truth, (255, 0, 0)), (predicted, (0, 0, 255))):
        if pts is None:
            continue
        p = _as_point_array(pts).astype(np.int64)
        ok = (p[:, 0] >= 0) & (p[:, 0] < h) & (p[:, 1] >= 0) & (p[:, 1] < w)
        rgb[p[ok, 0], p[ok, 1]] = colour
    return rgb


def write_overlay(path, sample: Sample, predicted) -> None:
    write_ppm(path, overlay(sample.image, sample.contour, predicted))


def write_closed_contour(path, contour: Contour) -> None:
    write_points_csv(path, contour.points)
