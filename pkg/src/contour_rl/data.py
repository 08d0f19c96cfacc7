"""Samples and the deterministic synthetic blob generator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid

from .contours import Contour, ensure_ccw, moore_trace, refine_contour
from .errors import BoundsError, DegenerateContour, GeometryOverflow

INTERIOR_LEVEL = 0.75
EXTERIOR_LEVEL = 0.25

# landing crop: rows [0, 100), the rightmost 80 columns
CROP_ROWS = 100
CROP_COLS = 80


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid used on disk, as float32 in [0, 1]."""
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    contour: Contour
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        img.setflags(write=False)
        object.__setattr__(self, "image", img)
        pts = self.contour.points
        h, w = img.shape
        if len(pts) and (pts.min() < 0 or pts[:, 0].max() >= h or pts[:, 1].max() >= w):
            raise BoundsError(f"sample {self.id!r}: contour point outside the {h}x{w} image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.contour == other.contour
        )


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    base_radius: float = 28.0
    harmonic_count: int = 3
    max_amplitude: float = 0.12
    noise_sigma: float = 0.06
    blur_radius: float = 1.0
    center_jitter: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.max_amplitude < 0.5:
            raise ValueError("max_amplitude must lie in [0, 0.5)")
        if self.base_radius < 8:
            raise ValueError("base_radius must be at least 8 pixels")
        if self.harmonic_count < 0:
            raise ValueError("harmonic_count must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def blob_radius_fn(params: SynthParams, rng: np.random.Generator):
    """Draw harmonic coefficients and return ``r(theta)`` plus its upper bound."""
    k = np.arange(1, params.harmonic_count + 1)
    if len(k):
        weights = (1.0 / k) / np.sum(1.0 / k)
        amps = params.max_amplitude * weights * rng.uniform(0.0, 1.0, size=len(k))
        phases = rng.uniform(0.0, 2 * math.pi, size=len(k))
    else:
        amps = phases = np.zeros(0)
    r0 = params.base_radius

    def radius(theta):
        theta = np.asarray(theta, dtype=np.float64)
        s = np.zeros_like(theta)
        for kk, a, p in zip(k, amps, phases):
            s = s + a * np.sin(kk * theta + p)
        return r0 * (1.0 + s)

    return radius, r0 * (1.0 + float(np.sum(amps)))


def synth_sample(params: SynthParams, height: int = 162, width: int = 208, sample_id: str | None = None) -> Sample:
    """Render a star-convex blob with a known contour.

    The nominal centre sits at (0.45 H, 0.55 W) so the right flank of the blob
    lands in the upper-right landing crop for the default geometry.
    """
    rng = np.random.default_rng(params.seed)
    radius, r_max = blob_radius_fn(params, rng)
    jitter = rng.uniform(-params.center_jitter, params.center_jitter, size=2)
    cr = 0.45 * height + jitter[0]
    cc = 0.55 * width + jitter[1]
    if cr - r_max < 1 or cr + r_max > height - 2 or cc - r_max < 1 or cc + r_max > width - 2:
        raise GeometryOverflow(
            f"blob of radius up to {r_max:.1f} centred at ({cr:.1f}, {cc:.1f}) "
            f"does not fit a {height}x{width} image"
        )

    rows, cols = np.mgrid[0:height, 0:width]
    dy = -(rows - cr)  # y up
    dx = cols - cc
    inside = np.hypot(dx, dy) <= radius(np.arctan2(dy, dx))

    trace = moore_trace(inside)
    if len(set(trace)) != len(trace):
        raise DegenerateContour(f"seed {params.seed}: blob boundary pinches to one pixel")
    contour = ensure_ccw(refine_contour(trace))
    contour.validate(shape=(height, width))

    base = np.where(inside, INTERIOR_LEVEL, EXTERIOR_LEVEL)
    if params.blur_radius > 0:
        base = ndimage.gaussian_filter(base, sigma=params.blur_radius, mode="nearest")
    noisy = base + rng.normal(0.0, params.noise_sigma, size=base.shape)
    image = quantize(noisy)

    if sample_id is None:
        sample_id = f"synth_{params.seed:05d}"
    meta = {"source": "synthetic", "params": params.to_dict(), "height": height, "width": width,
            "center": [float(cr), float(cc)]}
    return Sample(image=image, contour=contour, id=sample_id, meta=meta)


def crop_hits_contour(sample: Sample) -> bool:
    h, w = sample.shape
    pts = sample.contour.points
    return bool(np.any((pts[:, 0] < min(CROP_ROWS, h)) & (pts[:, 1] >= w - CROP_COLS)))


def blob_area(params: SynthParams) -> float:
    """Analytic area of the blob drawn for ``params`` (polar integral)."""
    rng = np.random.default_rng(params.seed)
    radius, _ = blob_radius_fn(params, rng)
    theta = np.linspace(0.0, 2 * math.pi, 20001)
    r = radius(theta)
    return float(0.5 * trapezoid(r * r, theta))
