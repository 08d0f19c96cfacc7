"""Landing-spot generator: upper-right crops, min-distance loss, line-searched descent."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .contours import Pixel
from .data import CROP_COLS, CROP_ROWS, Sample
from .errors import EmptyTarget, ImageTooSmall, Stalled

log = logging.getLogger(__name__)

LOG_FIELDS = ["k", "train_loss", "val_loss", "lambda"]


@dataclass(frozen=True)
class SubImage:
    patch: np.ndarray  # (100, 80) float32
    origin: tuple[int, int]  # (row, col) of patch[0, 0] in the parent image


@dataclass(frozen=True)
class LineSearchConfig:
    lam_lo: float = 1e-6
    lam_hi: float = 1.0
    secant_iters: int = 12
    h: float | None = None  # derivative step; defaults to 1e-4 * lam_hi
    fallback: float = 1e-3
    max_shrinks: int = 20

    def __post_init__(self):
        if not 0.0 < self.lam_lo < self.lam_hi:
            raise ValueError("need 0 < lam_lo < lam_hi")

    @property
    def step(self) -> float:
        return self.h if self.h is not None else 1e-4 * self.lam_hi


def crop_upper_right(image: np.ndarray) -> SubImage:
    h, w = image.shape
    if h < CROP_ROWS or w < CROP_COLS:
        raise ImageTooSmall(f"{h}x{w} image is smaller than the {CROP_ROWS}x{CROP_COLS} crop")
    c0 = w - CROP_COLS
    return SubImage(np.asarray(image[:CROP_ROWS, c0:], dtype=np.float32), (0, c0))


def landing_target(sample: Sample, sub: SubImage | None = None) -> np.ndarray:
    """Contour points inside the crop, in crop coordinates (contour order kept)."""
    sub = sub or crop_upper_right(sample.image)
    r0, c0 = sub.origin
    pts = sample.contour.points - np.array([r0, c0])
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < CROP_ROWS) & (pts[:, 1] >= 0) & (pts[:, 1] < CROP_COLS)
    if not keep.any():
        raise EmptyTarget(f"sample {sample.id!r}: no contour point inside the landing crop")
    return pts[keep]


def make_pairs(samples) -> list[tuple[SubImage, np.ndarray]]:
    out = []
    for s in samples:
        sub = crop_upper_right(s.image)
        out.append((sub, landing_target(s, sub)))
    return out


def flip_augment(sub: SubImage, target: np.ndarray):
    """Upside-down flip of a crop and its target points."""
    flipped = SubImage(np.ascontiguousarray(sub.patch[::-1]), sub.origin)
    t = np.array(target, dtype=np.int64, copy=True)
    t[:, 0] = CROP_ROWS - 1 - t[:, 0]
    return flipped, t


def augment(pairs):
    """Original pairs followed by their flipped copies."""
    return list(pairs) + [flip_augment(s, t) for s, t in pairs]


def _stack(pairs) -> np.ndarray:
    return np.stack([s.patch for s, _ in pairs])


def _min_distances(outputs: np.ndarray, pairs):
    """Per pair: min distance and the first arg-min target point."""
    dmin = np.empty(len(pairs))
    nearest = np.empty((len(pairs), 2))
    for i, (_, target) in enumerate(pairs):
        if len(target) == 0:
            raise EmptyTarget(f"pair {i} has no target points")
        d = np.hypot(target[:, 0] - outputs[i, 0], target[:, 1] - outputs[i, 1])
        j = int(np.argmin(d))
        dmin[i] = d[j]
        nearest[i] = target[j]
    return dmin, nearest


def generator_outputs(net: nn.Network, pairs, chunk: int | None = None) -> np.ndarray:
    """Generator outputs for all pairs; one forward pass unless ``chunk`` is given.

    A single pass keeps the numbers identical to :func:`loss_gradient`, which
    matters when the line search compares losses.
    """
    x = _stack(pairs)
    chunk = chunk or len(x)
    out = [net.forward(x[i:i + chunk], keep_cache=False)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out).astype(np.float64)


def landing_loss(net: nn.Network, pairs) -> float:
    """Mean over pairs of the distance from the output to its nearest target point."""
    dmin, _ = _min_distances(generator_outputs(net, pairs), pairs)
    return float(dmin.mean())


def loss_gradient(net: nn.Network, pairs) -> tuple[float, nn.Gradients]:
    """Full-batch loss and its (sub)gradient through each pair's nearest target point.

    A pair whose output sits exactly on a target contributes zero gradient.
    """
    x = _stack(pairs)
    out, cache = net.forward(x)
    o = out.astype(np.float64)
    dmin, nearest = _min_distances(o, pairs)
    diff = o - nearest
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(dmin[:, None] > 0, diff / dmin[:, None], 0.0) / len(pairs)
    return float(dmin.mean()), net.backward(cache, g)


def secant_minimize(phi, config: LineSearchConfig, record=None) -> float:
    """Approximate arg-min of ``phi`` on ``[lam_lo, lam_hi]`` via secant steps on phi'.

    ``phi'`` is a central difference with step ``config.step``. Every probed
    ``(lam, phi(lam))`` is appended to ``record`` when given.
    """
    lo, hi, h = config.lam_lo, config.lam_hi, config.step

    def value(lam):
        v = float(phi(lam))
        if record is not None:
            record.append((lam, v))
        return v

    def slope(lam):
        a = max(lam - h, 0.0)
        return (value(lam + h) - value(a)) / (lam + h - a)

    a, b = lo, hi
    da, db = slope(a), slope(b)
    for _ in range(config.secant_iters):
        if db == da or not (math.isfinite(da) and math.isfinite(db)):
            break
        c = b - db * (b - a) / (db - da)
        c = min(max(c, lo), hi)
        if abs(c - b) <= 1e-12 * max(1.0, abs(b)):
            b = c
            break
        a, da = b, db
        b, db = c, slope(c)
    return b


def line_search_lr(net: nn.Network, grads: nn.Gradients, pairs, config: LineSearchConfig,
                   loss0: float | None = None) -> float:
    """Step size for ``psi - lam * grad`` that does not increase the full-batch loss.

    Raises :class:`Stalled` if the gradient is zero or no tried step descends.
    """
    gnorm = grads.norm()
    if gnorm == 0.0 or not math.isfinite(gnorm):
        raise Stalled("zero gradient")
    base = [p.copy() for p in net.parameters()]
    garr = grads.arrays()
    if loss0 is None:
        loss0 = landing_loss(net, pairs)

    def phi(lam):
        net.set_parameters([b - np.asarray(lam * g, dtype=b.dtype) for b, g in zip(base, garr)])
        v = landing_loss(net, pairs)
        return v if math.isfinite(v) else float("inf")

    probes: list[tuple[float, float]] = []
    try:
        lam = secant_minimize(phi, config, record=probes)
        probes.append((lam, phi(lam)))
        # the secant end point is not always the best point it visited
        best_lam, best_val = min(probes, key=lambda p: p[1])
        if best_val < loss0 and best_lam > 0:
            return best_lam
        lam = config.fallback
        for _ in range(config.max_shrinks):
            if phi(lam) < loss0:
                return lam
            lam *= 0.5
    finally:
        net.set_parameters(base)
    raise Stalled("no step size decreased the loss")


@dataclass
class LandingResult:
    net: nn.Network
    history: list[dict]
    stalled: bool


def train_generator(pairs_train, pairs_val, iterations: int, config: LineSearchConfig | None = None,
                    net: nn.Network | None = None, seed: int = 0, start_iteration: int = 0,
                    log_path=None, checkpoint_path=None) -> LandingResult:
    """Full-batch gradient descent with a line-searched step each iteration."""
    config = config or LineSearchConfig()
    net = net or nn.landing_network(seed=seed)
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "a" if start_iteration else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not start_iteration:
            writer.writeheader()
    stalled = False
    try:
        for k in range(start_iteration, start_iteration + iterations):
            t0 = time.perf_counter()
            loss, grads = loss_gradient(net, pairs_train)
            try:
                lam = line_search_lr(net, grads, pairs_train, config, loss0=loss)
            except Stalled as exc:
                log.info("k=%d stalled: %s", k, exc)
                stalled = True
                break
            nn.apply_update(net, grads, lam)
            val = landing_loss(net, pairs_val) if pairs_val else float("nan")
            row = {"k": k, "train_loss": loss, "val_loss": val, "lambda": lam}
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if checkpoint_path is not None:
                nn.save_checkpoint(checkpoint_path, net, iteration=k + 1)
            log.info("k=%d train=%.3f val=%.3f lambda=%.3g (%d ms)", k, loss, val, lam,
                     int(1000 * (time.perf_counter() - t0)))
    finally:
        if fh is not None:
            fh.close()
    return LandingResult(net, history, stalled)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def to_full_image(raw, width: int) -> Pixel:
    """Round, clamp into the crop, then shift columns by ``width - 80``."""
    r = min(max(round_half_away(float(raw[0])), 0), CROP_ROWS - 1)
    c = min(max(round_half_away(float(raw[1])), 0), CROP_COLS - 1)
    return Pixel(r, c + (width - CROP_COLS))


def predict_landing(net: nn.Network, image: np.ndarray) -> Pixel:
    sub = crop_upper_right(image)
    raw, _ = net.forward(sub.patch, keep_cache=False)
    return to_full_image(raw[0], image.shape[1])


def landing_distance(spot, sample: Sample) -> float:
    """Distance from ``spot`` to the nearest true-contour pixel."""
    pts = sample.contour.points
    return float(np.min(np.hypot(pts[:, 0] - spot[0], pts[:, 1] - spot[1])))


def config_dict(cfg: LineSearchConfig) -> dict:
    return asdict(cfg)
