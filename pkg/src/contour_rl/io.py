"""On-disk formats: binary PGM/PPM, contour CSV, sample pairs and dataset manifests."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .contours import Contour
from .data import Sample, quantize
from .errors import BoundsError, ParseError

SPLITS = ("train", "val", "test")


def _read_header(data: bytes, magic: bytes, nfields: int):
    """Parse a netpbm header; returns (fields, offset of the first raster byte)."""
    if not data.startswith(magic):
        raise ParseError(f"expected magic {magic.decode()}", 0)
    pos = len(magic)
    fields = []
    n = len(data)
    while len(fields) < nfields:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header field", start)
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ParseError("header not terminated by whitespace", pos)
    return fields, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 file with maxval <= 255 into float32 intensities in [0, 1]."""
    data = Path(path).read_bytes()
    (width, height, maxval), off = _read_header(data, b"P5", 3)
    if not 0 < maxval <= 255:
        raise ParseError(f"unsupported maxval {maxval}", off)
    if width < 1 or height < 1:
        raise ParseError(f"bad image size {width}x{height}", off)
    need = width * height
    if len(data) - off < need:
        raise ParseError(f"raster truncated: need {need} bytes, have {len(data) - off}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(height, width)
    if maxval == 255:
        return raw.astype(np.float32) / np.float32(255.0)
    return quantize(raw.astype(np.float64) / maxval)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(q.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    arr = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (width, height, maxval), off = _read_header(data, b"P6", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", off)
    need = width * height * 3
    if len(data) - off < need:
        raise ParseError("raster truncated", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(height, width, 3).copy()


def write_points_csv(path, points) -> None:
    with open(path, "w") as f:
        for r, c in np.asarray(points, dtype=np.int64).reshape(-1, 2):
            f.write(f"{r},{c}\n")


def read_points_csv(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pts = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.strip()
        if text:
            parts = text.split(b",")
            try:
                if len(parts) != 2:
                    raise ValueError
                pts.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(f"expected 'row,col', got {text[:40]!r}", offset) from None
        offset += len(line)
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def read_contour_csv(path, shape: tuple[int, int] | None = None) -> Contour:
    pts = read_points_csv(path)
    if shape is not None and len(pts):
        h, w = shape
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= h) | (pts[:, 1] < 0) | (pts[:, 1] >= w)
        if bad.any():
            i = int(np.argmax(bad))
            raise BoundsError(f"{path}: point {i} {tuple(pts[i])} outside the {h}x{w} image")
    return Contour(pts)


def save_sample(sample: Sample, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img_path = d / f"{sample.id}.pgm"
    csv_path = d / f"{sample.id}.csv"
    write_pgm(img_path, sample.image)
    write_points_csv(csv_path, sample.contour.points)
    return img_path, csv_path


def load_sample(image_path, contour_path, sample_id: str | None = None) -> Sample:
    image = read_pgm(image_path)
    contour = read_contour_csv(contour_path, shape=image.shape)
    if sample_id is None:
        sample_id = Path(image_path).stem
    return Sample(image=image, contour=contour, id=sample_id)


def write_manifest(path, entries: list[dict]) -> None:
    for e in entries:
        if e["split"] not in SPLITS:
            raise ValueError(f"unknown split {e['split']!r}")
    atomic_write_text(path, json.dumps({"samples": entries}, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    raw = Path(path).read_text()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    entries = doc["samples"] if isinstance(doc, dict) else doc
    for e in entries:
        missing = {"id", "image_path", "contour_path", "split"} - set(e)
        if missing:
            raise ParseError(f"manifest entry missing {sorted(missing)}")
        if e["split"] not in SPLITS:
            raise ParseError(f"manifest entry {e['id']!r} has unknown split {e['split']!r}")
    return entries


def load_split(manifest_path, split: str) -> list[Sample]:
    base = Path(manifest_path).parent
    out = []
    for e in read_manifest(manifest_path):
        if e["split"] == split:
            out.append(load_sample(base / e["image_path"], base / e["contour_path"], e["id"]))
    return out


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
