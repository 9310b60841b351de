"""Dense grid types, image/annotation metadata and file I/O.

Grid files are little-endian: the magic ``SLGD``, three ``uint32``
dimensions (width, height, channels) and then ``width*height*channels``
``float32`` values in row-major order with channels interleaved.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from salient_align.errors import (
    BadMagic,
    DimensionMismatch,
    IoFailure,
    NonFiniteValue,
    ValidationError,
)

MAGIC = b"SLGD"
HEADER = struct.Struct("<4sIII")
PLANES = ("TV", "TC")

PathLike = Union[str, os.PathLike]


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SaliencyGrid:
    """Predicted gaze probability per cell, stored as ``values[y, x]``."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 2:
            raise DimensionMismatch(f"saliency grid must be 2D, got shape {arr.shape}")
        h, w = arr.shape
        if w < 3 or h < 3:
            raise DimensionMismatch(f"saliency grid must be at least 3x3, got {w}x{h}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("saliency grid contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return 1

    def __eq__(self, other):
        if not isinstance(other, SaliencyGrid):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Per-cell feature vectors, stored as ``values[y, x, channel]``."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim == 2:
            arr = _frozen(arr[:, :, None])
        if arr.ndim != 3:
            raise DimensionMismatch(f"feature grid must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionMismatch(f"empty feature grid {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("feature grid contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )


Grid = Union[SaliencyGrid, FeatureGrid]


@dataclass(frozen=True)
class ImageMeta:
    image_id: str
    pixel_width: int
    pixel_height: int
    scale_x: float
    scale_y: float

    def __post_init__(self):
        if self.pixel_width <= 0 or self.pixel_height <= 0:
            raise ValidationError("image dimensions must be positive")
        if not (self.scale_x > 0 and self.scale_y > 0):
            raise ValidationError("grid scale factors must be positive")

    @classmethod
    def for_grid(cls, image_id: str, pixel_width: int, pixel_height: int,
                 grid_width: int, grid_height: int) -> "ImageMeta":
        """Derive the pixels-per-cell factors from the actual sizes."""
        return cls(image_id, int(pixel_width), int(pixel_height),
                   pixel_width / grid_width, pixel_height / grid_height)


def grid_to_pixel(p, meta: ImageMeta) -> tuple[float, float]:
    """Map a (sub)cell position to the pixel center of its receptive block."""
    return ((p[0] + 0.5) * meta.scale_x, (p[1] + 0.5) * meta.scale_y)


def pixel_to_grid(p, meta: ImageMeta) -> tuple[float, float]:
    return (p[0] / meta.scale_x - 0.5, p[1] / meta.scale_y - 0.5)


@dataclass(frozen=True)
class AnnotationSet:
    """Manual ground truth for one image, all coordinates in pixels.

    ``segment`` is the LV line on TV images and the TCD line on TC images.
    """

    image_id: str
    csp_center: tuple[float, float]
    segment: tuple[tuple[float, float], tuple[float, float]]
    hc_center: tuple[float, float]
    hc_a: float
    hc_b: float
    hc_theta: float = 0.0
    plane: str = "TV"

    def __post_init__(self):
        if not (self.hc_a >= self.hc_b > 0):
            raise ValidationError(
                f"{self.image_id}: HC ellipse needs a >= b > 0, got a={self.hc_a}, b={self.hc_b}")
        if self.plane not in PLANES:
            raise ValidationError(f"unknown plane {self.plane!r}")

    @property
    def hc_long_axis(self) -> float:
        return 2.0 * self.hc_a

    @property
    def segment_midpoint(self) -> tuple[float, float]:
        (x1, y1), (x2, y2) = self.segment
        return (0.5 * (x1 + x2), 0.5 * (y1 + y2))

    def structure_point(self, name: str) -> tuple[float, float]:
        if name == "csp":
            return tuple(self.csp_center)
        if name == "lv":
            return self.segment_midpoint
        if name == "hc":
            return tuple(self.hc_center)
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "csp_center": list(self.csp_center),
            "segment": [list(self.segment[0]), list(self.segment[1])],
            "hc_ellipse": {"center": list(self.hc_center), "a": self.hc_a,
                           "b": self.hc_b, "theta": self.hc_theta},
        }

    @classmethod
    def from_json(cls, image_id: str, plane: str, doc: dict) -> "AnnotationSet":
        try:
            ell = doc["hc_ellipse"]
            seg = doc["segment"]
            return cls(
                image_id=image_id,
                csp_center=(float(doc["csp_center"][0]), float(doc["csp_center"][1])),
                segment=((float(seg[0][0]), float(seg[0][1])),
                         (float(seg[1][0]), float(seg[1][1]))),
                hc_center=(float(ell["center"][0]), float(ell["center"][1])),
                hc_a=float(ell["a"]),
                hc_b=float(ell["b"]),
                hc_theta=float(ell.get("theta", 0.0)),
                plane=plane,
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ValidationError(f"{image_id}: malformed annotations ({exc})") from exc


# ---------------------------------------------------------------------------
# grid files

def encode_grid(grid: Grid) -> bytes:
    values = grid.values.astype("<f4", copy=False)
    return HEADER.pack(MAGIC, grid.width, grid.height, grid.channels) + values.tobytes(order="C")


def decode_grid(data: bytes, name: str = "<bytes>") -> Grid:
    if len(data) < HEADER.size or data[:4] != MAGIC:
        raise BadMagic(f"{name}: not a grid file (missing 'SLGD' magic)")
    _, w, h, c = HEADER.unpack_from(data)
    payload = len(data) - HEADER.size
    expected = w * h * c * 4
    if payload != expected:
        raise DimensionMismatch(
            f"{name}: header declares {w}x{h}x{c} cells ({expected} bytes), payload has {payload}")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{name}: non-finite value in payload")
    if c == 1:
        return SaliencyGrid(values.reshape(h, w))
    return FeatureGrid(values.reshape(h, w, c))


def read_grid(path: PathLike) -> Grid:
    """Read a saliency (1 channel) or feature (>1 channel) grid file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_grid(data, str(path))


def write_grid(grid: Grid, path: PathLike) -> None:
    try:
        Path(path).write_bytes(encode_grid(grid))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# portable graymap images

def write_pgm(image: np.ndarray, path: PathLike) -> None:
    """Write a float image in [0, 1] as a 16-bit binary PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    raw = np.round(img * 65535.0).astype(">u2")
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(raw.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary (P5) PGM as float64 in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise BadMagic(f"{path}: only binary P5 graymaps are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos != n:
        raise DimensionMismatch(f"{path}: expected {n} pixel bytes, got {len(data) - pos}")
    arr = np.frombuffer(data, dtype=dtype, offset=pos).reshape(h, w)
    return arr.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# dataset manifest

@dataclass
class ImageRecord:
    image_id: str
    pixel_width: int
    pixel_height: int
    saliency_grid: Path
    feature_grid: Optional[Path] = None
    plane: str = "TV"
    annotations: Optional[AnnotationSet] = None
    image: Optional[Path] = None

    def load_saliency(self) -> SaliencyGrid:
        grid = read_grid(self.saliency_grid)
        if not isinstance(grid, SaliencyGrid):
            raise DimensionMismatch(f"{self.saliency_grid}: expected a 1-channel saliency grid")
        return grid

    def load_features(self) -> FeatureGrid:
        if self.feature_grid is None:
            raise DimensionMismatch(f"{self.image_id}: no feature grid listed")
        grid = read_grid(self.feature_grid)
        if isinstance(grid, SaliencyGrid):
            grid = FeatureGrid(grid.values[:, :, None])
        return grid

    def meta(self, grid: Grid) -> ImageMeta:
        return ImageMeta.for_grid(self.image_id, self.pixel_width, self.pixel_height,
                                  grid.width, grid.height)


@dataclass
class Manifest:
    images: list[ImageRecord]
    pairs: Optional[list[tuple[str, str]]] = None
    root: Path = field(default_factory=Path)

    def by_id(self) -> dict[str, ImageRecord]:
        return {rec.image_id: rec for rec in self.images}


def load_manifest(path: PathLike) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    records = []
    seen = set()
    for entry in doc.get("images", []):
        try:
            image_id = str(entry["id"])
            plane = entry.get("plane", "TV")
            rec = ImageRecord(
                image_id=image_id,
                pixel_width=int(entry["pixel_width"]),
                pixel_height=int(entry["pixel_height"]),
                saliency_grid=root / entry["saliency_grid"],
                feature_grid=root / entry["feature_grid"] if entry.get("feature_grid") else None,
                plane=plane,
                annotations=(AnnotationSet.from_json(image_id, plane, entry["annotations"])
                             if entry.get("annotations") else None),
                image=root / entry["image"] if entry.get("image") else None,
            )
        except KeyError as exc:
            raise ValidationError(f"{path}: image entry missing {exc}") from exc
        if rec.plane not in PLANES:
            raise ValidationError(f"{image_id}: unknown plane {rec.plane!r}")
        if image_id in seen:
            raise ValidationError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        records.append(rec)
    pairs = doc.get("pairs")
    if pairs is not None:
        pairs = [(str(a), str(b)) for a, b in pairs]
    return Manifest(records, pairs, root)


def manifest_entry(rec: ImageRecord, root: Path) -> dict:
    def rel(p):
        return os.path.relpath(p, root) if p is not None else None

    entry = {
        "id": rec.image_id,
        "pixel_width": rec.pixel_width,
        "pixel_height": rec.pixel_height,
        "saliency_grid": rel(rec.saliency_grid),
        "feature_grid": rel(rec.feature_grid),
        "plane": rec.plane,
    }
    if rec.image is not None:
        entry["image"] = rel(rec.image)
    if rec.annotations is not None:
        entry["annotations"] = rec.annotations.to_json()
    return entry
