"""Sensor model, cylindrical range images and the on-disk frame container."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class Label(IntEnum):
    VALID = 0
    RAIN = 1
    FOG = 2
    NO_RETURN = 255


# Classes the network predicts, in logit order.
CLASSES = (Label.VALID, Label.RAIN, Label.FOG)
WEATHER_CLASSES = (Label.RAIN, Label.FOG)


def default_vertical_angles(rings=32, lowest=-25.0, highest=15.0):
    return tuple(float(a) for a in np.linspace(lowest, highest, rings))


@dataclass(frozen=True)
class SensorModel:
    """Rotating multi-beam lidar: one image row per ring, one column per azimuth segment."""

    rings: int = 32
    cols: int = 1800
    vertical_angles: tuple = field(default_factory=default_vertical_angles)
    max_range: float = 200.0

    def __post_init__(self):
        if self.rings < 1 or self.cols < 1:
            raise ValueError(f"rings and cols must be >= 1, got {self.rings}x{self.cols}")
        angles = tuple(float(a) for a in self.vertical_angles)
        object.__setattr__(self, "vertical_angles", angles)
        if len(angles) != self.rings:
            raise ValueError(f"need {self.rings} vertical angles, got {len(angles)}")
        steps = np.diff(angles)
        if len(steps) and not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("vertical angles must be strictly monotonic")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def azimuth_resolution(self) -> float:
        return 360.0 / self.cols

    @property
    def shape(self):
        return (self.rings, self.cols)

    def column_azimuths(self) -> np.ndarray:
        """Azimuth in degrees at the centre of every column."""
        return (np.arange(self.cols) + 0.5) * self.azimuth_resolution

    def to_dict(self):
        return {
            "rings": self.rings,
            "cols": self.cols,
            "vertical_angles": list(self.vertical_angles),
            "max_range": self.max_range,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        rings = int(d.get("rings", 32))
        angles = d.get("vertical_angles") or default_vertical_angles(rings)
        return cls(rings=rings, cols=int(d.get("cols", 1800)),
                   vertical_angles=tuple(angles), max_range=float(d.get("max_range", 200.0)))


@dataclass(frozen=True)
class PointCloud:
    """One 360 degree scan as parallel arrays, one entry per return."""

    ring: np.ndarray
    azimuth: np.ndarray
    distance: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        n = len(self.ring)
        for name in ("azimuth", "distance", "intensity"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"PointCloud field {name!r} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.ring)


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Distance matrix D and intensity matrix I; distance 0 marks a pixel without return."""

    distance: np.ndarray
    intensity: np.ndarray
    frame_id: str = "frame"
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.distance, dtype=np.float32)
        i = np.asarray(self.intensity, dtype=np.float32)
        if d.ndim != 2 or d.shape != i.shape:
            raise ValueError(f"distance {d.shape} and intensity {i.shape} must be equal 2-D shapes")
        object.__setattr__(self, "distance", d)
        object.__setattr__(self, "intensity", i)

    @property
    def shape(self):
        return self.distance.shape

    @property
    def returns(self) -> np.ndarray:
        """Boolean mask of pixels holding a return."""
        return self.distance > 0

    def no_return_labels(self) -> np.ndarray:
        """Label image that is NO_RETURN on empty pixels and VALID elsewhere."""
        labels = np.full(self.shape, Label.VALID, dtype=np.uint8)
        labels[~self.returns] = Label.NO_RETURN
        return labels

    def with_arrays(self, distance, intensity):
        return RangeImage(distance, intensity, self.frame_id, self.timestamp)

    def __eq__(self, other):
        if not isinstance(other, RangeImage):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.timestamp == other.timestamp
                and np.array_equal(self.distance, other.distance)
                and np.array_equal(self.intensity, other.intensity))


def empty_image(sensor: SensorModel, frame_id="frame", timestamp=0.0) -> RangeImage:
    z = np.zeros(sensor.shape, dtype=np.float32)
    return RangeImage(z, z.copy(), frame_id, timestamp)


class InvalidReturnError(ValueError):
    def __init__(self, index, reason):
        super().__init__(f"return {index}: {reason}")
        self.index = index


def _first_bad(mask):
    return int(np.flatnonzero(mask)[0])


def project_scan(cloud: PointCloud, sensor: SensorModel, frame_id="frame", timestamp=0.0) -> RangeImage:
    """Merge one scan into a cylindrical range image.

    Row is the ring index, column is ``floor(azimuth / resolution)``. When two
    returns land on the same pixel the nearer one is kept.
    """
    ring = np.asarray(cloud.ring)
    az = np.asarray(cloud.azimuth, dtype=np.float64)
    dist = np.asarray(cloud.distance, dtype=np.float64)
    inten = np.asarray(cloud.intensity, dtype=np.float64)

    checks = [
        ((ring < 0) | (ring >= sensor.rings) | (ring != np.floor(ring)), f"ring outside [0, {sensor.rings})"),
        (~((az >= 0) & (az < 360)), "azimuth outside [0, 360)"),
        (~((dist > 0) & (dist <= sensor.max_range)), f"distance outside (0, {sensor.max_range}]"),
        (~((inten >= 0) & (inten <= 1)), "intensity outside [0, 1]"),
    ]
    for bad, reason in checks:
        if bad.any():
            idx = _first_bad(bad)
            raise InvalidReturnError(idx, f"{reason} (ring={ring[idx]}, azimuth={az[idx]}, "
                                          f"distance={dist[idx]}, intensity={inten[idx]})")

    image = empty_image(sensor, frame_id, timestamp)
    if len(ring) == 0:
        return image
    # az * cols / 360 keeps exact column boundaries (180 deg -> 900) where az / res would not
    col = np.minimum(np.floor(az * sensor.cols / 360.0).astype(np.int64), sensor.cols - 1)
    pix = ring.astype(np.int64) * sensor.cols + col
    order = np.lexsort((dist, pix))  # by pixel, then nearest first
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    keep = order[first]
    d = image.distance.reshape(-1)
    i = image.intensity.reshape(-1)
    d[pix[keep]] = dist[keep]
    i[pix[keep]] = inten[keep]
    # float32 rounding must not turn a tiny return into the sentinel
    d[pix[keep]] = np.maximum(d[pix[keep]], np.finfo(np.float32).tiny)
    return image


def image_to_returns(image: RangeImage, sensor: SensorModel) -> PointCloud:
    """Turn every pixel holding a return back into a return at the column centre azimuth."""
    rows, cols = np.nonzero(image.returns)
    az = (cols + 0.5) * sensor.azimuth_resolution
    return PointCloud(rows, az, image.distance[rows, cols].astype(np.float64),
                      image.intensity[rows, cols].astype(np.float64))


def image_to_xyz(image: RangeImage, sensor: SensorModel):
    """Cartesian coordinates of all returns.

    Returns ``(xyz, rows, cols)`` where ``xyz`` is ``(N, 3)`` in sensor frame
    (x forward at azimuth 0, z up).
    """
    rows, cols = np.nonzero(image.returns)
    d = image.distance[rows, cols].astype(np.float64)
    theta = np.radians(np.asarray(sensor.vertical_angles))[rows]
    phi = np.radians((cols + 0.5) * sensor.azimuth_resolution)
    xy = d * np.cos(theta)
    xyz = np.stack([xy * np.cos(phi), xy * np.sin(phi), d * np.sin(theta)], axis=1)
    return xyz, rows, cols


def crop_fov(image: RangeImage, start_col: int, width: int) -> RangeImage:
    """Horizontal crop of ``width`` columns starting at ``start_col``, wrapping around 360 degrees."""
    cols = image.shape[1]
    if width <= 0:
        raise ValueError("crop width must be positive")
    if width > cols:
        raise ValueError(f"crop width {width} exceeds image width {cols}")
    idx = (start_col + np.arange(width)) % cols
    return image.with_arrays(image.distance[:, idx], image.intensity[:, idx])


def crop_labels(labels: np.ndarray, start_col: int, width: int) -> np.ndarray:
    if width <= 0 or width > labels.shape[1]:
        raise ValueError(f"invalid crop width {width}")
    return labels[:, (start_col + np.arange(width)) % labels.shape[1]]


def forward_crop_start(cols: int, width: int) -> int:
    """First column of a crop of ``width`` centred on azimuth 0 (straight ahead)."""
    return (cols - width // 2) % cols


# --- frame container -------------------------------------------------------

MAGIC = "LRI1"
_LABEL_CODES = np.array([int(c) for c in Label], dtype=np.uint8)


class FrameDecodeError(ValueError):
    def __init__(self, offset, message):
        super().__init__(f"byte offset {offset}: {message}")
        self.offset = offset
        self.detail = message


def encode_frame(image: RangeImage, labels: np.ndarray | None = None) -> bytes:
    rows, cols = image.shape
    if any(c.isspace() for c in image.frame_id) or not image.frame_id:
        raise ValueError(f"frame_id must be non-empty without whitespace: {image.frame_id!r}")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != image.shape:
            raise ValueError(f"label shape {labels.shape} != image shape {image.shape}")
        if not np.isin(labels, _LABEL_CODES).all():
            raise ValueError("labels contain unknown codes")
    header = f"{MAGIC} {rows} {cols} {int(labels is not None)} {image.frame_id} {float(image.timestamp)!r}\n"
    parts = [header.encode("ascii"),
             image.distance.astype("<f4").tobytes(),
             image.intensity.astype("<f4").tobytes()]
    if labels is not None:
        parts.append(labels.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_frame_at(buf: bytes, offset: int = 0):
    """Decode one frame starting at ``offset``; returns ``(image, labels, next_offset)``."""
    end = buf.find(b"\n", offset, offset + 512)
    if end < 0:
        raise FrameDecodeError(offset, "missing header line")
    try:
        fields = buf[offset:end].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise FrameDecodeError(offset, "header is not ASCII") from None
    if len(fields) != 6 or fields[0] != MAGIC:
        raise FrameDecodeError(offset, f"malformed header {buf[offset:end]!r}")
    try:
        rows, cols, has_labels = int(fields[1]), int(fields[2]), int(fields[3])
        timestamp = float(fields[5])
    except ValueError:
        raise FrameDecodeError(offset, f"malformed header {buf[offset:end]!r}") from None
    if rows < 1 or cols < 1 or has_labels not in (0, 1):
        raise FrameDecodeError(offset, f"bad shape or label flag in header {buf[offset:end]!r}")
    body = end + 1
    n = rows * cols
    need = n * 8 + (n if has_labels else 0)
    have = len(buf) - body
    if have < need:
        raise FrameDecodeError(body, f"truncated body: expected {need} bytes, got {have}")
    dist = np.frombuffer(buf, dtype="<f4", count=n, offset=body).reshape(rows, cols)
    inten = np.frombuffer(buf, dtype="<f4", count=n, offset=body + 4 * n).reshape(rows, cols)
    labels = None
    if has_labels:
        lab_off = body + 8 * n
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=lab_off).reshape(rows, cols).copy()
        bad = ~np.isin(labels, _LABEL_CODES)
        if bad.any():
            k = _first_bad(bad.reshape(-1))
            raise FrameDecodeError(lab_off + k, f"unknown label code {labels.reshape(-1)[k]}")
    image = RangeImage(dist.astype(np.float32), inten.astype(np.float32), fields[4], timestamp)
    return image, labels, body + need


def decode_frame(buf: bytes):
    image, labels, end = decode_frame_at(buf, 0)
    if end != len(buf):
        raise FrameDecodeError(end, f"{len(buf) - end} trailing bytes after frame")
    return image, labels


def decode_frames(buf: bytes):
    """Decode a concatenation of frame containers."""
    out = []
    off = 0
    while off < len(buf):
        image, labels, off = decode_frame_at(buf, off)
        out.append((image, labels))
    return out


def write_frame(path, image, labels=None):
    Path(path).write_bytes(encode_frame(image, labels))


def read_frame(path):
    try:
        return decode_frame(Path(path).read_bytes())
    except FrameDecodeError as exc:
        raise FrameDecodeError(exc.offset, f"{path}: {exc.detail}") from None


def read_csv_returns(source, intensity_scale: float = 1.0) -> PointCloud:
    """Read ``ring,azimuth_deg,distance_m,intensity`` rows.

    Intensities are divided by ``intensity_scale`` (e.g. 255 for 8-bit
    sensors) so the cloud carries normalised reflectance.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    reader = csv.DictReader(io.StringIO(text))
    required = ["ring", "azimuth_deg", "distance_m", "intensity"]
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in required):
        raise ValueError(f"CSV needs columns {required}, got {reader.fieldnames}")
    rows = list(reader)
    ring = np.array([int(r["ring"]) for r in rows], dtype=np.int64)
    az = np.array([float(r["azimuth_deg"]) for r in rows])
    dist = np.array([float(r["distance_m"]) for r in rows])
    inten = np.array([float(r["intensity"]) for r in rows]) / intensity_scale
    return PointCloud(ring, az, dist, inten)


def label_counts(labels: np.ndarray) -> dict:
    return {c.name: int(np.count_nonzero(labels == c)) for c in Label}


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite values")
