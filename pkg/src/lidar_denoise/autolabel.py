"""Weather ground truth from clear-weather reference recordings of a static scene."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Label, RangeImage, crop_fov, decode_frames, encode_frame, forward_crop_start


@dataclass(frozen=True, eq=False)
class ReferenceStack:
    """Distance images of ``f`` clear frames stacked along the last axis."""

    distances: np.ndarray
    frame_ids: tuple = ()

    def __post_init__(self):
        if self.distances.ndim != 3 or self.distances.shape[2] < 1:
            raise ValueError(f"reference stack must be rows x cols x f with f >= 1, got {self.distances.shape}")

    @property
    def frame_count(self) -> int:
        return self.distances.shape[2]

    @property
    def shape(self):
        return self.distances.shape[:2]


@dataclass(frozen=True)
class AutolabelParams:
    delta_r: float = 0.35
    weather_class: Label = Label.FOG

    def __post_init__(self):
        if not self.delta_r > 0:
            raise ValueError("delta_r must be positive")
        if Label(self.weather_class) not in (Label.RAIN, Label.FOG):
            raise ValueError("weather_class must be RAIN or FOG")


@dataclass(frozen=True)
class FalseRateReport:
    per_frame_false_counts: tuple
    mean_per_pixel_false_rate: float
    std_per_pixel_false_rate: float
    pixels_per_frame: int

    def to_dict(self):
        return {
            "per_frame_false_counts": list(self.per_frame_false_counts),
            "mean_per_pixel_false_rate": self.mean_per_pixel_false_rate,
            "std_per_pixel_false_rate": self.std_per_pixel_false_rate,
            "pixels_per_frame": self.pixels_per_frame,
        }


def accumulate_reference(frames) -> ReferenceStack:
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one reference frame")
    shape = frames[0].shape
    for k, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"reference frame {k} has shape {f.shape}, expected {shape}")
    stack = np.stack([f.distance for f in frames], axis=2)
    return ReferenceStack(stack, tuple(f.frame_id for f in frames))


def min_reference_gap(distance: np.ndarray, ref: ReferenceStack) -> np.ndarray:
    """Per pixel ``min_k |d_ref[k] - d|`` over reference frames with a return; inf if none."""
    gap = np.abs(ref.distances.astype(np.float64) - distance.astype(np.float64)[:, :, None])
    gap[ref.distances <= 0] = np.inf
    return gap.min(axis=2)


def label_clutter(image: RangeImage, ref: ReferenceStack, params: AutolabelParams = AutolabelParams()) -> np.ndarray:
    """A return is VALID when some reference return lies within ``delta_r`` of it, clutter otherwise."""
    if image.shape != ref.shape:
        raise ValueError(f"image shape {image.shape} != reference shape {ref.shape}")
    gap = min_reference_gap(image.distance, ref)
    labels = np.where(gap <= params.delta_r, np.uint8(Label.VALID), np.uint8(params.weather_class))
    labels[~image.returns] = Label.NO_RETURN
    return labels.astype(np.uint8)


def reference_self_check(frames, params: AutolabelParams = AutolabelParams(), crop_width: int = 400,
                         start_col: int | None = None) -> FalseRateReport:
    """Label each half of a clear recording against the other half and count false clutter.

    Ideally every point is VALID; the returned rates are false clutter per
    pixel of a ``rows x crop_width`` crop (forward facing unless
    ``start_col`` is given).
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("self-check needs at least two frames")
    half = len(frames) // 2
    first, second = frames[:half], frames[half:2 * half]
    cols = frames[0].shape[1]
    if start_col is None:
        start_col = forward_crop_start(cols, crop_width)

    def crop(f):
        return crop_fov(f, start_col, crop_width)

    counts = []
    for labelled, reference in ((second, first), (first, second)):
        ref = accumulate_reference([crop(f) for f in reference])
        for f in labelled:
            lab = label_clutter(crop(f), ref, params)
            counts.append(int(np.count_nonzero(lab == params.weather_class)))
    pixels = frames[0].shape[0] * crop_width
    rates = np.array(counts, dtype=np.float64) / pixels
    return FalseRateReport(tuple(counts), float(rates.mean()), float(rates.std()), pixels)


def save_reference_stack(directory, frames, name="reference"):
    """Persist clear frames as one concatenated container file plus a JSON manifest.

    The stack uses the ``.lrs`` extension so directory scans for single
    ``.lri`` frames never pick it up.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = b"".join(encode_frame(f) for f in frames)
    (directory / f"{name}.lrs").write_bytes(blob)
    manifest = {"stack": f"{name}.lrs", "frames": [f.frame_id for f in frames],
                "shape": list(frames[0].shape)}
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_reference_frames(manifest_path):
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    decoded = decode_frames((manifest_path.parent / manifest["stack"]).read_bytes())
    frames = [img for img, _ in decoded]
    ids = [f.frame_id for f in frames]
    if ids != list(manifest["frames"]):
        raise ValueError(f"{manifest_path}: stack members {ids} do not match manifest {manifest['frames']}")
    return frames
