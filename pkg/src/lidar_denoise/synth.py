"""Procedural static scenes raycast with the sensor model, and labelled weather datasets built from them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from .autolabel import save_reference_stack
from .core import Label, RangeImage, SensorModel, encode_frame

# --- scene description -------------------------------------------------------


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    yaw: float = 0.0  # degrees about z
    reflectance: float = 0.5
    kind: str = "box"


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder standing on ``base_z``."""

    center: tuple  # (x, y)
    radius: float
    height: float
    base_z: float = 0.0
    reflectance: float = 0.5
    kind: str = "cylinder"


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    reflectance: float = 0.5
    kind: str = "sphere"


_KINDS = {"box": Box, "cylinder": Cylinder, "sphere": Sphere}


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    ground_height: float | None = 0.0
    ground_reflectance: float = 0.25
    sensor_position: tuple = (0.0, 0.0, 1.8)
    sensor_yaw: float = 0.0
    noise_sigma: float = 0.0
    name: str = "scene"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        refl = [p.reflectance for p in self.primitives] + [self.ground_reflectance]
        if any(not 0 <= r <= 1 for r in refl):
            raise ValueError("reflectances must lie in [0, 1]")
        for k, p in enumerate(self.primitives):
            dims = {"box": lambda q: q.size, "cylinder": lambda q: (q.radius, q.height),
                    "sphere": lambda q: (q.radius,)}[p.kind](p)
            if any(not v > 0 for v in dims):
                raise ValueError(f"primitive {k} ({p.kind}) has zero or negative extent")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        prims = tuple(_KINDS[p["kind"]](**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                      for p in d.pop("primitives", ()))
        if "sensor_position" in d:
            d["sensor_position"] = tuple(d["sensor_position"])
        return cls(primitives=prims, **d)


# --- ray intersection ---------------------------------------------------------


def ray_directions(sensor: SensorModel, yaw_deg=0.0):
    theta = np.radians(np.asarray(sensor.vertical_angles))[:, None]
    phi = np.radians(sensor.column_azimuths() + yaw_deg)[None, :]
    ct = np.cos(theta)
    return np.stack(np.broadcast_arrays(ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)), axis=-1)


def _hit_plane_z(o, d, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[2]) / d[..., 2]
    return np.where(t > 0, t, np.inf)


def _hit_sphere(o, d, s: Sphere):
    oc = o - np.asarray(s.center, dtype=np.float64)
    b = d @ oc
    c = oc @ oc - s.radius ** 2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    t0, t1 = -b - root, -b + root
    t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
    return np.where(disc >= 0, t, np.inf)


def _hit_cylinder(o, d, cy: Cylinder):
    cx, cyy = cy.center
    ox, oy = o[0] - cx, o[1] - cyy
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - cy.radius ** 2
    disc = b * b - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        root = np.sqrt(disc)
        t0 = (-b - root) / a
        t1 = (-b + root) / a
    z_lo, z_hi = cy.base_z, cy.base_z + cy.height
    best = np.full(d.shape[:-1], np.inf)
    for t in (t0, t1):
        z = o[2] + t * dz
        ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= z_lo) & (z <= z_hi)
        best = np.where(ok & (t < best), t, best)
    for zc in (z_lo, z_hi):
        t = _hit_plane_z(o, d, zc)
        with np.errstate(invalid="ignore"):
            x = ox + t * dx
            y = oy + t * dy
            ok = np.isfinite(t) & (x * x + y * y <= cy.radius ** 2)
        best = np.where(ok & (t < best), t, best)
    return best


def _hit_box(o, d, bx: Box):
    yaw = math.radians(bx.yaw)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    lo_ = rot @ (o - np.asarray(bx.center, dtype=np.float64))
    ld = d @ rot.T
    half = np.asarray(bx.size, dtype=np.float64) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo_) / ld
        t2 = (half - lo_) / ld
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = ld == 0
    inside = np.abs(lo_) <= half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


_HIT = {"box": _hit_box, "cylinder": _hit_cylinder, "sphere": _hit_sphere}


def raycast_scene(scene: SceneSpec, sensor: SensorModel = SensorModel(), seed=0,
                  frame_id=None, timestamp=0.0) -> RangeImage:
    """One clear-weather frame: nearest hit per (ring, column) ray within ``max_range``.

    Intensity is ``reflectance / (1 + d / 100)`` clipped to [0, 1]; the
    distance gets Gaussian noise of ``scene.noise_sigma``.
    """
    o = np.asarray(scene.sensor_position, dtype=np.float64)
    d = ray_directions(sensor, scene.sensor_yaw)
    best = np.full(sensor.shape, np.inf)
    refl = np.zeros(sensor.shape)
    if scene.ground_height is not None:
        best = _hit_plane_z(o, d, scene.ground_height)
        refl[:] = scene.ground_reflectance
    for p in scene.primitives:
        t = _HIT[p.kind](o, d, p)
        closer = t < best
        best = np.where(closer, t, best)
        refl = np.where(closer, p.reflectance, refl)
    hit = best <= sensor.max_range
    rng = np.random.Generator(np.random.Philox(key=seed))
    noise = rng.standard_normal(sensor.shape) * scene.noise_sigma
    dist = np.where(hit, best + noise, 0.0)
    # noise must not push a return onto the sentinel or past the range limit
    dist = np.where(hit, np.clip(dist, 1e-3, sensor.max_range), 0.0)
    inten = np.where(hit, np.clip(refl / (1.0 + np.where(hit, best, 0) / 100.0), 0.0, 1.0), 0.0)
    return RangeImage(dist, inten, frame_id or scene.name, timestamp)


# --- procedural scenes -------------------------------------------------------


def pedestrian(x, y, reflectance=0.6):
    return Cylinder((x, y), 0.3, 1.75, 0.0, reflectance)


def car(x, y, yaw=0.0, reflectance=0.5):
    return Box((x, y, 0.75), (4.5, 1.8, 1.5), yaw, reflectance)


def road_scene(seed=0, noise_sigma=0.02, name=None) -> SceneSpec:
    """A street along the x axis: facades on both sides, parked cars, pedestrians, poles,
    and distant buildings 110-190 m away in the street's line of sight."""
    rng = np.random.default_rng(seed)
    prims = []
    width = rng.uniform(9, 14)
    for side in (-1, 1):
        x = rng.uniform(-70, -50)
        while x < 70:
            length = rng.uniform(8, 25)
            if rng.random() < 0.75:
                h = rng.uniform(6, 16)
                depth = rng.uniform(8, 15)
                prims.append(Box((x + length / 2, side * (width + depth / 2), h / 2), (length, depth, h),
                                 0.0, rng.uniform(0.2, 0.7)))
            x += length + rng.uniform(0, 6)
    for _ in range(rng.integers(4, 9)):
        x = rng.uniform(-40, 40)
        if abs(x) < 4:
            x += 8 * np.sign(x or 1)
        prims.append(car(x, rng.choice([-1, 1]) * rng.uniform(2, width - 2.5), rng.uniform(-10, 10),
                         rng.uniform(0.2, 0.9)))
    for _ in range(rng.integers(3, 8)):
        prims.append(pedestrian(rng.uniform(-30, 30), rng.uniform(-width + 1, width - 1), rng.uniform(0.3, 0.8)))
    for _ in range(rng.integers(4, 10)):
        prims.append(Cylinder((rng.uniform(-60, 60), rng.choice([-1, 1]) * (width - 0.5)), rng.uniform(0.1, 0.3),
                              rng.uniform(4, 8), 0.0, rng.uniform(0.3, 0.8)))
    for sign in (-1, 1):
        for _ in range(rng.integers(3, 6)):
            dist = rng.uniform(115, 185)
            y = rng.uniform(-45, 45)
            w = rng.uniform(15, 40)
            h = rng.uniform(12, 45)
            prims.append(Box((sign * dist, y, h / 2), (rng.uniform(8, 20), w, h), 0.0, rng.uniform(0.3, 0.9)))
    for _ in range(rng.integers(0, 3)):
        prims.append(Sphere((rng.uniform(-30, 30), rng.uniform(-width + 1, width - 1), rng.uniform(0.3, 1.0)),
                            rng.uniform(0.3, 1.0), rng.uniform(0.2, 0.8)))
    return SceneSpec(tuple(prims), 0.0, float(rng.uniform(0.15, 0.35)), (0.0, 0.0, 1.8),
                     float(rng.uniform(-10, 10)), noise_sigma, name or f"road{seed}")


def chamber_scene(seed=0, noise_sigma=0.02, name=None) -> SceneSpec:
    """An enclosed hall about 30 m long with mannequins, a car and small props."""
    rng = np.random.default_rng(seed)
    length, width, height = 32.0, 11.0, 7.0
    x0 = -4.0
    prims = [
        Box((x0 + length / 2, -width / 2 - 0.25, height / 2), (length, 0.5, height), 0.0, 0.4),
        Box((x0 + length / 2, width / 2 + 0.25, height / 2), (length, 0.5, height), 0.0, 0.4),
        Box((x0 + length + 0.25, 0, height / 2), (0.5, width, height), 0.0, 0.45),
        Box((x0 - 0.25, 0, height / 2), (0.5, width, height), 0.0, 0.45),
        Box((x0 + length / 2, 0, height + 0.25), (length, width, 0.5), 0.0, 0.3),
    ]
    for _ in range(rng.integers(2, 5)):
        prims.append(pedestrian(rng.uniform(3, 22), rng.uniform(-4, 4), rng.uniform(0.3, 0.8)))
    prims.append(car(rng.uniform(8, 20), rng.uniform(-3, 3), rng.uniform(-20, 20), rng.uniform(0.3, 0.9)))
    for _ in range(rng.integers(1, 4)):
        prims.append(Box((rng.uniform(4, 24), rng.uniform(-4.5, 4.5), 0.4), (0.6, 0.6, 0.8),
                         rng.uniform(0, 90), rng.uniform(0.1, 0.9)))
    return SceneSpec(tuple(prims), 0.0, 0.25, (0.0, 0.0, 1.2), 0.0, noise_sigma, name or f"chamber{seed}")


def plaza_scene(seed=0, noise_sigma=0.005, name=None) -> SceneSpec:
    """An open test track: props within 40 m and a ring of buildings 115-190 m out."""
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(rng.integers(3, 7)):
        r, a = rng.uniform(6, 35), rng.uniform(0, 2 * np.pi)
        prims.append(car(r * np.cos(a), r * np.sin(a), rng.uniform(0, 180), rng.uniform(0.2, 0.9)))
    for _ in range(rng.integers(3, 8)):
        r, a = rng.uniform(3, 25), rng.uniform(0, 2 * np.pi)
        prims.append(pedestrian(r * np.cos(a), r * np.sin(a), rng.uniform(0.3, 0.8)))
    for _ in range(rng.integers(2, 6)):
        r, a = rng.uniform(5, 40), rng.uniform(0, 2 * np.pi)
        prims.append(Cylinder((r * np.cos(a), r * np.sin(a)), rng.uniform(0.1, 0.3), rng.uniform(3, 8), 0.0,
                              rng.uniform(0.3, 0.8)))
    for _ in range(rng.integers(1, 4)):
        r, a = rng.uniform(15, 60), rng.uniform(0, 2 * np.pi)
        h = rng.uniform(2, 5)
        prims.append(Box((r * np.cos(a), r * np.sin(a), h / 2), (rng.uniform(2, 8), rng.uniform(2, 8), h),
                         rng.uniform(0, 90), rng.uniform(0.2, 0.8)))
    a = rng.uniform(0, 2 * np.pi)
    stop = a + 2 * np.pi
    while a < stop:
        span = rng.uniform(0.1, 0.35)
        r = rng.uniform(115, 185)
        if rng.random() < 0.85:
            mid = a + span / 2
            width = 2 * r * np.tan(span / 2)
            h = rng.uniform(15, 50)
            prims.append(Box((r * np.cos(mid), r * np.sin(mid), h / 2), (rng.uniform(8, 20), width, h),
                             float(np.degrees(mid)), rng.uniform(0.25, 0.9)))
        a += span
    return SceneSpec(tuple(prims), 0.0, float(rng.uniform(0.15, 0.35)), (0.0, 0.0, 1.8), 0.0,
                     noise_sigma, name or f"plaza{seed}")


SCENE_BUILDERS = {"road": road_scene, "chamber": chamber_scene, "plaza": plaza_scene}


def build_scene(entry, default_noise=0.02) -> SceneSpec:
    """A scene from a manifest entry: ``{"builder": "road", "seed": 3}`` or a full scene dict.

    The dataset keys ``split``, ``weather`` and ``repetitions`` are ignored here.
    """
    kw = {k: v for k, v in entry.items() if k not in ("builder", "split", "weather", "repetitions")}
    if "builder" in entry:
        kw.setdefault("noise_sigma", default_noise)
        return SCENE_BUILDERS[entry["builder"]](**kw)
    return SceneSpec.from_dict(kw)


# --- datasets ----------------------------------------------------------------

DEFAULT_SPLIT = {"train": 0.60, "val": 0.15, "test": 0.25}
FOG_VISIBILITY_GRID = tuple(range(10, 101, 10))


def assign_splits(scene_names, fractions=DEFAULT_SPLIT, explicit=None):
    """Scene-disjoint split assignment by largest remainder; explicit assignments must not overlap."""
    if explicit:
        seen = {}
        for split, names in explicit.items():
            for n in names:
                if n in seen and seen[n] != split:
                    raise ValueError(f"scene {n!r} assigned to both {seen[n]!r} and {split!r}")
                seen[n] = split
        missing = [n for n in scene_names if n not in seen]
        if missing:
            raise ValueError(f"scenes without split assignment: {missing}")
        return {n: seen[n] for n in scene_names}
    n = len(scene_names)
    names = list(fractions)
    raw = np.array([fractions[k] for k in names], dtype=np.float64)
    raw = raw / raw.sum() * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    out, i = {}, 0
    for split, c in zip(names, counts):
        for name in scene_names[i:i + c]:
            out[name] = split
        i += c
    return out


def _frame_seed(seed, *parts):
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class DatasetManifest:
    scenes: list
    weather: list = field(default_factory=list)
    reference_frames: int = 10
    frames_per_preset: int = 1
    repetitions: int = 1
    clear_frames: int = 0
    split: dict = field(default_factory=lambda: dict(DEFAULT_SPLIT))
    sensor: dict = field(default_factory=dict)
    noise_sigma: float = 0.02

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def generate_dataset(manifest: DatasetManifest | dict, out_dir, seed=0):
    """Write reference frames, labelled weather frames and ``dataset.json`` under ``out_dir``.

    A scene entry may carry its own ``weather`` preset list and
    ``repetitions`` count, which replace the manifest-wide values for that
    scene.

    Every weather frame is a fresh noisy raycast of its scene passed through
    the augmentation, so its labels are exact.
    """
    if isinstance(manifest, dict):
        manifest = DatasetManifest.from_dict(manifest)
    out = Path(out_dir)
    sensor = SensorModel.from_dict(manifest.sensor) if manifest.sensor else SensorModel()
    scenes = [build_scene(e, manifest.noise_sigma) for e in manifest.scenes]
    names = [s.name for s in scenes]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate scene names in manifest: {names}")
    explicit = {}
    for e, s in zip(manifest.scenes, scenes):
        if "split" in e:
            explicit.setdefault(e["split"], []).append(s.name)
    splits = assign_splits(names, manifest.split, explicit if explicit else None)

    frames = []
    for si, (entry, scene) in enumerate(zip(manifest.scenes, scenes)):
        sdir = out / scene.name
        sdir.mkdir(parents=True, exist_ok=True)
        refs = [raycast_scene(scene, sensor, _frame_seed(seed, si, 0, k), f"{scene.name}_ref{k:03d}", float(k))
                for k in range(manifest.reference_frames)]
        if refs:
            save_reference_stack(sdir, refs, f"{scene.name}_reference")
        for k in range(manifest.clear_frames):
            fid = f"{scene.name}_clear{k:03d}"
            img = raycast_scene(scene, sensor, _frame_seed(seed, si, 1, k), fid, float(k))
            (sdir / f"{fid}.lri").write_bytes(encode_frame(img, img.no_return_labels()))
            frames.append(_entry(scene, splits, fid, "clear", None, img.no_return_labels()))
        for wi, name in enumerate(entry.get("weather", manifest.weather)):
            for rep in range(entry.get("repetitions", manifest.repetitions)):
                for k in range(manifest.frames_per_preset):
                    tag = name.replace(":", "_").replace("=", "")
                    fid = f"{scene.name}_{tag}_r{rep}_{k:03d}"
                    clear = raycast_scene(scene, sensor, _frame_seed(seed, si, 2 + wi, rep, k), fid, float(k))
                    params = aug.preset(name, seed=_frame_seed(seed, si, 1000 + wi, rep, k))
                    img, labels = aug.augment(clear, params)
                    (sdir / f"{fid}.lri").write_bytes(encode_frame(img, labels))
                    frames.append(_entry(scene, splits, fid, name, params, labels))
    doc = {
        "seed": seed,
        "sensor": sensor.to_dict(),
        "splits": {s: sorted(n for n in names if splits[n] == s) for s in manifest.split},
        "scenes": [{"name": s.name, "split": splits[s.name], "spec": s.to_dict(),
                    "reference": (f"{s.name}/{s.name}_reference.json" if manifest.reference_frames else None)}
                   for s in scenes],
        "frames": frames,
    }
    path = out / "dataset.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _entry(scene, splits, fid, weather, params, labels):
    counts = {c.name: int(np.count_nonzero(labels == c)) for c in Label}
    e = {"frame": f"{scene.name}/{fid}.lri", "scene": scene.name, "split": splits[scene.name],
         "weather": weather, "counts": counts}
    if params is not None:
        e["beta"] = params.beta
        e["scatter_rate"] = params.scatter_rate
        e["visibility"] = float(params.visibility)
    return e


def load_split(dataset_json, split):
    """``(RangeImage, labels, entry)`` for all weather/clear frames of one split."""
    from .core import read_frame

    path = Path(dataset_json)
    doc = json.loads(path.read_text())
    out = []
    for e in doc["frames"]:
        if e["split"] == split:
            img, lab = read_frame(path.parent / e["frame"])
            out.append((img, lab, e))
    return out
