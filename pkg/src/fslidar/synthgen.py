"""Seeded synthetic LiDAR sequences with oracle per-point labels.

A scene is a ground plane plus axis-aligned boxes and vertical cylinders,
some of which move with constant velocity.  Each frame casts one ray per
cell of a (beams x azimuth) spherical grid from the ego position and keeps
the first surface hit.  The grid is laid out on the pixel centres of
:func:`fslidar.pointcloud.spherical_project`, so projecting a noise-free
frame with the same sensor geometry gives a collision-free range image.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classspace import ClassSpace, build_class_space
from .errors import EmptyScene
from .pointcloud import LidarScan, save_sequence

SHAPES = ("plane", "box", "cylinder")


@dataclass
class SensorSpec:
    n_beams: int = 16
    azimuth_steps: int = 256
    fov_up: float = 3.0
    fov_down: float = -25.0
    max_range: float = 40.0
    noise_sigma: float = 0.0


@dataclass
class SceneObject:
    """``size`` is (lx, ly, lz) for boxes, (radius, height) for cylinders and
    unused for planes; ``center`` is the box centre, the cylinder's base
    centre, or (0, 0, z) for a plane.  ``velocity`` is metres per frame."""

    shape: str
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, ...] = ()
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    reflectivity: float = 0.5

    def position(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)


@dataclass
class SceneSpec:
    seed: int = 0
    num_frames: int = 600
    ego_speed: float = 0.5
    base_objects: list[SceneObject] = field(default_factory=list)
    novel_objects: list[SceneObject] = field(default_factory=list)
    clutter_objects: list[SceneObject] = field(default_factory=list)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    class_names: dict[int, str] = field(default_factory=dict)
    base_classes: tuple[int, ...] = (1, 2, 3)
    novel_classes: tuple[int, ...] = (4, 5)
    unlabeled_id: int = 0

    @property
    def objects(self) -> list[SceneObject]:
        return [*self.base_objects, *self.novel_objects, *self.clutter_objects]

    def class_space(self) -> ClassSpace:
        return build_class_space(self.base_classes, self.novel_classes, self.unlabeled_id, self.class_names)

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.sensor.max_range <= 0 or self.sensor.noise_sigma < 0:
            raise ValueError("max_range must be > 0 and noise_sigma >= 0")
        cs = self.class_space()
        groups = ((self.base_objects, set(cs.base)), (self.novel_objects, set(cs.novel)),
                  (self.clutter_objects, {cs.unlabeled_id}))
        for objs, allowed in groups:
            for obj in objs:
                if obj.shape not in SHAPES:
                    raise ValueError(f"unknown shape {obj.shape!r}")
                if obj.class_id not in allowed:
                    raise ValueError(f"object class {obj.class_id} not valid for its group")

    def ego_pose(self, frame: int) -> np.ndarray:
        pose = np.eye(4)[:3].copy()
        pose[0, 3] = self.ego_speed * frame
        return pose

    # -- JSON sidecar --
    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = {str(k): v for k, v in self.class_names.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        objs = {k: [SceneObject(**{**o, "center": tuple(o["center"]), "size": tuple(o["size"]),
                                   "velocity": tuple(o["velocity"])}) for o in d.get(k, [])]
                for k in ("base_objects", "novel_objects", "clutter_objects")}
        d.update(objs)
        d["sensor"] = SensorSpec(**d.get("sensor", {}))
        d["class_names"] = {int(k): v for k, v in d.get("class_names", {}).items()}
        for k in ("base_classes", "novel_classes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def ray_directions(sensor: SensorSpec) -> np.ndarray:
    """Unit ray directions, shape (beams, azimuth, 3), on range-image pixel centres."""
    h, w = sensor.n_beams, sensor.azimuth_steps
    up, down = np.radians(sensor.fov_up), np.radians(sensor.fov_down)
    pitch = up - (np.arange(h) + 0.5) / h * (up - down)
    yaw = np.pi * (1.0 - 2.0 * (np.arange(w) + 0.5) / w)
    p, y = np.meshgrid(pitch, yaw, indexing="ij")
    return np.stack([np.cos(p) * np.cos(y), np.cos(p) * np.sin(y), np.sin(p)], axis=-1)


def _hit_plane(origin, dirs, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - origin[2]) / dirs[:, 2]
    return np.where(t > 1e-9, t, np.inf)


def _hit_box(origin, dirs, center, size):
    half = 0.5 * np.asarray(size, dtype=np.float64)
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(origin, dirs, base, radius, height):
    ox, oy = origin[0] - base[0], origin[1] - base[1]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (dx * ox + dy * oy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.where(disc >= 0, disc, np.nan))) / (2 * a)
        z_side = origin[2] + t_side * dz
        side_ok = (disc >= 0) & (t_side > 1e-9) & (z_side >= base[2]) & (z_side <= base[2] + height)
        t_side = np.where(side_ok, t_side, np.inf)
        t_cap = (base[2] + height - origin[2]) / dz
        cx, cy = ox + t_cap * dx, oy + t_cap * dy
        cap_ok = (t_cap > 1e-9) & (cx * cx + cy * cy <= radius * radius)
    t_cap = np.where(cap_ok, t_cap, np.inf)
    return np.minimum(t_side, t_cap)


def _hit(obj: SceneObject, pos, origin, dirs):
    if obj.shape == "plane":
        return _hit_plane(origin, dirs, pos[2])
    if obj.shape == "box":
        return _hit_box(origin, dirs, pos, obj.size)
    return _hit_cylinder(origin, dirs, pos, obj.size[0], obj.size[1])


def _reach(obj: SceneObject) -> float:
    if obj.shape == "box":
        return 0.5 * float(np.linalg.norm(obj.size))
    if obj.shape == "cylinder":
        return float(obj.size[0] + obj.size[1])
    return np.inf


def render_frame(spec: SceneSpec, frame: int, dirs: np.ndarray | None = None):
    """Cast every ray of one frame; returns (scan or None, labels, ray index of each point)."""
    sensor = spec.sensor
    if dirs is None:
        dirs = ray_directions(sensor)
    flat_dirs = dirs.reshape(-1, 3)
    pose = spec.ego_pose(frame)
    origin = pose[:, 3]

    best_t = np.full(len(flat_dirs), np.inf)
    best_obj = np.full(len(flat_dirs), -1)
    objects = spec.objects
    for k, obj in enumerate(objects):
        pos = obj.position(frame)
        if obj.shape != "plane" and np.linalg.norm(pos[:2] - origin[:2]) - _reach(obj) > sensor.max_range:
            continue
        t = _hit(obj, pos, origin, flat_dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_obj[closer] = k

    rng = np.random.default_rng([spec.seed, frame])
    noise = rng.normal(0.0, sensor.noise_sigma, len(flat_dirs)) if sensor.noise_sigma > 0 else 0.0
    rng_int = rng.uniform(-0.03, 0.03, len(flat_dirs))
    rng_t = best_t + noise
    keep = np.isfinite(best_t) & (best_t <= sensor.max_range) & (rng_t > 0)
    rays = np.flatnonzero(keep)
    if len(rays) == 0:
        return None, np.zeros(0, dtype=np.int64), rays

    xyz = flat_dirs[rays] * rng_t[rays, None]
    refl = np.array([o.reflectivity for o in objects])[best_obj[rays]]
    intensity = np.clip(refl * (1.0 - 0.5 * best_t[rays] / sensor.max_range) + rng_int[rays], 0.0, 1.0)
    labels = np.array([o.class_id for o in objects], dtype=np.int64)[best_obj[rays]]
    points = np.column_stack([xyz, intensity]).astype(np.float32)
    return LidarScan(points, pose, f"{spec.seed:02d}", frame), labels, rays


def generate_sequence(spec: SceneSpec) -> list[tuple[LidarScan, np.ndarray]]:
    spec.validate()
    dirs = ray_directions(spec.sensor)
    frames = []
    for t in range(spec.num_frames):
        scan, labels, _ = render_frame(spec, t, dirs)
        if scan is None:
            raise EmptyScene(f"frame {t} of scene seed {spec.seed} hits no surface")
        frames.append((scan, labels))
    return frames


def novel_point_ratio(labels_seq: Sequence[np.ndarray], novel_ids) -> float:
    novel_ids = np.asarray(list(novel_ids))
    total = sum(len(lab) for lab in labels_seq)
    novel = sum(int(np.isin(lab, novel_ids).sum()) for lab in labels_seq)
    return novel / total if total else 0.0


def write_sequence(out_dir, spec: SceneSpec, frames, seq_name: str | None = None) -> Path:
    """Write ``<out>/sequences/<seq>/{velodyne,labels,poses.txt}`` plus scene.json and classes.txt."""
    out_dir = Path(out_dir)
    seq_name = seq_name or f"{spec.seed:02d}"
    seq_dir = out_dir / "sequences" / seq_name
    save_sequence(seq_dir, [f[0] for f in frames], [f[1] for f in frames])
    spec.save(out_dir / "scene.json")
    spec.class_space().save(out_dir / "classes.txt")
    return seq_dir


# --------------------------------------------------------------------------
# stock scenes

DEFAULT_NAMES = {0: "unlabeled", 1: "ground", 2: "building", 3: "pole", 4: "car", 5: "person"}
GROUND_Z = -1.73


def standard_scene(seed: int = 0, num_frames: int = 600, ego_speed: float = 0.5,
                   sensor: SensorSpec | None = None) -> SceneSpec:
    """Straight-road benchmark: ground, buildings and poles as base classes,
    cars and pedestrians as moving novel classes, unlabeled clutter."""
    rng = np.random.default_rng(seed)
    sensor = sensor or SensorSpec()
    x_lo = -sensor.max_range - 10.0
    x_hi = ego_speed * num_frames + sensor.max_range + 10.0

    base = [SceneObject("plane", 1, (0.0, 0.0, GROUND_Z), (), reflectivity=0.3)]
    for side in (-1.0, 1.0):
        x = x_lo
        while x < x_hi:
            length = rng.uniform(8.0, 20.0)
            depth = rng.uniform(6.0, 12.0)
            height = rng.uniform(5.0, 14.0)
            y = side * (rng.uniform(11.0, 15.0) + depth / 2)
            base.append(SceneObject("box", 2, (x + length / 2, y, GROUND_Z + height / 2),
                                    (length, depth, height), reflectivity=rng.uniform(0.35, 0.6)))
            x += length + rng.uniform(2.0, 10.0)
        x = x_lo
        while x < x_hi:
            x += rng.uniform(8.0, 20.0)
            base.append(SceneObject("cylinder", 2 + 1, (x, side * rng.uniform(6.5, 7.5), GROUND_Z),
                                    (rng.uniform(0.12, 0.2), rng.uniform(4.0, 7.0)),
                                    reflectivity=rng.uniform(0.5, 0.8)))

    clutter = []
    for _ in range(int((x_hi - x_lo) / 6)):
        side = rng.choice([-1.0, 1.0])
        x, y = rng.uniform(x_lo, x_hi), side * rng.uniform(5.5, 10.5)
        if rng.random() < 0.5:
            size = (rng.uniform(0.8, 4.0), rng.uniform(0.8, 2.5), rng.uniform(0.6, 2.0))
            clutter.append(SceneObject("box", 0, (x, y, GROUND_Z + size[2] / 2), size,
                                       reflectivity=rng.uniform(0.2, 0.7)))
        else:
            clutter.append(SceneObject("cylinder", 0, (x, y, GROUND_Z),
                                       (rng.uniform(0.3, 1.2), rng.uniform(0.8, 2.5)),
                                       reflectivity=rng.uniform(0.2, 0.7)))

    novel = []
    n_cars = max(2, int((x_hi - x_lo) / 25))
    for _ in range(n_cars):
        lane = rng.choice([-1.0, 1.0])
        speed = lane * rng.uniform(0.2, 0.9) * -1.0  # right-hand traffic: y<0 drives +x
        size = (rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7))
        x0 = rng.uniform(x_lo, x_hi)
        x0 -= speed * num_frames / 2
        novel.append(SceneObject("box", 4, (x0, lane * rng.uniform(2.5, 3.5), GROUND_Z + size[2] / 2),
                                 size, (speed, 0.0, 0.0), reflectivity=rng.uniform(0.3, 0.7)))
    n_people = max(2, int((x_hi - x_lo) / 20))
    for _ in range(n_people):
        side = rng.choice([-1.0, 1.0])
        speed = rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 0.15)
        x0 = rng.uniform(x_lo, x_hi) - speed * num_frames / 2
        novel.append(SceneObject("cylinder", 5, (x0, side * rng.uniform(4.5, 5.5), GROUND_Z),
                                 (rng.uniform(0.25, 0.35), rng.uniform(1.6, 1.9)),
                                 (speed, 0.0, 0.0), reflectivity=rng.uniform(0.2, 0.6)))

    return SceneSpec(seed=seed, num_frames=num_frames, ego_speed=ego_speed, base_objects=base,
                     novel_objects=novel, clutter_objects=clutter, sensor=sensor,
                     class_names=dict(DEFAULT_NAMES))


def translating_box_scene(num_frames: int = 12, speed: float = 0.5, seed: int = 0,
                          start_x: float = -3.0, lateral: float = 8.0,
                          sensor: SensorSpec | None = None) -> SceneSpec:
    """Static ego, ground plane, one wall and a single box (class car) moving along x."""
    sensor = sensor or SensorSpec(n_beams=32, azimuth_steps=512, max_range=30.0)
    base = [SceneObject("plane", 1, (0.0, 0.0, GROUND_Z), ()),
            SceneObject("box", 2, (0.0, -15.0, 2.0), (40.0, 2.0, 8.0))]
    novel = [SceneObject("box", 4, (start_x, lateral, GROUND_Z + 0.75), (4.0, 1.8, 1.5),
                         (speed, 0.0, 0.0))]
    return SceneSpec(seed=seed, num_frames=num_frames, ego_speed=0.0, base_objects=base,
                     novel_objects=novel, sensor=sensor, class_names=dict(DEFAULT_NAMES))
