"""Synchronized LiDAR/radar augmentation and weather-specific GT sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import Box3D
from .nncore import Rng
from .pointcloud import GridSpec
from .weathersim import Frame, WeatherClass

YAW_RANGE = (-math.pi / 4, math.pi / 4)
SCALE_RANGE = (0.95, 1.05)


@dataclass(frozen=True)
class AugmentationSpec:
    """Flip across the x axis (y -> -y), then yaw rotation, then isotropic scale about the ego origin."""

    flip_x: bool = False
    yaw: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.yaw) and math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"invalid augmentation {self}")

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        f = np.diag([1.0, -1.0 if self.flip_x else 1.0, 1.0])
        m[:3, :3] = self.scale * geo.yaw_rotation(self.yaw) @ f
        return m

    @classmethod
    def random(cls, rng: Rng, flip_prob=0.5, yaw_range=YAW_RANGE, scale_range=SCALE_RANGE) -> "AugmentationSpec":
        return cls(bool(rng.random() < flip_prob), float(rng.uniform(*yaw_range)), float(rng.uniform(*scale_range)))

    @property
    def is_identity(self) -> bool:
        return not self.flip_x and self.yaw == 0.0 and self.scale == 1.0


def compose(first: AugmentationSpec, second: AugmentationSpec) -> AugmentationSpec:
    """The single spec equal to applying ``first`` and then ``second``."""
    sign = -1.0 if second.flip_x else 1.0
    return AugmentationSpec(first.flip_x != second.flip_x, second.yaw + sign * first.yaw,
                            first.scale * second.scale)


def transform_box(box: Box3D, spec: AugmentationSpec) -> Box3D:
    c = spec.matrix()[:3, :3] @ np.array([box.x, box.y, box.z])
    yaw = (-box.yaw if spec.flip_x else box.yaw) + spec.yaw
    s = spec.scale
    return Box3D(float(c[0]), float(c[1]), float(c[2]), box.dx * s, box.dy * s, box.dz * s, geo.wrap_angle(yaw))


def _transform_cloud(cloud, m):
    pts = cloud.points.copy()
    pts[:, :3] = pts[:, :3] @ m[:3, :3].T
    return type(cloud)(pts, cloud.source.copy())


def apply_sync(frame: Frame, spec: AugmentationSpec) -> Frame:
    """Apply one similarity to both clouds and every GT box; record it in ``t_lidar_aug``."""
    if spec.is_identity:
        return frame.copy()
    m = spec.matrix()
    return frame.copy(lidar=_transform_cloud(frame.lidar, m), radar=_transform_cloud(frame.radar, m),
                      gt_boxes=[transform_box(b, spec) for b in frame.gt_boxes],
                      t_lidar_aug=m @ frame.t_lidar_aug)


# ------------------------------------------------------------------- GT db


def _to_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    out = points.copy()
    out[:, :3] = (points[:, :3] - [box.x, box.y, box.z]) @ geo.yaw_rotation(box.yaw)
    return out


def _to_world(points: np.ndarray, box: Box3D) -> np.ndarray:
    out = points.copy()
    out[:, :3] = points[:, :3] @ geo.yaw_rotation(box.yaw).T + [box.x, box.y, box.z]
    return out


@dataclass
class GtEntry:
    box: Box3D
    lidar: np.ndarray  # box-local xyz + intensity
    radar: np.ndarray  # box-local xyz + doppler + power
    frame_id: int
    weather: WeatherClass


@dataclass
class GtDatabase:
    entries: dict = field(default_factory=lambda: {w: [] for w in WeatherClass})

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def bucket(self, weather) -> list:
        return self.entries[WeatherClass.parse(weather)]


def build_gt_database(frames) -> GtDatabase:
    """Crop every GT box's LiDAR and radar points into box-local coordinates, keyed by frame weather."""
    db = GtDatabase()
    for frame in frames:
        for box in frame.gt_boxes:
            lm = geo.points_in_box(frame.lidar.points, box)
            rm = geo.points_in_box(frame.radar.points, box)
            db.entries[frame.weather].append(GtEntry(
                box=box, lidar=_to_local(frame.lidar.points[lm], box), radar=_to_local(frame.radar.points[rm], box),
                frame_id=int(frame.id), weather=frame.weather))
    return db


def entry_points_world(entry: GtEntry, box: Box3D | None = None):
    """(lidar, radar) points of ``entry`` placed at ``box`` (default: its source pose)."""
    box = entry.box if box is None else box
    return _to_world(entry.lidar, box), _to_world(entry.radar, box)


def wsgts_sample(frame: Frame, db: GtDatabase, max_insert: int, rng: Rng, grid: GridSpec | None = None,
                 retries: int = 20, weather_specific: bool = True):
    """Paste up to ``max_insert`` database objects into ``frame``.

    Objects come only from ``db[frame.weather]`` (or from every bucket when
    ``weather_specific`` is False). Each is rotated about the ego origin to
    a new azimuth so its range, and hence point density, is preserved; a
    pose is accepted only if its footprint is disjoint from every box in the
    scene. Returns ``(new_frame, n_inserted)``.
    """
    grid = grid or GridSpec()
    if weather_specific:
        pool = db.bucket(frame.weather)
    else:
        pool = [e for w in WeatherClass for e in db.bucket(w)]
    if max_insert <= 0 or not pool:
        return frame.copy(), 0
    order = rng.permutation(len(pool))[:max_insert]
    boxes = list(frame.gt_boxes)
    box_weather = list(frame.box_weather)
    box_frame = list(frame.box_frame)
    lidar, radar = frame.lidar, frame.radar
    inserted = 0
    for k in order:
        entry = pool[int(k)]
        for _ in range(retries):
            theta = rng.uniform(-math.pi / 3, math.pi / 3)
            c, s = math.cos(theta), math.sin(theta)
            b = entry.box
            cand = Box3D(c * b.x - s * b.y, s * b.x + c * b.y, b.z, b.dx, b.dy, b.dz, geo.wrap_angle(b.yaw + theta))
            if not grid.contains(cand.x, cand.y):
                continue
            if any(geo.bev_iou(cand, other) > 0.0 for other in boxes):
                continue
            idx = len(boxes)
            lp, rp = entry_points_world(entry, cand)
            lidar = lidar.subset(~geo.points_in_box(lidar.points, cand))
            radar = radar.subset(~geo.points_in_box(radar.points, cand))
            lidar = lidar.concat(type(lidar)(lp, np.full(len(lp), idx)))
            radar = radar.concat(type(radar)(rp, np.full(len(rp), idx)))
            boxes.append(cand)
            box_weather.append(int(entry.weather))
            box_frame.append(entry.frame_id)
            inserted += 1
            break
    return frame.copy(lidar=lidar, radar=radar, gt_boxes=boxes, box_weather=box_weather,
                      box_frame=box_frame), inserted
