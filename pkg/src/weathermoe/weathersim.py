"""Synthetic multi-modal driving scenes with per-weather sensor degradation.

This is a stand-in for a real adverse-weather dataset. Every degradation
parameter lives in ``WEATHER_EFFECTS`` and ``stamp_image`` below; the values
are tuned so images are class-separable and radar degrades less than LiDAR,
not to be physically faithful.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry as geo
from .geometry import Box3D, CameraIntrinsics
from .nncore import DTYPE, Rng, derive_seed, dump_tensors, load_tensors
from .pointcloud import GridSpec, LidarCloud, RadarCloud


class WeatherClass(IntEnum):
    NORMAL = 0
    OVERCAST = 1
    FOG = 2
    RAIN = 3
    SLEET = 4
    LIGHT_SNOW = 5
    HEAVY_SNOW = 6

    @property
    def label(self) -> str:
        return WEATHER_NAMES[self]

    @classmethod
    def parse(cls, s) -> "WeatherClass":
        if isinstance(s, (int, np.integer)):
            return cls(int(s))
        key = str(s).strip().lower().replace(" ", "").replace("_", "")
        for w in cls:
            if w.label.lower().replace(" ", "") == key or w.name.lower().replace("_", "") == key:
                return w
        raise ValueError(f"unknown weather class {s!r}")


WEATHER_NAMES = ("Normal", "Overcast", "Fog", "Rain", "Sleet", "Light Snow", "Heavy Snow")
N_WEATHER = len(WEATHER_NAMES)
LIDAR_ORIGIN = np.array([0.0, 0.0, 1.8])
GROUND_Z = 0.0


# ------------------------------------------------------------ configuration


@dataclass(frozen=True)
class SceneConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    min_objects: int = 1
    max_objects: int = 8
    image_height: int = 64
    image_width: int = 96
    hfov_deg: float = 90.0
    camera_height: float = 1.6
    lidar_density: float = 25.0  # points per m^2 of visible face at 10 m
    ground_points: int = 700
    max_poles: int = 4
    radar_fraction: float = 0.15
    radar_ghosts: int = 6

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.image_width, self.image_height, self.hfov_deg)

    def extrinsic(self) -> np.ndarray:
        return geo.camera_to_ego(self.camera_height)


@dataclass(frozen=True)
class ChannelEffect:
    """One modality's degradation; ranges are (low, high) drawn per frame."""

    dropout: tuple = (0.0, 0.0)
    fog_beta: tuple = (0.0, 0.0)
    jitter: float = 0.0
    clutter: tuple = (0, 0)
    clutter_range: tuple = (2.0, 10.0)
    clutter_z: tuple = (0.2, 2.5)
    range_bias: float = 0.0
    intensity_scale: float = 1.0


W = WeatherClass
WEATHER_EFFECTS: dict = {
    W.NORMAL: (ChannelEffect(), ChannelEffect()),
    W.OVERCAST: (ChannelEffect(), ChannelEffect()),
    W.FOG: (ChannelEffect(fog_beta=(0.03, 0.05), clutter=(60, 120), clutter_range=(1.5, 6.0),
                          range_bias=-0.06, intensity_scale=0.7),
            ChannelEffect(fog_beta=(0.005, 0.01), range_bias=-0.06)),
    W.RAIN: (ChannelEffect(dropout=(0.15, 0.25), jitter=0.06, clutter=(10, 30), range_bias=0.04,
                           intensity_scale=0.8),
             ChannelEffect(dropout=(0.03, 0.06), jitter=0.02, range_bias=0.04)),
    W.SLEET: (ChannelEffect(dropout=(0.2, 0.3), jitter=0.05, clutter=(80, 150), clutter_range=(2.0, 10.0),
                            range_bias=0.07, intensity_scale=0.75),
              ChannelEffect(dropout=(0.04, 0.08), jitter=0.02, clutter=(0, 3), range_bias=0.07)),
    W.LIGHT_SNOW: (ChannelEffect(dropout=(0.05, 0.12), clutter=(150, 250), clutter_range=(2.0, 12.0),
                                 range_bias=-0.04, intensity_scale=0.9),
                   ChannelEffect(dropout=(0.01, 0.03), clutter=(0, 3), range_bias=-0.04)),
    W.HEAVY_SNOW: (ChannelEffect(dropout=(0.3, 0.4), jitter=0.04, clutter=(400, 600), clutter_range=(2.0, 15.0),
                                 range_bias=0.08, intensity_scale=0.6),
                   ChannelEffect(dropout=(0.06, 0.1), jitter=0.02, clutter=(2, 8), range_bias=0.08)),
}
del W


# ------------------------------------------------------------------- frames


@dataclass
class Frame:
    id: int
    weather: WeatherClass
    lidar: LidarCloud
    radar: RadarCloud
    image: np.ndarray
    intrinsics: CameraIntrinsics
    t_ext: np.ndarray
    gt_boxes: list
    t_lidar_aug: np.ndarray = field(default_factory=lambda: np.eye(4))
    box_weather: list | None = None  # source weather of each gt box (provenance)
    box_frame: list | None = None  # source frame id of each gt box

    def __post_init__(self):
        self.weather = WeatherClass(self.weather)
        if self.box_weather is None:
            self.box_weather = [int(self.weather)] * len(self.gt_boxes)
        if self.box_frame is None:
            self.box_frame = [int(self.id)] * len(self.gt_boxes)

    def copy(self, **changes) -> "Frame":
        base = dict(
            lidar=LidarCloud(self.lidar.points.copy(), self.lidar.source.copy()),
            radar=RadarCloud(self.radar.points.copy(), self.radar.source.copy()),
            image=self.image.copy(), t_ext=self.t_ext.copy(), gt_boxes=list(self.gt_boxes),
            t_lidar_aug=self.t_lidar_aug.copy(), box_weather=list(self.box_weather),
            box_frame=list(self.box_frame))
        base.update(changes)
        return replace(self, **base)

    @property
    def boxes_array(self) -> np.ndarray:
        return geo.boxes_to_array(self.gt_boxes)


def _sample_boxes(rng: Rng, cfg: SceneConfig, n: int) -> list:
    boxes: list = []
    g = cfg.grid
    for _ in range(n):
        for _attempt in range(50):
            length = rng.uniform(3.8, 4.8)
            width = rng.uniform(1.6, 2.0)
            height = rng.uniform(1.4, 1.7)
            x = rng.uniform(g.x_min + 4.0, g.x_max - 2.5)
            y = rng.uniform(g.y_min + 2.0, g.y_max - 2.0)
            yaw = rng.uniform(-math.pi / 2, math.pi / 2)
            cand = Box3D(x, y, GROUND_Z + height / 2, length, width, height, yaw)
            grown = Box3D(x, y, cand.z, length + 0.6, width + 0.6, height, yaw)
            if all(geo.bev_iou(grown, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
    return boxes


def _surface_points(rng: Rng, box: Box3D, cfg: SceneConfig) -> np.ndarray:
    """Points on sensor-facing faces, pulled 1% inward so they lie inside the box."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hx, hy, hz = box.dx / 2, box.dy / 2, box.dz / 2
    # (axis, sign, extents of the two free axes)
    faces = [(0, 1, (1, 2)), (0, -1, (1, 2)), (1, 1, (0, 2)), (1, -1, (0, 2)), (2, 1, (0, 1))]
    half = np.array([hx, hy, hz])
    center = np.array([box.x, box.y, box.z])
    rng_dist = float(np.linalg.norm(center - LIDAR_ORIGIN))
    density = cfg.lidar_density * (10.0 / max(rng_dist, 3.0)) ** 2
    pts = []
    for axis, sign, free in faces:
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        normal = np.array([c * normal_local[0] - s * normal_local[1],
                           s * normal_local[0] + c * normal_local[1], normal_local[2]])
        face_center = center + normal * half[axis]
        if np.dot(normal, LIDAR_ORIGIN - face_center) <= 0:
            continue
        area = 4 * half[free[0]] * half[free[1]]
        n = int(rng.integers(0, 2) + density * area * 0.5)
        if n <= 0:
            continue
        local = np.zeros((n, 3))
        local[:, axis] = sign * half[axis]
        for ax in free:
            local[:, ax] = rng.uniform(-half[ax], half[ax], size=n)
        local *= 0.99
        world = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]], 1)
        pts.append(world + center)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def _render_clear_image(rng: Rng, cfg: SceneConfig, boxes: Sequence[Box3D], colors) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    horizon = h // 2
    img = np.zeros((3, h, w))
    rows = np.arange(h)[:, None] / h
    sky = np.array([0.45, 0.65, 0.95])[:, None, None] + 0.15 * rows[None]
    ground = np.array([0.33, 0.38, 0.30])[:, None, None] + 0.1 * rows[None]
    img[:, :horizon] = np.broadcast_to(sky, (3, h, w))[:, :horizon]
    img[:, horizon:] = np.broadcast_to(ground, (3, h, w))[:, horizon:]
    a = cfg.intrinsics()
    t_ext = cfg.extrinsic()
    order = sorted(range(len(boxes)), key=lambda i: -math.hypot(boxes[i].x, boxes[i].y))
    for i in order:
        b = boxes[i]
        corners = np.array([[sx * b.dx / 2, sy * b.dy / 2, sz * b.dz / 2]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        corners = corners @ geo.yaw_rotation(b.yaw).T + np.array([b.x, b.y, b.z])
        u, v, d = geo.project_points(corners, a, t_ext)
        if np.any(d <= 0.5):
            continue
        u0, u1 = int(max(0, math.floor(u.min()))), int(min(w, math.ceil(u.max())))
        v0, v1 = int(max(0, math.floor(v.min()))), int(min(h, math.ceil(v.max())))
        if u1 <= u0 or v1 <= v0:
            continue
        img[:, v0:v1, u0:u1] = np.asarray(colors[i])[:, None, None]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(rng: Rng, config: SceneConfig | None = None) -> Frame:
    """A clear-weather frame with 1-8 cars, ground returns and pole clutter."""
    cfg = config or SceneConfig()
    g = cfg.grid
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if cfg.max_objects > 0 else 0
    boxes = _sample_boxes(rng, cfg, n_obj)

    lidar_pts, lidar_src = [], []
    for i, b in enumerate(boxes):
        p = _surface_points(rng, b, cfg)
        inten = rng.uniform(0.4, 0.9, size=len(p))
        lidar_pts.append(np.column_stack([p, inten]))
        lidar_src.append(np.full(len(p), i))

    gx = rng.uniform(g.x_min, g.x_max, size=cfg.ground_points)
    gy = rng.uniform(g.y_min, g.y_max, size=cfg.ground_points)
    gr = np.hypot(gx, gy)
    keep = rng.random(cfg.ground_points) < np.minimum(1.0, (10.0 / np.maximum(gr, 1e-3)) ** 1.5)
    gz = GROUND_Z + rng.normal(0.0, 0.02, size=cfg.ground_points)
    gi = rng.uniform(0.05, 0.2, size=cfg.ground_points)
    ground = np.column_stack([gx, gy, gz, gi])[keep]
    for b in boxes:
        ground = ground[~geo.points_in_box(ground[:, :3] * [1, 1, 0] + [0, 0, b.z], b, margin=0.1)]
    lidar_pts.append(ground)
    lidar_src.append(np.full(len(ground), -1))

    n_poles = int(rng.integers(0, cfg.max_poles + 1))
    radar_pts = []
    for _ in range(n_poles):
        px = rng.uniform(g.x_min + 3, g.x_max - 1)
        py = rng.uniform(g.y_min + 1, g.y_max - 1)
        if any(math.hypot(px - b.x, py - b.y) < 0.5 * math.hypot(b.dx, b.dy) + 1.0 for b in boxes):
            continue
        m = int(60 * (10.0 / max(math.hypot(px, py), 3.0)) ** 2) + 4
        ang = rng.uniform(0, 2 * math.pi, size=m)
        pz = rng.uniform(0.0, rng.uniform(2.0, 3.0), size=m)
        pts = np.column_stack([px + 0.15 * np.cos(ang), py + 0.15 * np.sin(ang), pz,
                               rng.uniform(0.6, 1.0, size=m)])
        lidar_pts.append(pts)
        lidar_src.append(np.full(m, -1))
        radar_pts.append(np.array([[px, py, 1.0, 0.0, rng.uniform(8, 14), -1]]))

    lidar = LidarCloud(np.concatenate(lidar_pts) if lidar_pts else np.zeros((0, 4)),
                       np.concatenate(lidar_src).astype(np.int64) if lidar_src else None)

    for i, b in enumerate(boxes):
        obj = lidar.points[lidar.source == i, :3]
        if len(obj) == 0:
            continue
        k = max(1, int(round(cfg.radar_fraction * len(obj))))
        idx = np.sort(rng.choice(len(obj), min(k, len(obj)), replace=False))
        speed = rng.uniform(-5.0, 5.0)
        heading = np.array([math.cos(b.yaw), math.sin(b.yaw), 0.0])
        p = obj[idx]
        radial = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-6)
        doppler = speed * radial @ heading
        power = 15.0 + rng.normal(0.0, 2.0, size=len(p))
        radar_pts.append(np.column_stack([p, doppler, power, np.full(len(p), i)]))
    nghost = cfg.radar_ghosts
    ghosts = np.column_stack([rng.uniform(g.x_min, g.x_max, size=nghost), rng.uniform(g.y_min, g.y_max, size=nghost),
                              rng.uniform(0.0, 2.0, size=nghost), rng.normal(0.0, 1.0, size=nghost),
                              5.0 + rng.normal(0.0, 2.0, size=nghost), np.full(nghost, -1)])
    radar_pts.append(ghosts)
    rp = np.concatenate(radar_pts)
    radar = RadarCloud(rp[:, :5], rp[:, 5].astype(np.int64))

    colors = [rng.uniform(0.2, 0.9, size=3) for _ in boxes]
    image = _render_clear_image(rng, cfg, boxes, colors).astype(DTYPE)
    return Frame(id=0, weather=WeatherClass.NORMAL, lidar=lidar, radar=radar, image=image,
                 intrinsics=cfg.intrinsics(), t_ext=cfg.extrinsic(), gt_boxes=boxes)


# ------------------------------------------------------------- degradation


def range_dropout(points: np.ndarray, beta: float, rng: Rng, origin=LIDAR_ORIGIN) -> np.ndarray:
    """Keep mask under attenuation: each point survives with probability exp(-beta * range)."""
    r = np.linalg.norm(np.asarray(points)[:, :3] - origin, axis=1)
    return rng.random(len(r)) < np.exp(-beta * r)


def degrade_cloud(cloud, effect: ChannelEffect, rng: Rng):
    """Apply one modality's degradation. Returns (new cloud, survival rate of original points)."""
    pts = cloud.points.copy()
    src = cloud.source.copy()
    n0 = len(pts)
    keep = np.ones(n0, dtype=bool)
    beta = rng.uniform(*effect.fog_beta)
    if beta > 0:
        keep &= range_dropout(pts, beta, rng)
    drop = rng.uniform(*effect.dropout)
    if drop > 0:
        keep &= rng.random(n0) >= drop
    pts, src = pts[keep], src[keep]
    survival = float(keep.mean()) if n0 else 1.0
    if effect.range_bias:
        rel = pts[:, :2]
        pts[:, :2] = rel * (1.0 + effect.range_bias)
    if effect.jitter > 0:
        pts[:, :3] += rng.normal(0.0, effect.jitter, size=(len(pts), 3))
    is_lidar = pts.shape[1] == 4
    if is_lidar and effect.intensity_scale != 1.0:
        pts[:, 3] *= effect.intensity_scale
    lo, hi = effect.clutter
    n_cl = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    if n_cl:
        r = rng.uniform(*effect.clutter_range, size=n_cl)
        ang = rng.uniform(-math.pi, math.pi, size=n_cl)
        z = rng.uniform(*effect.clutter_z, size=n_cl)
        if is_lidar:
            extra = np.column_stack([r * np.cos(ang), r * np.sin(ang), z, rng.uniform(0.02, 0.25, size=n_cl)])
        else:
            extra = np.column_stack([r * np.cos(ang), r * np.sin(ang), z, rng.normal(0, 0.5, size=n_cl),
                                     rng.uniform(0.0, 6.0, size=n_cl)])
        pts = np.concatenate([pts, extra])
        src = np.concatenate([src, np.full(n_cl, -1)])
    if is_lidar:
        pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return type(cloud)(pts, src), survival


def _blur(field: np.ndarray, passes: int = 3) -> np.ndarray:
    for _ in range(passes):
        field = (field + np.roll(field, 1, 0) + np.roll(field, -1, 0) + np.roll(field, 1, 1)
                 + np.roll(field, -1, 1)) / 5.0
    return field


def _streaks(img, rng: Rng, count, length, brightness, slant):
    _, h, w = img.shape
    for _ in range(count):
        u = rng.uniform(0, w)
        v = rng.uniform(-length[1], h)
        ln = int(rng.integers(length[0], length[1] + 1))
        for t in range(ln):
            vv = int(v + t)
            uu = int(u + slant * t)
            if 0 <= vv < h and 0 <= uu < w:
                img[:, vv, uu] += brightness
    return img


def _speckle(img, rng: Rng, count, brightness):
    _, h, w = img.shape
    vv = rng.integers(0, h, size=count)
    uu = rng.integers(0, w, size=count)
    np.add.at(img, (slice(None), vv, uu), brightness)
    return img


def stamp_image(image: np.ndarray, weather: WeatherClass, rng: Rng) -> np.ndarray:
    """Overlay the class-characteristic appearance on a clear image."""
    img = image.astype(np.float64).copy()
    _, h, w = img.shape
    horizon = h // 2
    if weather == WeatherClass.OVERCAST:
        gray = rng.uniform(0.55, 0.65)
        img[:, :horizon] = gray + 0.6 * (img[:, :horizon] - img[:, :horizon].mean(axis=0))
        m = img.mean()
        img = m + rng.uniform(0.6, 0.75) * (img - m)
        img *= rng.uniform(0.7, 0.8)
    elif weather == WeatherClass.FOG:
        field_ = _blur(rng.uniform(0.0, 1.0, size=(h, w)), passes=8)
        field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-9)
        dens = rng.uniform(0.55, 0.75)
        t = np.clip(dens + 0.25 * (field_ - 0.5), 0.0, 1.0)
        rows = np.abs(np.arange(h) - horizon)[:, None] / h
        t = np.clip(t * (1.0 - 0.6 * rows), 0.0, 0.95)
        haze = rng.uniform(0.72, 0.82)
        img = img * (1.0 - t) + haze * t
    elif weather == WeatherClass.RAIN:
        img *= rng.uniform(0.7, 0.8)
        img = _streaks(img, rng, int(rng.integers(50, 90)), (6, 14), rng.uniform(0.25, 0.35), rng.uniform(0.1, 0.3))
        for _ in range(int(rng.integers(6, 12))):
            cu, cv = rng.uniform(0, w), rng.uniform(horizon, h)
            yy, xx = np.mgrid[0:h, 0:w]
            img += 0.35 * (((xx - cu) ** 2 + (yy - cv) ** 2) < 2.0)
    elif weather == WeatherClass.SLEET:
        img *= rng.uniform(0.75, 0.85)
        img = _streaks(img, rng, int(rng.integers(25, 45)), (4, 9), rng.uniform(0.2, 0.3), rng.uniform(0.2, 0.5))
        img = _speckle(img, rng, int(rng.integers(120, 200)), 0.5)
    elif weather == WeatherClass.LIGHT_SNOW:
        img = img * 0.9 + 0.08
        img = _speckle(img, rng, int(rng.integers(120, 220)), 0.6)
    elif weather == WeatherClass.HEAVY_SNOW:
        whiten = rng.uniform(0.3, 0.45)
        img = img * (1.0 - whiten) + 0.85 * whiten
        img = _speckle(img, rng, int(rng.integers(700, 1000)), 0.5)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def apply_weather(frame: Frame, weather, rng: Rng, effects: tuple | None = None) -> Frame:
    """Degrade a clear-weather frame. ``effects`` overrides the (lidar, radar) parameter pair."""
    if frame.weather != WeatherClass.NORMAL:
        raise ValueError(f"apply_weather expects a Normal frame, got {frame.weather.label}")
    weather = WeatherClass.parse(weather)
    lidar_fx, radar_fx = effects if effects is not None else WEATHER_EFFECTS[weather]
    lidar, _ = degrade_cloud(frame.lidar, lidar_fx, rng.spawn(1))
    radar, _ = degrade_cloud(frame.radar, radar_fx, rng.spawn(2))
    image = stamp_image(frame.image, weather, rng.spawn(3))
    return frame.copy(weather=weather, lidar=lidar, radar=radar, image=image,
                      box_weather=[int(weather)] * len(frame.gt_boxes))


def make_frame(seed: int, frame_id: int, weather, config: SceneConfig | None = None) -> Frame:
    """Generate frame ``frame_id`` from its derived seed; independent of any other frame."""
    rng = Rng(derive_seed(seed, frame_id))
    clear = generate_scene(rng.spawn(1), config)
    clear.id = frame_id
    clear.box_frame = [frame_id] * len(clear.gt_boxes)
    return apply_weather(clear, weather, rng.spawn(2))


# ------------------------------------------------------------ serialization


def frame_to_bytes(frame: Frame) -> bytes:
    meta = json.dumps({"schema": "weathermoe-frame", "schema_version": 1, "id": int(frame.id),
                       "weather": frame.weather.label}, sort_keys=True).encode()
    return dump_tensors({
        "meta": np.frombuffer(meta, dtype=np.uint8),
        "lidar": frame.lidar.points,
        "lidar_source": frame.lidar.source,
        "radar": frame.radar.points,
        "radar_source": frame.radar.source,
        "image": frame.image.astype(np.float32),
        "intrinsics": frame.intrinsics.matrix,
        "image_size": np.array([frame.intrinsics.width, frame.intrinsics.height], dtype=np.int64),
        "t_ext": frame.t_ext,
        "t_lidar_aug": frame.t_lidar_aug,
        "boxes": frame.boxes_array,
        "box_weather": np.asarray(frame.box_weather, dtype=np.int64),
        "box_frame": np.asarray(frame.box_frame, dtype=np.int64),
    })


def frame_from_bytes(data: bytes) -> Frame:
    t = load_tensors(data)
    meta = json.loads(bytes(t["meta"]).decode())
    w, h = (int(v) for v in t["image_size"])
    return Frame(id=meta["id"], weather=WeatherClass.parse(meta["weather"]),
                 lidar=LidarCloud(t["lidar"], t["lidar_source"]), radar=RadarCloud(t["radar"], t["radar_source"]),
                 image=t["image"], intrinsics=CameraIntrinsics(t["intrinsics"], w, h), t_ext=t["t_ext"],
                 gt_boxes=[Box3D.from_array(b) for b in t["boxes"]], t_lidar_aug=t["t_lidar_aug"],
                 box_weather=[int(v) for v in t["box_weather"]], box_frame=[int(v) for v in t["box_frame"]])


def save_frame(frame: Frame, path) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame(path) -> Frame:
    return frame_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ datasets


@dataclass(frozen=True)
class DatasetConfig:
    """Per-class frame counts. ``ratios`` (skewed mode) multiplies ``per_class``."""

    per_class: int = 100
    ratios: tuple | None = None
    train_fraction: float = 0.5
    test_fraction: float = 0.5
    scene: SceneConfig = field(default_factory=SceneConfig)

    def class_counts(self) -> list:
        if self.ratios is None:
            return [int(self.per_class)] * N_WEATHER
        if len(self.ratios) != N_WEATHER:
            raise ValueError(f"ratio vector needs {N_WEATHER} entries")
        return [int(round(self.per_class * r)) for r in self.ratios]

    def split_counts(self, n: int) -> tuple:
        n_test = int(round(n * self.test_fraction))
        return n - n_test, n_test


@dataclass
class DatasetManifest:
    seed: int
    entries: list  # dicts: id, weather (label), split, file
    params: dict
    schema_version: int = 1

    @property
    def counts(self) -> dict:
        out = {name: 0 for name in WEATHER_NAMES}
        for e in self.entries:
            out[e["weather"]] += 1
        return out

    def split(self, name: str) -> list:
        return [e for e in self.entries if e["split"] == name]

    def to_text(self) -> str:
        header = {"schema": "weathermoe-manifest", "schema_version": self.schema_version, "seed": self.seed,
                  "params": self.params, "counts": self.counts,
                  "splits": {s: len(self.split(s)) for s in ("train", "test")}}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e, sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        if header.get("schema") != "weathermoe-manifest" or header.get("schema_version") != 1:
            raise ValueError("unsupported manifest schema")
        return cls(seed=header["seed"], entries=[json.loads(ln) for ln in lines[1:]], params=header["params"])


def _validate_dataset_config(cfg: DatasetConfig) -> None:
    f_tr, f_te = cfg.train_fraction, cfg.test_fraction
    if not (0 <= f_tr <= 1 and 0 <= f_te <= 1) or abs(f_tr + f_te - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be in [0, 1] and sum to 1, got {f_tr} + {f_te}")
    for name, n in zip(WEATHER_NAMES, cfg.class_counts()):
        n_tr, n_te = cfg.split_counts(n)
        if n < 0 or (f_tr > 0 and n_tr < 1) or (f_te > 0 and n_te < 1):
            raise ValueError(f"class {name} has {n} frames, too few for the configured splits")


def plan_dataset(config: DatasetConfig, seed: int) -> DatasetManifest:
    """Assign ids, weather tags and splits without generating any frame."""
    _validate_dataset_config(config)
    entries = []
    fid = 0
    rng = Rng(derive_seed(seed, 0x5917))
    for w, n in zip(WeatherClass, config.class_counts()):
        n_train, _ = config.split_counts(n)
        perm = rng.permutation(n)
        for k in range(n):
            split = "train" if perm[k] < n_train else "test"
            entries.append({"id": fid, "weather": w.label, "split": split, "file": f"frames/{fid:06d}.bin"})
            fid += 1
    params = {"per_class": config.per_class, "ratios": list(config.ratios) if config.ratios else None,
              "train_fraction": config.train_fraction, "test_fraction": config.test_fraction,
              "scene": _scene_params(config.scene)}
    return DatasetManifest(seed=seed, entries=entries, params=params)


def _scene_params(scene: SceneConfig) -> dict:
    d = asdict(scene)
    d["grid"] = asdict(scene.grid)
    return d


def generate_frames(manifest: DatasetManifest, scene: SceneConfig, split: str | None = None) -> list:
    return [make_frame(manifest.seed, e["id"], e["weather"], scene)
            for e in manifest.entries if split is None or e["split"] == split]


def build_dataset(config: DatasetConfig, seed: int, out_dir) -> DatasetManifest:
    """Generate every frame and write ``frames/*.bin`` plus ``manifest.jsonl`` under ``out_dir``."""
    manifest = plan_dataset(config, seed)
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    for e in manifest.entries:
        frame = make_frame(seed, e["id"], e["weather"], config.scene)
        save_frame(frame, out / e["file"])
    (out / "manifest.jsonl").write_text(manifest.to_text())
    return manifest


def load_manifest(path) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    return DatasetManifest.from_text(p.read_text())


def load_split(dataset_dir, split: str | None = None) -> list:
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    return [load_frame(root / e["file"]) for e in manifest.entries if split is None or e["split"] == split]


def image_statistics(image: np.ndarray) -> np.ndarray:
    """Per-channel mean, variance and high-frequency (Laplacian) energy."""
    img = image.astype(np.float64)
    lap = (4 * img[:, 1:-1, 1:-1] - img[:, :-2, 1:-1] - img[:, 2:, 1:-1] - img[:, 1:-1, :-2] - img[:, 1:-1, 2:])
    return np.concatenate([img.mean(axis=(1, 2)), img.var(axis=(1, 2)), (lap ** 2).mean(axis=(1, 2))])
