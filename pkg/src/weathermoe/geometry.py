"""Oriented boxes, rotated IoU, rigid transforms and the pinhole camera chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Box3D:
    """Yaw-only oriented box; (dx, dy, dz) are length along heading, width, height."""

    x: float
    y: float
    z: float
    dx: float
    dy: float
    dz: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError(f"box sizes must be positive, got {(self.dx, self.dy, self.dz)}")
        vals = (self.x, self.y, self.z, self.dx, self.dy, self.dz, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box parameters must be finite, got {vals}")
        yaw = wrap_angle(self.yaw)
        if yaw != self.yaw:
            object.__setattr__(self, "yaw", yaw)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.dx, self.dy, self.dz, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        return cls(*a)

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.to_array() for b in boxes])


def _as_array(b) -> np.ndarray:
    return b.to_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)


def bev_corners(box) -> np.ndarray:
    """Footprint corners (4, 2), counter-clockwise."""
    x, y, _, dx, dy, _, yaw = _as_array(box)
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[-dx, -dy], [dx, -dy], [dx, dy], [-dx, dy]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: intersect ``subject`` with convex CCW polygon ``clip``."""
    out = list(map(tuple, subject))
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    area = polygon_area(clip_convex(bev_corners(a), bev_corners(b)))
    return max(area, 0.0)


def bev_iou(a, b) -> float:
    """IoU of the rotated footprints."""
    a, b = _as_array(a), _as_array(b)
    if np.array_equal(a, b):
        return 1.0
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b) -> float:
    """Footprint intersection times vertical overlap, over volume union."""
    a, b = _as_array(a), _as_array(b)
    if np.array_equal(a, b):
        return 1.0
    zo = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if zo <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * zo
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0))


def pairwise_iou(a: np.ndarray, b: np.ndarray, mode: str = "3d") -> np.ndarray:
    fn = iou_3d if mode == "3d" else bev_iou
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = fn(a[i], b[j])
    return out


def points_in_box(points: np.ndarray, box, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of (N, >=3) points inside the oriented box."""
    x, y, z, dx, dy, dz, yaw = _as_array(box)
    p = np.asarray(points, dtype=np.float64)[:, :3] - np.array([x, y, z])
    c, s = math.cos(yaw), math.sin(yaw)
    lx = c * p[:, 0] + s * p[:, 1]
    ly = -s * p[:, 0] + c * p[:, 1]
    return ((np.abs(lx) <= dx / 2 + margin) & (np.abs(ly) <= dy / 2 + margin)
            & (np.abs(p[:, 2]) <= dz / 2 + margin))


# ---------------------------------------------------------------- transforms


def rigid_transform(rotation=None, translation=None) -> np.ndarray:
    t = np.eye(4)
    if rotation is not None:
        t[:3, :3] = rotation
    if translation is not None:
        t[:3, 3] = translation
    return t


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rigid(t: np.ndarray, tol: float = 1e-6) -> bool:
    r = t[:3, :3]
    return (abs(np.linalg.det(r) - 1.0) < tol and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and np.allclose(t[3], [0, 0, 0, 1], atol=tol))


def invert_rigid(t: np.ndarray) -> np.ndarray:
    r = t[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t[:3, 3]
    return out


def apply_transform(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ t[:3, :3].T + t[:3, 3]


@dataclass(frozen=True)
class CameraIntrinsics:
    matrix: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.shape != (3, 3):
            raise ValueError(f"intrinsic matrix must be 3x3, got {a.shape}")
        if a[0, 0] <= 0 or a[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= a[0, 2] <= self.width and 0 <= a[1, 2] <= self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "matrix", a)

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]]), width, height)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        a = self.matrix.copy()
        a[:2] *= factor
        return replace(self, matrix=a, width=int(round(self.width * factor)),
                       height=int(round(self.height * factor)))


def camera_to_ego(height: float = 1.6, forward: float = 0.0) -> np.ndarray:
    """Extrinsic for a forward-looking camera: camera (x right, y down, z ahead) -> ego (x ahead, y left, z up)."""
    r = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return rigid_transform(r, [forward, 0.0, height])


def _intr4(a) -> np.ndarray:
    a = a.matrix if isinstance(a, CameraIntrinsics) else np.asarray(a, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = a
    return m


def pixel_to_ego_matrix(A, T_ext, T_img_aug=None, T_lidar_aug=None) -> np.ndarray:
    """The 4x4 map T_lidar_aug . T_ext . A^-1 . T_img_aug^-1."""
    a4 = _intr4(A)
    if abs(np.linalg.det(a4)) < 1e-12:
        raise ValueError("intrinsic matrix is singular")
    t_img = np.eye(4) if T_img_aug is None else np.asarray(T_img_aug, dtype=np.float64)
    t_lid = np.eye(4) if T_lidar_aug is None else np.asarray(T_lidar_aug, dtype=np.float64)
    return t_lid @ np.asarray(T_ext, dtype=np.float64) @ np.linalg.inv(a4) @ np.linalg.inv(t_img)


def transform_pixel_to_ego(u, v, d, A, T_ext, T_img_aug=None, T_lidar_aug=None) -> np.ndarray:
    """Un-project pixel (u, v) at depth d into the (augmented) ego frame.

    Vectorizes over array-valued u, v, d; returns (..., 3).
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    m = pixel_to_ego_matrix(A, T_ext, T_img_aug, T_lidar_aug)
    u, v, d = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), d)
    h = np.stack([u * d, v * d, d, np.ones_like(d)], axis=-1)
    return (h @ m.T)[..., :3]


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    depth: float
    status: str  # "ok", "out_of_frame" or "behind_camera"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def project_points(points: np.ndarray, A, T_ext):
    """Vectorized projection; returns (u, v, depth) arrays. Depth <= 0 means behind the camera."""
    a = A.matrix if isinstance(A, CameraIntrinsics) else np.asarray(A, dtype=np.float64)
    cam = apply_transform(invert_rigid(np.asarray(T_ext, dtype=np.float64)), np.atleast_2d(points)[:, :3])
    depth = cam[:, 2]
    pix = cam @ a.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pix[:, 0] / depth
        v = pix[:, 1] / depth
    return u, v, depth


def project_to_pixel(point, A, T_ext) -> Projection:
    """Perspective projection of one ego point. Frame bounds are checked when ``A`` is a CameraIntrinsics."""
    u, v, depth = project_points(np.asarray(point, dtype=np.float64)[None], A, T_ext)
    u, v, depth = float(u[0]), float(v[0]), float(depth[0])
    if depth <= 0:
        return Projection(float("nan"), float("nan"), depth, "behind_camera")
    if isinstance(A, CameraIntrinsics) and not (0 <= u < A.width and 0 <= v < A.height):
        return Projection(u, v, depth, "out_of_frame")
    return Projection(u, v, depth, "ok")


# --------------------------------------------------------------- box fusion


def weighted_box_mean(boxes: Sequence[tuple]) -> Box3D:
    """Weighted fusion of matched boxes given as (box, weight) pairs.

    Weights are renormalized over the set. Yaws are flipped by pi into the
    hemisphere of the highest-weight box before a weighted circular mean.
    """
    if len(boxes) == 0:
        raise ValueError("weighted_box_mean needs at least one box")
    if len(boxes) == 1:
        b = boxes[0][0]
        if boxes[0][1] <= 0:
            raise ValueError("weights must be positive")
        return b if isinstance(b, Box3D) else Box3D.from_array(b)
    arr = np.stack([_as_array(b) for b, _ in boxes])
    w = np.array([float(p) for _, p in boxes])
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    w = w / w.sum()
    ref = arr[int(np.argmax(w)), 6]
    yaw = arr[:, 6].copy()
    yaw[np.cos(yaw - ref) < 0] += np.pi
    mean = w @ arr[:, :6]
    fused_yaw = math.atan2(float(w @ np.sin(yaw)), float(w @ np.cos(yaw)))
    return Box3D(*[float(v) for v in mean], yaw=fused_yaw)
