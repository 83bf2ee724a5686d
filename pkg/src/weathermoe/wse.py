"""Shared BEV backbone, weather-specific experts and the center-based detection head."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from ._validation import check_same_grid
from .geometry import Box3D
from .nncore import Rng
from .pointcloud import GridSpec

GROUND_Z = 0.78  # fixed z of decoded box centers before the learned offset
HEAD_CHANNELS = 9  # objectness, dx, dy, dz, log l, log w, log h, sin yaw, cos yaw
LOG_SIZE_CLIP = 3.0
PRIOR_LOGIT = -4.6  # sigmoid ~ 0.01
SIZE_PRIOR = (4.3, 1.8, 1.55)


def _conv_stack(channels, rng, relu_last=True):
    layers = []
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        layers.append(nn.Conv2d(cin, cout, 3, 1, 1, rng=rng))
        if relu_last or i < len(channels) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _prefixed(out: OrderedDict, prefix: str, layer: nn.Layer) -> None:
    for k, p in layer.params().items():
        out[f"{prefix}.{k}"] = p


class SharedBackbone(nn.Layer):
    """Two parallel conv stacks (LiDAR, radar): 4 -> 32 -> 32 each."""

    def __init__(self, in_ch=4, width=32, rng: Rng | None = None):
        super().__init__()
        self.lidar = _conv_stack([in_ch, width, width], rng)
        self.radar = _conv_stack([in_ch, width, width], rng)

    def params(self):
        out = OrderedDict()
        _prefixed(out, "lidar", self.lidar)
        _prefixed(out, "radar", self.radar)
        return out

    def forward(self, lidar_grid, radar_grid):
        if lidar_grid.shape != radar_grid.shape:
            raise ValueError(f"shared_forward: lidar grid {lidar_grid.shape} and radar grid {radar_grid.shape} differ")
        self._cache = True
        return self.lidar.forward(lidar_grid), self.radar.forward(radar_grid)

    def backward(self, grad_l, grad_r):
        self._need_cache()
        return self.lidar.backward(grad_l), self.radar.backward(grad_r)

    def clear(self):
        self._cache = None
        self.lidar.clear()
        self.radar.clear()

    def astype(self, dtype):
        self.lidar.astype(dtype)
        self.radar.astype(dtype)
        return self


class Expert(nn.Layer):
    """Weather-specific backbone E_w, fusion F_w and head H_w, applied in that order.

    With ``camera_channels`` > 0 the fusion input is the channel concat of the
    camera BEV feature followed by the two modality features.
    """

    def __init__(self, width=32, fused=64, camera_channels=0, rng: Rng | None = None):
        super().__init__()
        self.camera_channels = camera_channels
        self.backbone_lidar = _conv_stack([width, width, width], rng)
        self.backbone_radar = _conv_stack([width, width, width], rng)
        self.fusion = _conv_stack([camera_channels + 2 * width, fused, fused], rng)
        self.head = nn.Conv2d(fused, HEAD_CHANNELS, 1, 1, 0, rng=rng)
        if rng is not None:
            self.head.weight.value *= 0.1
            self.head.bias.value[:] = [PRIOR_LOGIT, 0, 0, 0, *np.log(SIZE_PRIOR), 0, 1]
        self._width = width

    def parts(self):
        return (("backbone_lidar", self.backbone_lidar), ("backbone_radar", self.backbone_radar),
                ("fusion", self.fusion), ("head", self.head))

    def params(self):
        out = OrderedDict()
        for name, layer in self.parts():
            _prefixed(out, name, layer)
        return out

    def architecture(self) -> tuple:
        return tuple((k, p.value.shape) for k, p in self.params().items())

    def forward(self, f_lidar, f_radar, f_camera=None):
        check_same_grid(f_lidar, f_radar, *(() if f_camera is None else (f_camera,)))
        el = self.backbone_lidar.forward(f_lidar)
        er = self.backbone_radar.forward(f_radar)
        if self.camera_channels:
            if f_camera is None:
                raise ValueError("expert was built with a camera branch but got no camera feature")
            cat = np.concatenate([f_camera, el, er], axis=1)
        else:
            cat = np.concatenate([el, er], axis=1)
        self._cache = True
        return self.head.forward(self.fusion.forward(cat))

    def backward(self, grad):
        """Returns gradients w.r.t. (f_lidar, f_radar, f_camera or None)."""
        self._need_cache()
        g = self.fusion.backward(self.head.backward(grad))
        c = self.camera_channels
        gc = g[:, :c] if c else None
        gl = self.backbone_lidar.backward(g[:, c:c + self._width])
        gr = self.backbone_radar.backward(g[:, c + self._width:])
        return gl, gr, gc

    def clear(self):
        self._cache = None
        for _, layer in self.parts():
            layer.clear()

    def astype(self, dtype):
        for _, layer in self.parts():
            layer.astype(dtype)
        return self

    def copy_from(self, other: "Expert") -> None:
        for (k, p), (k2, q) in zip(self.params().items(), other.params().items()):
            if k != k2 or p.value.shape != q.value.shape:
                raise ValueError("experts differ in architecture")
            p.value = q.value.copy()
            p.grad = np.zeros_like(p.value)
            p.velocity = np.zeros_like(p.value)


# --------------------------------------------------------------- box coding


@dataclass
class DetectionSet:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    expert: int = -1
    weight: float = 1.0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.scores):
            raise ValueError("one score per box is required")

    def __len__(self):
        return len(self.scores)

    def box_list(self) -> list:
        return [Box3D.from_array(b) for b in self.boxes]

    def sorted(self) -> "DetectionSet":
        order = np.argsort(-self.scores, kind="stable")
        return DetectionSet(self.boxes[order], self.scores[order], self.expert, self.weight)


def encode_targets(boxes, grid: GridSpec):
    """Regression targets (8, H, W) and positive mask (H, W). First box wins a shared cell."""
    h, w = grid.height, grid.width
    reg = np.zeros((HEAD_CHANNELS - 1, h, w))
    pos = np.zeros((h, w), dtype=bool)
    for b in boxes:
        b = b if isinstance(b, Box3D) else Box3D.from_array(b)
        if not grid.contains(b.x, b.y):
            continue
        row, col = (int(v) for v in grid.cell_index(b.x, b.y))
        if pos[row, col]:
            continue
        cx, cy = grid.cell_center(row, col)
        pos[row, col] = True
        reg[:, row, col] = [b.x - cx, b.y - cy, b.z - GROUND_Z, math.log(b.dx), math.log(b.dy), math.log(b.dz),
                            math.sin(b.yaw), math.cos(b.yaw)]
    return reg, pos


def encode(boxes, grid: GridSpec, logit: float = 20.0) -> np.ndarray:
    """A head map whose decoding reproduces ``boxes`` (centers in distinct cells)."""
    reg, pos = encode_targets(boxes, grid)
    obj = np.where(pos, logit, -logit)[None]
    return np.concatenate([obj, reg]).astype(np.float64)


def decode(head_map, threshold: float, grid: GridSpec, max_boxes: int | None = None) -> DetectionSet:
    """Turn cells with sigmoid(objectness) >= threshold into boxes."""
    m = np.asarray(head_map, dtype=np.float64)
    scores = nn.sigmoid(m[0])
    rows, cols = np.nonzero(scores >= threshold)
    if len(rows) == 0:
        return DetectionSet()
    s = scores[rows, cols]
    order = np.argsort(-s, kind="stable")
    if max_boxes is not None:
        order = order[:max_boxes]
    rows, cols, s = rows[order], cols[order], s[order]
    cx, cy = grid.cell_center(rows, cols)
    r = m[1:, rows, cols]
    sizes = np.exp(np.clip(r[3:6], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
    yaw = np.arctan2(r[6], r[7])
    boxes = np.column_stack([cx + r[0], cy + r[1], GROUND_Z + r[2], sizes.T, yaw])
    return DetectionSet(boxes, s)


def detection_loss(head_map, gt_boxes, grid: GridSpec, alpha=0.25, gamma=2.0):
    """Focal objectness over all cells + smooth-L1 regression at positives, over max(1, #positives).

    ``head_map`` is (9, H, W); returns (loss, gradient of the same shape).
    """
    m = np.asarray(head_map)
    reg_t, pos = encode_targets(gt_boxes, grid)
    norm = max(1, int(pos.sum()))
    obj_loss, obj_grad = nn.focal_loss(m[0], pos.astype(m.dtype), alpha, gamma)
    grad = np.zeros_like(m)
    grad[0] = obj_grad / norm
    reg_loss = 0.0
    if pos.any():
        pred = m[1:, pos]
        reg_loss, g = nn.smooth_l1_loss(pred, reg_t[:, pos].astype(m.dtype), beta=1.0 / 9.0)
        grad[1:, pos] = g / norm
    return (obj_loss + reg_loss) / norm, grad


def batch_detection_loss(head_maps, gt_lists, grid: GridSpec):
    """Mean of per-frame losses over the batch."""
    n = len(head_maps)
    total = 0.0
    grad = np.zeros_like(head_maps)
    for i in range(n):
        loss, g = detection_loss(head_maps[i], gt_lists[i], grid)
        total += loss
        grad[i] = g / n
    return total / max(n, 1), grad
