"""Camera branch: LiDAR-guided sparse depth, DepthNet, frustum lifting, BEV splatting and tri-modal fusion.

The image features come from the weather classifier's trunk (stem plus
two blocks, stride 8). Lifting is the per-pixel outer product of a depth
distribution and a context vector; splatting sums frustum features into
ego-frame voxels, flattens z into channels and downsamples onto the pillar grid.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import nncore as nn
from ._validation import check_same_grid
from .nncore import Rng
from .pointcloud import GridSpec

D_MIN, D_MAX, N_BINS = 1.0, 49.0, 24
CONTEXT_CHANNELS = 16
CAMERA_CHANNELS = 16


def depth_bins(d_min: float = D_MIN, d_max: float = D_MAX, n: int = N_BINS) -> np.ndarray:
    """Uniform bin edges, length n + 1."""
    if not (0 < d_min < d_max) or n < 1:
        raise ValueError("depth bins need 0 < d_min < d_max and n >= 1")
    return np.linspace(d_min, d_max, n + 1)


def bin_centers(edges: np.ndarray) -> np.ndarray:
    return 0.5 * (edges[:-1] + edges[1:])


def lidar_to_sparse_depth(points: np.ndarray, A: geo.CameraIntrinsics, T_ext, edges: np.ndarray) -> np.ndarray:
    """One-hot depth bins (D1, H, W) of the nearest projected LiDAR hit per pixel."""
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("depth bin edges must increase")
    d1, h, w = len(edges) - 1, A.height, A.width
    out = np.zeros((d1, h, w), dtype=nn.DTYPE)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1] if np.ndim(points) == 2 else 3)
    if len(pts) == 0:
        return out
    u, v, depth = geo.project_points(pts[:, :3], A, T_ext)
    with np.errstate(invalid="ignore"):
        ok = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h) & (depth >= edges[0]) & (depth < edges[-1])
    if not ok.any():
        return out
    col = np.floor(u[ok]).astype(np.int64)
    row = np.floor(v[ok]).astype(np.int64)
    d = depth[ok]
    pix = row * w + col
    # nearest hit per pixel: sort by (pixel, depth), keep the first of each pixel
    order = np.lexsort((d, pix))
    pix, d = pix[order], d[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, d = pix[first], d[first]
    b = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, d1 - 1)
    out[b, pix // w, pix % w] = 1.0
    return out


class DepthNet(nn.Layer):
    """Sparse-depth conv, concat with image features, shared conv trunk, context and depth heads."""

    def __init__(self, img_channels=32, d1=N_BINS, d2=N_BINS, context=CONTEXT_CHANNELS, hidden=32,
                 rng: Rng | None = None):
        super().__init__()
        self.img_channels = img_channels
        self.d1 = d1
        self.sparse = nn.Sequential(nn.Conv2d(d1, 16, 3, 1, 1, rng=rng), nn.ReLU())
        self.trunk = nn.Sequential(nn.Conv2d(img_channels + 16, hidden, 3, 1, 1, rng=rng), nn.ReLU())
        self.context_head = nn.Conv2d(hidden, context, 1, 1, 0, rng=rng)
        self.depth_head = nn.Conv2d(hidden, d2, 1, 1, 0, rng=rng)

    def parts(self):
        return (("sparse", self.sparse), ("trunk", self.trunk), ("context_head", self.context_head),
                ("depth_head", self.depth_head))

    def params(self):
        out = OrderedDict()
        for name, layer in self.parts():
            for k, p in layer.params().items():
                out[f"{name}.{k}"] = p
        return out

    def forward(self, f_img, sparse):
        f_img, sparse = np.asarray(f_img), np.asarray(sparse)
        if f_img.ndim != 4 or sparse.ndim != 4 or f_img.shape[0] != sparse.shape[0] \
                or f_img.shape[2:] != sparse.shape[2:]:
            raise ValueError(f"depthnet: image features {f_img.shape} and sparse depth {sparse.shape} are not aligned")
        if f_img.shape[1] != self.img_channels or sparse.shape[1] != self.d1:
            raise ValueError("depthnet: unexpected channel count")
        s = self.sparse.forward(sparse)
        t = self.trunk.forward(np.concatenate([f_img, s], axis=1))
        self._cache = True
        return self.context_head.forward(t), self.depth_head.forward(t)

    def backward(self, g_context, g_depth):
        """Returns gradients w.r.t. (f_img, sparse depth)."""
        self._need_cache()
        g = self.context_head.backward(g_context) + self.depth_head.backward(g_depth)
        g = self.trunk.backward(g)
        g_img, g_s = g[:, :self.img_channels], g[:, self.img_channels:]
        return g_img, self.sparse.backward(g_s)

    def clear(self):
        self._cache = None
        for _, layer in self.parts():
            layer.clear()

    def astype(self, dtype):
        for _, layer in self.parts():
            layer.astype(dtype)
        return self


def depthnet(f_img, sparse, net: DepthNet):
    return net.forward(np.asarray(f_img)[None] if np.ndim(f_img) == 3 else f_img,
                       np.asarray(sparse)[None] if np.ndim(sparse) == 3 else sparse)


def lift(d_prob, f_context):
    """Outer product per pixel: (..., D2, H, W) x (..., C2, H, W) -> (..., D2, C2, H, W)."""
    d_prob, f_context = np.asarray(d_prob), np.asarray(f_context)
    if d_prob.shape[-2:] != f_context.shape[-2:] or d_prob.shape[:-3] != f_context.shape[:-3]:
        raise ValueError("lift: depth distribution and context differ in shape")
    return d_prob[..., :, None, :, :] * f_context[..., None, :, :, :]


def lift_backward(grad, d_prob, f_context):
    g_d = (grad * f_context[..., None, :, :, :]).sum(axis=-3)
    g_c = (grad * d_prob[..., :, None, :, :]).sum(axis=-4)
    return g_d, g_c


# ---------------------------------------------------------------- splatting


@dataclass(frozen=True)
class VoxelGrid:
    """Ego-frame voxels: the BEV extent at ``factor`` times the pillar resolution, with ``nz`` z slabs."""

    bev: GridSpec = GridSpec()
    factor: int = 2
    z_min: float = -1.0
    z_max: float = 3.0
    nz: int = 2

    @property
    def cell(self) -> float:
        return self.bev.cell / self.factor

    @property
    def shape(self) -> tuple:
        return (self.nz, self.bev.height * self.factor, self.bev.width * self.factor)

    def index(self, pts: np.ndarray) -> np.ndarray:
        """Flat voxel index (z-major) per point, -1 outside."""
        pts = np.asarray(pts, dtype=np.float64)
        nz, ny, nx = self.shape
        ix = np.floor((pts[..., 0] - self.bev.x_min) / self.cell).astype(np.int64)
        iy = np.floor((pts[..., 1] - self.bev.y_min) / self.cell).astype(np.int64)
        iz = np.floor((pts[..., 2] - self.z_min) / ((self.z_max - self.z_min) / nz)).astype(np.int64)
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        return np.where(ok, (iz * ny + iy) * nx + ix, -1)


def frustum_points(height: int, width: int, depths: np.ndarray, A, T_ext, T_img_aug=None, T_lidar_aug=None):
    """Ego coordinates (D, H, W, 3) of every frustum cell, using pixel centers."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    d = np.asarray(depths, dtype=np.float64)[:, None, None]
    return geo.transform_pixel_to_ego(u[None], v[None], d, A, T_ext, T_img_aug, T_lidar_aug)


def splat_indices(height, width, depths, A, T_ext, voxels: VoxelGrid, T_img_aug=None, T_lidar_aug=None):
    """Voxel index (D, H, W) of each frustum cell, -1 when it lands outside the grid."""
    return voxels.index(frustum_points(height, width, depths, A, T_ext, T_img_aug, T_lidar_aug))


def splat(frustum, index, voxels: VoxelGrid) -> np.ndarray:
    """Sum-pool frustum features (D, C, H, W) into voxels, z flattened into channels: (nz*C, Y, X).

    Channel layout is z-slab major: channel ``z * C + c``.
    """
    frustum = np.asarray(frustum)
    d, c, h, w = frustum.shape
    nz, ny, nx = voxels.shape
    feats = frustum.transpose(0, 2, 3, 1).reshape(-1, c)
    idx = np.asarray(index).reshape(-1)
    ok = idx >= 0
    acc = np.zeros((nz * ny * nx, c), dtype=frustum.dtype)
    np.add.at(acc, idx[ok], feats[ok])
    return acc.reshape(nz, ny, nx, c).transpose(0, 3, 1, 2).reshape(nz * c, ny, nx)


def splat_backward(grad, index, frustum_shape, voxels: VoxelGrid) -> np.ndarray:
    d, c, h, w = frustum_shape
    nz, ny, nx = voxels.shape
    g = np.asarray(grad).reshape(nz, c, ny, nx).transpose(0, 2, 3, 1).reshape(-1, c)
    idx = np.asarray(index).reshape(-1)
    out = np.zeros((idx.size, c), dtype=g.dtype)
    ok = idx >= 0
    out[ok] = g[idx[ok]]
    return out.reshape(d, h, w, c).transpose(0, 3, 1, 2)


# ------------------------------------------------------------ camera branch


class CameraBranch(nn.Layer):
    """DepthNet -> softmax depth -> lift -> splat -> stride-2 conv onto the pillar grid.

    ``forward`` takes precomputed image features, sparse depth and splat
    indices per frame (see ``prepare``), so the frozen image trunk stays
    outside the trainable graph.
    """

    def __init__(self, img_channels=32, voxels: VoxelGrid | None = None, out_channels=CAMERA_CHANNELS,
                 bins=N_BINS, context=CONTEXT_CHANNELS, hidden=32, rng: Rng | None = None):
        super().__init__()
        self.voxels = voxels or VoxelGrid()
        self.depthnet = DepthNet(img_channels, bins, bins, context, hidden, rng=rng)
        cin = self.voxels.nz * context
        self.down = nn.Sequential(nn.Conv2d(cin, out_channels, 3, self.voxels.factor, 1, rng=rng), nn.ReLU())
        self.out_channels = out_channels

    def params(self):
        out = OrderedDict()
        for k, p in self.depthnet.params().items():
            out[f"depthnet.{k}"] = p
        for k, p in self.down.params().items():
            out[f"down.{k}"] = p
        return out

    def forward(self, f_img, sparse, indices):
        ctx, logits = self.depthnet.forward(f_img, sparse)
        prob = nn.softmax(logits, axis=1)
        bev = []
        for i in range(len(ctx)):
            bev.append(splat(lift(prob[i], ctx[i]), indices[i], self.voxels))
        self._cache = (ctx, prob, indices)
        return self.down.forward(np.stack(bev))

    def backward(self, grad):
        ctx, prob, indices = self._need_cache()
        g_bev = self.down.backward(grad)
        g_ctx = np.zeros_like(ctx)
        g_prob = np.zeros_like(prob)
        for i in range(len(ctx)):
            shape = (prob.shape[1], ctx.shape[1]) + ctx.shape[2:]
            g_fr = splat_backward(g_bev[i], indices[i], shape, self.voxels)
            g_prob[i], g_ctx[i] = lift_backward(g_fr, prob[i], ctx[i])
        g_logits = nn.softmax_backward(g_prob, prob, axis=1)
        return self.depthnet.backward(g_ctx, g_logits)

    def clear(self):
        self._cache = None
        self.depthnet.clear()
        self.down.clear()

    def astype(self, dtype):
        self.depthnet.astype(dtype)
        self.down.astype(dtype)
        return self


def sensor_frame_points(frame) -> np.ndarray:
    """LiDAR xyz with the frame's LiDAR augmentation undone, i.e. where the camera saw them."""
    pts = np.asarray(frame.lidar.points[:, :3], dtype=np.float64)
    if np.array_equal(frame.t_lidar_aug, np.eye(4)):
        return pts
    inv = np.linalg.inv(frame.t_lidar_aug)
    return pts @ inv[:3, :3].T + inv[:3, 3]


def prepare_camera_inputs(frames, trunk: nn.Layer, voxels: VoxelGrid, stride: int = 8, edges=None):
    """Image features from a frozen trunk, per-frame sparse depth and splat indices."""
    edges = depth_bins() if edges is None else edges
    centers = bin_centers(edges)
    images = np.stack([f.image for f in frames]).astype(nn.DTYPE)
    f_img = nn.detached(trunk).forward(images)
    sparse, indices = [], []
    for f in frames:
        A = f.intrinsics.scaled(1.0 / stride)
        if (A.height, A.width) != f_img.shape[2:]:
            raise ValueError("image feature map does not match the scaled camera")
        sparse.append(lidar_to_sparse_depth(sensor_frame_points(f), A, f.t_ext, edges))
        indices.append(splat_indices(A.height, A.width, centers, A, f.t_ext, voxels, T_lidar_aug=f.t_lidar_aug))
    return f_img, np.stack(sparse), indices


class TriModalFusion(nn.Layer):
    """Concat [camera, lidar, radar] along channels, then two 3x3 conv layers."""

    def __init__(self, c_cam, c_lidar, c_radar, out=64, rng: Rng | None = None):
        super().__init__()
        self.split = (c_cam, c_lidar, c_radar)
        self.convs = nn.Sequential(nn.Conv2d(sum(self.split), out, 3, 1, 1, rng=rng), nn.ReLU(),
                                   nn.Conv2d(out, out, 3, 1, 1, rng=rng), nn.ReLU())

    def params(self):
        return self.convs.params()

    def forward(self, f_c, f_l, f_r):
        check_same_grid(f_c, f_l, f_r)
        self._cache = True
        return self.convs.forward(np.concatenate([f_c, f_l, f_r], axis=1))

    def backward(self, grad):
        self._need_cache()
        g = self.convs.backward(grad)
        a, b, _ = self.split
        return g[:, :a], g[:, a:a + b], g[:, a + b:]

    def clear(self):
        self._cache = None
        self.convs.clear()

    def astype(self, dtype):
        self.convs.astype(dtype)
        return self


def fuse_trimodal(f_c, f_l, f_r, fusion: TriModalFusion):
    return fusion.forward(f_c, f_l, f_r)
