"""LiDAR / radar point containers and pillar rasterization onto a BEV grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import DTYPE


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned BEV extent in meters with square cells. Rows follow y, columns follow x."""

    x_min: float = 0.0
    x_max: float = 32.0
    y_min: float = -16.0
    y_max: float = 16.0
    cell: float = 1.0

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            n = (hi - lo) / self.cell
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError("extent must be a positive whole number of cells")

    @property
    def extent(self) -> tuple:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    def cell_index(self, x, y):
        """(row, col) integer indices; may fall outside the grid."""
        col = np.floor((np.asarray(x) - self.x_min) / self.cell).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_min) / self.cell).astype(np.int64)
        return row, col

    def cell_center(self, row, col):
        return (self.x_min + (np.asarray(col) + 0.5) * self.cell,
                self.y_min + (np.asarray(row) + 0.5) * self.cell)

    def contains(self, x, y):
        x, y = np.asarray(x), np.asarray(y)
        return (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)


@dataclass
class LidarCloud:
    """(N, 4) array of x, y, z, intensity; ``source`` is the box index per point (-1 for background)."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    source: np.ndarray | None = None

    ncols = 4

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, self.ncols)
        if self.source is None:
            self.source = np.full(len(self.points), -1, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)
        if len(self.source) != len(self.points):
            raise ValueError("source labels must match point count")

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def values(self) -> np.ndarray:
        """The per-point scalar pooled by ``pillarize``."""
        return self.points[:, 3]

    def subset(self, mask) -> "LidarCloud":
        return type(self)(self.points[mask], self.source[mask])

    def concat(self, other) -> "LidarCloud":
        return type(self)(np.concatenate([self.points, other.points]),
                          np.concatenate([self.source, other.source]))

    def validate(self) -> None:
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")
        if self.ncols == 4 and len(self) and (self.points[:, 3].min() < 0 or self.points[:, 3].max() > 1):
            raise ValueError("lidar intensity must lie in [0, 1]")


@dataclass
class RadarCloud(LidarCloud):
    """(N, 5) array of x, y, z, doppler (m/s), power (dB)."""

    ncols = 5
    power_scale = 1.0 / 30.0

    @property
    def values(self) -> np.ndarray:
        return self.points[:, 4] * self.power_scale


def crop(cloud: LidarCloud, extent) -> LidarCloud:
    """Keep points with x in [x_min, x_max) and y in [y_min, y_max); order preserved."""
    if isinstance(extent, GridSpec):
        extent = extent.extent
    x0, x1, y0, y1 = extent
    p = cloud.points
    mask = (p[:, 0] >= x0) & (p[:, 0] < x1) & (p[:, 1] >= y0) & (p[:, 1] < y1)
    return cloud.subset(mask)


@dataclass
class PillarGrid:
    grid: GridSpec
    features: np.ndarray

    channels = ("count", "mean_z", "mean_value", "mean_offset")


def pillarize(cloud: LidarCloud, grid: GridSpec) -> PillarGrid:
    """Rasterize a cloud into 4 pillar statistics per cell.

    Channels: point count over the grid's max count, mean z, mean intensity
    (or scaled radar power), mean xy distance to the cell center. Points are
    sorted canonically before accumulation, so the result does not depend on
    input order.
    """
    h, w = grid.height, grid.width
    feats = np.zeros((4, h, w), dtype=DTYPE)
    if len(cloud) == 0:
        return PillarGrid(grid, feats)
    xyz = cloud.xyz
    vals = cloud.values
    row, col = grid.cell_index(xyz[:, 0], xyz[:, 1])
    keep = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    if not np.any(keep):
        return PillarGrid(grid, feats)
    xyz, vals, row, col = xyz[keep], vals[keep], row[keep], col[keep]
    flat = row * w + col
    order = np.lexsort((vals, xyz[:, 2], xyz[:, 1], xyz[:, 0], flat))
    xyz, vals, flat, row, col = xyz[order], vals[order], flat[order], row[order], col[order]
    cx, cy = grid.cell_center(row, col)
    off = np.hypot(xyz[:, 0] - cx, xyz[:, 1] - cy)

    n = h * w
    count = np.zeros(n)
    sz = np.zeros(n)
    sv = np.zeros(n)
    so = np.zeros(n)
    np.add.at(count, flat, 1.0)
    np.add.at(sz, flat, xyz[:, 2])
    np.add.at(sv, flat, vals)
    np.add.at(so, flat, off)
    occ = count > 0
    denom = np.where(occ, count, 1.0)
    out = np.stack([count / count.max(), sz / denom, sv / denom, so / denom])
    out[:, ~occ] = 0.0
    return PillarGrid(grid, out.reshape(4, h, w).astype(DTYPE))
