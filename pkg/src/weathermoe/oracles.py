"""Slow, independent reference implementations used by the tests and ``selftest``."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .nncore import Rng


def _inside(samples: np.ndarray, box) -> np.ndarray:
    x, y, z, dx, dy, dz, yaw = (float(v) for v in box)
    c, s = math.cos(yaw), math.sin(yaw)
    px, py = samples[:, 0] - x, samples[:, 1] - y
    lx = c * px + s * py
    ly = -s * px + c * py
    m = (np.abs(lx) <= dx / 2) & (np.abs(ly) <= dy / 2)
    if samples.shape[1] > 2:
        m &= np.abs(samples[:, 2] - z) <= dz / 2
    return m


def _bounds(a, b, dims):
    out = []
    for k in range(dims):
        ra = np.hypot(a[3], a[4]) / 2 if k < 2 else a[5] / 2
        rb = np.hypot(b[3], b[4]) / 2 if k < 2 else b[5] / 2
        out.append((min(a[k] - ra, b[k] - rb), max(a[k] + ra, b[k] + rb)))
    return out


def mc_iou(a, b, n: int, rng: Rng, dims: int = 3) -> float:
    """Monte-Carlo IoU: uniform samples in a common bounding region, counted inside each box."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bounds = _bounds(a, b, dims)
    samples = np.column_stack([rng.uniform(lo, hi, size=n) for lo, hi in bounds])
    ia, ib = _inside(samples, a), _inside(samples, b)
    union = np.count_nonzero(ia | ib)
    return float(np.count_nonzero(ia & ib) / union) if union else 0.0


def brute_force_ap(dets, gts, iou_fn, threshold: float, n_points: int = 40):
    """AP by enumerating every one-to-one assignment and keeping the one a greedy matcher would pick.

    ``dets``: list per frame of (boxes, scores); ``gts``: list per frame of box arrays.
    Scores must be distinct across all detections.
    """
    flat = [(float(s), f, i, np.asarray(b)) for f, (bs, ss) in enumerate(dets) for i, (b, s) in enumerate(zip(bs, ss))]
    flat.sort(key=lambda t: -t[0])
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    choices = []
    for _, f, _, b in flat:
        choices.append([None] + [(f, j) for j in range(len(gts[f]))])
    chosen = None
    for assign in itertools.product(*choices):
        used = [a for a in assign if a is not None]
        if len(set(used)) != len(used):
            continue
        ok = True
        for k, (_, f, _, b) in enumerate(flat):
            taken = {a for a in assign[:k] if a is not None}
            free = [(fj, iou_fn(b, gts[f][fj[1]])) for fj in [(f, j) for j in range(len(gts[f]))] if fj not in taken]
            free = [(fj, v) for fj, v in free if v >= threshold]
            best = None  # ties in IoU resolve to the lowest GT index
            if free:
                top = max(v for _, v in free)
                best = min(fj for fj, v in free if v == top)
            if assign[k] != best:
                ok = False
                break
        if ok:
            chosen = assign
            break
    assert chosen is not None
    tp = 0
    prec, rec = [], []
    for k, a in enumerate(chosen):
        tp += a is not None
        prec.append(tp / (k + 1))
        rec.append(tp / n_gt)
    total = 0.0
    for m in range(1, n_points + 1):
        r = m / n_points
        cands = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / n_points


def random_ap_case(rng: Rng, n_frames: int = 2, max_gt: int = 3, max_dets: int = 4):
    """Small AP case with at most ``max_gt`` GT and ``max_dets`` detections in total, spread over frames.

    Returns (dets [(boxes, scores)], gts [boxes]). Detections are jittered
    copies of GT boxes or free-standing boxes, so hits, duplicates and
    misses all occur. Scores are distinct.
    """
    gt_frame = rng.integers(0, n_frames, size=int(rng.integers(0, max_gt + 1)))
    det_frame = rng.integers(0, n_frames, size=int(rng.integers(0, max_dets + 1)))
    scores = (rng.permutation(len(det_frame)) + 1) / (len(det_frame) + 1)
    gts = [np.array([_micro_box(rng) for _ in range(int(np.sum(gt_frame == f)))]).reshape(-1, 7)
           for f in range(n_frames)]
    dets = []
    used = 0
    for f in range(n_frames):
        boxes = []
        g = gts[f]
        for _ in range(int(np.sum(det_frame == f))):
            if len(g) and rng.random() < 0.7:
                b = g[int(rng.integers(0, len(g)))].copy()
                b[:2] += rng.normal(0, 0.4, size=2)
                b[6] += rng.normal(0, 0.2)
                boxes.append(b)
            else:
                boxes.append(_micro_box(rng))
        dets.append((np.array(boxes).reshape(-1, 7), scores[used:used + len(boxes)]))
        used += len(boxes)
    return dets, gts


def _micro_box(rng: Rng) -> np.ndarray:
    return np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-0.2, 0.2), rng.uniform(2, 4.5),
                     rng.uniform(1.4, 2), rng.uniform(1.3, 1.8), rng.uniform(-3.1, 3.1)])


def splat_oracle(frustum: np.ndarray, index: np.ndarray, nz: int, ny: int, nx: int) -> np.ndarray:
    """Dictionary accumulation over every (d, u, v) frustum cell."""
    d, c, h, w = frustum.shape
    acc: dict = {}
    for k in range(d):
        for i in range(h):
            for j in range(w):
                v = int(index[k, i, j])
                if v < 0:
                    continue
                acc[v] = acc.get(v, 0.0) + frustum[k, :, i, j].astype(np.float64)
    out = np.zeros((nz, c, ny, nx))
    for v, feat in acc.items():
        z, rem = divmod(v, ny * nx)
        y, x = divmod(rem, nx)
        out[z, :, y, x] = feat
    return out.reshape(nz * c, ny, nx)


def sparse_depth_oracle(points: np.ndarray, A, T_ext, edges: np.ndarray) -> np.ndarray:
    """Per-pixel nearest hit by a plain loop."""
    a = A.matrix
    inv = np.linalg.inv(np.asarray(T_ext, dtype=np.float64))
    best: dict = {}
    for p in np.asarray(points, dtype=np.float64)[:, :3]:
        cam = inv[:3, :3] @ p + inv[:3, 3]
        if cam[2] <= 0:
            continue
        pix = a @ cam
        u, v = pix[0] / cam[2], pix[1] / cam[2]
        if not (0 <= u < A.width and 0 <= v < A.height and edges[0] <= cam[2] < edges[-1]):
            continue
        key = (int(math.floor(v)), int(math.floor(u)))
        if key not in best or cam[2] < best[key]:
            best[key] = cam[2]
    out = np.zeros((len(edges) - 1, A.height, A.width))
    for (r, c), d in best.items():
        k = 0
        while k + 1 < len(edges) - 1 and d >= edges[k + 1]:
            k += 1
        out[k, r, c] = 1.0
    return out


def pixel_to_ego_oracle(u, v, d, A, T_ext, T_img_aug, T_lidar_aug) -> np.ndarray:
    """Step by step: undo the image augmentation, back-project, camera to ego, then LiDAR augmentation."""
    q = np.linalg.solve(np.asarray(T_img_aug, dtype=np.float64), np.array([u * d, v * d, d, 1.0]))
    cam = np.linalg.solve(np.asarray(A, dtype=np.float64), q[:3])
    ego = np.asarray(T_ext) @ np.append(cam, 1.0)
    return (np.asarray(T_lidar_aug) @ ego)[:3]
