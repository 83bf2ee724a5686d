"""Fast oracle and invariant checks behind the ``selftest`` verb."""

from __future__ import annotations

import sys

import numpy as np

from . import geometry as geo
from . import gradcheck
from . import lrc
from . import nncore as nn
from . import oracles
from .evalrep import average_precision
from .iwr import route
from .moe import MoEDetector, cw_postprocess, nms
from .pointcloud import GridSpec
from .weathersim import make_frame
from .wse import DetectionSet, decode, encode


def _random_box(rng: nn.Rng, spread=2.0):
    return geo.Box3D(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5),
                     rng.uniform(1, 5), rng.uniform(1, 3), rng.uniform(1, 2), rng.uniform(-3.1, 3.1))


def check_gradients(rng):
    seed = int(rng.integers(0, 1 << 30))
    worst = max(max(gradcheck.check(name, instances=1, seed=seed)[0]) for name in gradcheck.CASES)
    return worst < 1e-3, f"{len(gradcheck.CASES)} ops, max relative error {worst:.2e}"


def check_iou(rng):
    worst = 0.0
    for _ in range(5):
        a, b = _random_box(rng), _random_box(rng)
        worst = max(worst, abs(geo.iou_3d(a, b) - oracles.mc_iou(a.to_array(), b.to_array(), 200_000, rng)))
    return worst < 0.01, f"max |iou - monte carlo| {worst:.4f}"


def check_lift(rng):
    p = nn.softmax(rng.normal(size=(6, 3, 4)), axis=0)
    c = rng.normal(size=(5, 3, 4))
    err = float(np.abs(lrc.lift(p, c).sum(axis=0) - c).max())
    return err < 1e-5, f"marginalization error {err:.2e}"


def check_camera_chain(rng):
    a = geo.CameraIntrinsics.from_fov(96, 64, 90).matrix
    t_ext = geo.camera_to_ego(1.6)
    t_img = geo.rigid_transform(geo.yaw_rotation(0.1), [1.0, 2.0, 0.0])
    t_lid = geo.rigid_transform(geo.yaw_rotation(-0.3), [0.5, 0.0, 0.1])
    got = geo.transform_pixel_to_ego(10.0, 20.0, 7.0, a, t_ext, t_img, t_lid)
    want = oracles.pixel_to_ego_oracle(10.0, 20.0, 7.0, a, t_ext, t_img, t_lid)
    err = float(np.abs(got - want).max())
    return err < 1e-6, f"chain error {err:.2e}"


def check_routing(rng):
    d = route(np.zeros(7), 2)
    return d.selected == (0, 1), f"uniform logits select {d.selected}"


def check_codec(rng):
    grid = GridSpec()
    boxes = [geo.Box3D(5.5, -3.2, 0.9, 4.0, 1.8, 1.5, 0.3), geo.Box3D(20.2, 7.7, 0.7, 3.5, 1.7, 1.6, -2.0)]
    out = decode(encode(boxes, grid), 0.5, grid)
    ok = len(out) == 2 and np.allclose(np.sort(out.boxes, axis=0), np.sort(geo.boxes_to_array(boxes), axis=0),
                                       atol=1e-5)
    return ok, f"decoded {len(out)} boxes"


def check_ap(rng):
    worst = 0.0
    for _ in range(20):
        dets, gts = oracles.random_ap_case(rng)
        got = average_precision([DetectionSet(b, s) for b, s in dets], gts, geo.iou_3d, 0.3)
        want = oracles.brute_force_ap(dets, gts, geo.iou_3d, 0.3)
        if (got is None) != (want is None):
            return False, "absent/present mismatch"
        if got is not None:
            worst = max(worst, abs(got - want))
    return worst < 1e-9, f"max |ap - oracle| {worst:.1e}"


def check_single_expert(rng):
    model = MoEDetector(seed=int(rng.integers(0, 1 << 30)), routing="forced", forced_class=3).initialize()
    frame = make_frame(7, 0, "Rain")
    for e in model.experts_:
        e.head.bias.value[0] = 0.0
    got, dec = model.infer(frame)
    want = model.standalone(3, frame)
    ok = dec.selected == (3,) and np.array_equal(got.boxes, want.boxes) and np.array_equal(got.scores, want.scores)
    again = cw_postprocess([got], 0.3, 0.1)
    ok = ok and np.array_equal(nms(again, 0.1).boxes, got.boxes)
    return ok, f"{len(got)} boxes"


CHECKS = (("gradients", check_gradients), ("iou_monte_carlo", check_iou), ("lift_marginalization", check_lift),
          ("camera_chain", check_camera_chain), ("routing_tie_break", check_routing), ("box_codec", check_codec),
          ("ap_oracle", check_ap), ("single_expert_equivalence", check_single_expert))


def run_all(seed: int = 0, out=sys.stdout) -> list:
    """Run every check; print one PASS/FAIL line each; return the names that failed."""
    failures = []
    for k, (name, fn) in enumerate(CHECKS):
        rng = nn.Rng(nn.derive_seed(seed, k))
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, reported like the others
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=out)
        if not ok:
            failures.append(name)
    return failures
