"""Acceptance criteria 1-11, each at its stated tolerance.

Every test appends one ``ACCEPT <n> PASS|FAIL ...`` line, shown in the
terminal summary (and printed immediately under ``-s``). Criteria 8, 9 and
11 run the full command-line pipeline with the default configuration.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from weathermoe import cli, gradcheck, lrc, oracles, udma
from weathermoe import geometry as geo
from weathermoe import nncore as nn
from weathermoe.evalrep import average_precision, evaluate_detections
from weathermoe.iwr import train_classifier
from weathermoe.moe import MoEDetector
from weathermoe.weathersim import WeatherClass, make_frame
from weathermoe.wse import DetectionSet

SEEDS = (1, 2, 3)
PIPELINE = ("gen", "train-stage1", "train-classifier", "train-moe", "eval", "report")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPT {n:2d} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


# ------------------------------------------------------------------- 1


def test_01_gradient_checks():
    t0 = time.perf_counter()
    worst, lines = 0.0, []
    for name in gradcheck.CASES:
        errs, redraws = gradcheck.check(name, instances=10, seed=2024, h=1e-3)
        worst = max(worst, max(errs))
        lines.append(f"{name}={max(errs):.1e}")
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 120
    report(1, ok, f"{len(gradcheck.CASES)} ops x 10 instances, max rel err {worst:.2e}, {dt:.0f}s")
    assert ok, ", ".join(lines)


# ------------------------------------------------------------------- 2


def _pair(rng: nn.Rng):
    def box():
        return geo.Box3D(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.6, 0.6), rng.uniform(1, 5),
                         rng.uniform(0.8, 2.5), rng.uniform(0.8, 2), rng.uniform(-math.pi, math.pi))
    return box(), box()


def test_02_iou_monte_carlo():
    t0 = time.perf_counter()
    rng = nn.Rng(77)
    worst = 0.0
    for _ in range(100):
        a, b = _pair(rng)
        for fn, dims in ((geo.bev_iou, 2), (geo.iou_3d, 3)):
            mc = oracles.mc_iou(a.to_array(), b.to_array(), 10 ** 6, rng, dims)
            worst = max(worst, abs(fn(a, b) - mc))
    dt = time.perf_counter() - t0
    ok = worst <= 0.005 and dt < 300
    report(2, ok, f"100 pairs, max |iou - mc| {worst:.4f}, {dt:.0f}s")
    assert ok


# ------------------------------------------------------------------- 3


def test_03_lift_marginalization():
    rng = nn.Rng(3)
    worst = 0.0
    for _ in range(50):
        d = rng.random((lrc.N_BINS, 4, 6)) + 1e-3
        d /= d.sum(axis=0, keepdims=True)
        c = rng.normal(size=(lrc.CONTEXT_CHANNELS, 4, 6)).astype(np.float32)
        worst = max(worst, float(np.abs(lrc.lift(d.astype(np.float32), c).sum(axis=0) - c).max()))
    exact = True
    for k in range(lrc.N_BINS):
        one = np.zeros((lrc.N_BINS, 4, 6), np.float32)
        one[k] = 1.0
        c = rng.normal(size=(lrc.CONTEXT_CHANNELS, 4, 6)).astype(np.float32)
        out = lrc.lift(one, c)
        exact &= bool(np.array_equal(out[k], c) and not np.delete(out, k, axis=0).any())
    ok = worst < 1e-5 and exact
    report(3, ok, f"50 simplex inputs, max error {worst:.1e}; one-hot slice exact: {exact}")
    assert ok


# ------------------------------------------------------------------- 4


def _calibration(rng: nn.Rng):
    f = rng.uniform(30, 120)
    a = geo.CameraIntrinsics(np.array([[f, 0, rng.uniform(30, 66)], [0, f * rng.uniform(0.9, 1.1),
                                                                     rng.uniform(20, 44)], [0, 0, 1]]), 96, 64)
    t_ext = geo.rigid_transform(geo.yaw_rotation(rng.uniform(-0.3, 0.3)), [0, 0, 0]) @ \
        geo.camera_to_ego(rng.uniform(1.0, 2.0), rng.uniform(-1, 1))
    t_img = geo.rigid_transform(geo.yaw_rotation(0.0), [rng.uniform(-4, 4), rng.uniform(-4, 4), 0])
    spec = udma.AugmentationSpec.random(rng)
    return a, t_ext, t_img, spec.matrix()


def test_04_camera_chain():
    identity = geo.transform_pixel_to_ego(3.0, 4.0, 5.0, np.eye(3), np.eye(4)).tolist() == [15.0, 20.0, 5.0]
    rng = nn.Rng(4)
    round_trip = oracle = 0.0
    for _ in range(100):
        a, t_ext, t_img, t_lid = _calibration(rng)
        u, v, d = rng.uniform(0, 96), rng.uniform(0, 64), rng.uniform(1, 45)
        got = geo.transform_pixel_to_ego(u, v, d, a.matrix, t_ext, t_img, t_lid)
        oracle = max(oracle, float(np.abs(got - oracles.pixel_to_ego_oracle(u, v, d, a.matrix, t_ext, t_img,
                                                                             t_lid)).max()))
        m = geo.pixel_to_ego_matrix(a.matrix, t_ext, t_img, t_lid)
        oracle = max(oracle, float(np.abs(m @ [u * d, v * d, d, 1.0] - np.append(got, 1.0)).max()))
        ego = geo.transform_pixel_to_ego(u, v, d, a.matrix, t_ext)
        pu, pv, pd = geo.project_points(ego[None], a, t_ext)
        round_trip = max(round_trip, abs(pu[0] - u), abs(pv[0] - v), abs(pd[0] - d))
    ok = identity and round_trip <= 1e-4 and oracle <= 1e-6
    report(4, ok, f"identity exact: {identity}; round trip {round_trip:.1e}; oracle {oracle:.1e} on 100 calibrations")
    assert ok


# ------------------------------------------------------------------- 5 & 6


@pytest.fixture(scope="module")
def small_world():
    frames = [make_frame(505, i, WeatherClass(i % 7)) for i in range(42)]
    model = MoEDetector(seed=5, batch_size=4).initialize()
    model.fit_stage1(frames[:28], 1)
    clf = train_classifier(frames[:28], {"epochs": 4, "seed": 5})
    return frames, model.to_tensors(), clf


def test_05_single_expert_equivalence(small_world):
    frames, tensors, _ = small_world
    loss_ok = infer_ok = True
    n_boxes = 0
    for w in range(7):
        m = MoEDetector(seed=5, routing="forced", forced_class=w).load_tensors(tensors).init_experts()
        m.experts_[w].head.bias.value[0] += 3.0  # enough confident cells that the comparison is not vacuous
        batch = frames[28:34]
        decisions = [m.route_frame(f, 1) for f in batch]
        loss, _ = m.stage4_step_loss(batch, decisions)
        loss_ok &= all(d.probs[w] == 1.0 for d in decisions) and loss == m.expert_loss(w, batch)
        for f in batch[:2]:
            got, _ = m.infer(f, 1)
            want = m.standalone(w, f)
            n_boxes += len(want)
            infer_ok &= got.boxes.tobytes() == want.boxes.tobytes() and got.scores.tobytes() == want.scores.tobytes()
    ok = loss_ok and infer_ok and n_boxes > 0
    report(5, ok, f"(a) loss bit-equal: {loss_ok}; (b) infer bit-equal: {infer_ok} ({n_boxes} boxes, 7 experts)")
    assert ok


def test_06_expert_initialization_and_confinement(small_world):
    frames, tensors, clf = small_world
    m = MoEDetector(seed=5, batch_size=4).load_tensors(tensors).init_experts()
    hashes_equal = len(set(m.expert_hashes())) == 1
    r = nn.Rng(66)
    fl = r.normal(size=(20, m.width, 32, 32)).astype(np.float32)
    fr = r.normal(size=(20, m.width, 32, 32)).astype(np.float32)
    outs = [nn.detached(e).forward(fl, fr) for e in m.experts_]
    outputs_equal = all(np.array_equal(outs[0], o) for o in outs[1:])
    shared0 = nn.param_hash(m.shared_)
    m.fit_stage4(frames[:28], 3, clf, audit_every=10)
    audits = m.audit_log_
    confined = bool(audits) and all(a["shared_unchanged"] and a["others_unchanged"] for a in audits)
    confined &= nn.param_hash(m.shared_) == shared0
    ok = hashes_equal and outputs_equal and confined
    report(6, ok, f"hashes equal: {hashes_equal}; outputs equal on 20 inputs: {outputs_equal}; "
                  f"{len(audits)} audits at steps {[a['step'] for a in audits]} clean: {confined}")
    assert ok


# ------------------------------------------------------------------- 7


def test_07_synchronized_augmentation():
    rng = nn.Rng(7)
    frames = [make_frame(707, i, WeatherClass(i % 7)) for i in range(100)]
    db = udma.build_gt_database(frames)
    interior = same = disjoint = True
    inserted = 0
    for f in frames:
        spec = udma.AugmentationSpec.random(rng)
        g = udma.apply_sync(f, spec)
        for b0, b1 in zip(f.gt_boxes, g.gt_boxes):
            inside = geo.points_in_box(f.lidar.points, b0)
            interior &= bool(geo.points_in_box(g.lidar.points, b1, margin=1e-9)[inside].all())
        s, n = udma.wsgts_sample(f, db, 4, rng)
        inserted += n
        same &= all(w == int(f.weather) for w in s.box_weather[len(f.gt_boxes):])
        bx = s.gt_boxes
        disjoint &= all(geo.bev_iou(bx[i], bx[j]) == 0.0 for i in range(len(bx)) for j in range(i + 1, len(bx)))
    ok = interior and same and disjoint and inserted > 0
    report(7, ok, f"interior kept: {interior}; {inserted} inserted, same weather: {same}; pairwise BEV IoU 0: "
                  f"{disjoint}")
    assert ok


# ------------------------------------------------------------------- pipeline


def _run_pipeline(root, seed: int) -> dict:
    (root / "run.ini").write_text("[paths]\nworkdir = work\n")
    times = {}
    for verb in PIPELINE:
        t0 = time.perf_counter()
        code = cli.main([verb, "--config", str(root / "run.ini"), "--seed", str(seed)])
        times[verb] = time.perf_counter() - t0
        if code != 0:
            raise RuntimeError(f"{verb} failed for seed {seed}")
    return times


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        root = tmp_path_factory.mktemp(f"seed{seed}")
        runs[seed] = (root, _run_pipeline(root, seed), cli.load_eval(root / "work" / cli.EVAL_FILE))
    return runs


def test_08_image_weather_routing(pipelines):
    parts, ok = [], True
    for seed, (_, times, res) in pipelines.items():
        iwr, pfr = res["moe"].confusion.accuracy, res["pfr_gate"].confusion.accuracy
        n = res["moe"].confusion.total
        good = n == 700 and iwr >= 0.95 and iwr > pfr and times["train-classifier"] <= 300
        ok &= good
        parts.append(f"seed {seed}: IWR {iwr:.4f} PFR {pfr:.4f} clf {times['train-classifier']:.0f}s")
    report(8, ok, "; ".join(parts))
    assert ok


def test_09_moe_beats_baseline(pipelines):
    wins, parts, fast = 0, [], True
    for seed, (_, times, res) in pipelines.items():
        b, m = res["baseline"], res["moe"]
        bt, mt = b.value("AP_3D", 0.3), m.value("AP_3D", 0.3)
        ba, ma = b.adverse_mean(), m.adverse_mean()
        total = sum(times.values())
        fast &= total <= 1800
        wins += mt >= bt and ma > ba
        parts.append(f"seed {seed}: total {mt:.4f} vs {bt:.4f}, adverse {ma:.4f} vs {ba:.4f}, {total / 60:.1f} min")
    ok = wins >= 2 and fast
    report(9, ok, f"{wins}/3 seeds; " + "; ".join(parts))
    assert ok


# ------------------------------------------------------------------- 10


def test_10_ap_oracle():
    rng = nn.Rng(10)
    worst, compared = 0.0, 0
    for _ in range(200):
        dets, gts = oracles.random_ap_case(rng)
        got = average_precision([DetectionSet(b, s) for b, s in dets], gts, geo.iou_3d, 0.3)
        want = oracles.brute_force_ap(dets, gts, geo.iou_3d, 0.3)
        if (got is None) != (want is None):
            worst = math.inf
            continue
        if got is not None:
            compared += 1
            worst = max(worst, abs(got - want))
    frames = [make_frame(1010, i, WeatherClass(i % 7)) for i in range(21)]
    perfect = evaluate_detections([DetectionSet(f.boxes_array, np.linspace(0.9, 0.4, len(f.gt_boxes)))
                                   for f in frames], frames)
    null = evaluate_detections([DetectionSet() for _ in frames], frames)
    one = all(v == 1.0 for row in perfect.ap.values() for v in row.values())
    zero = all(v == 0.0 for row in null.ap.values() for v in row.values())
    ok = worst <= 1e-9 and one and zero
    report(10, ok, f"200 micro-cases ({compared} with GT), max |ap - oracle| {worst:.1e}; oracle AP 1: {one}; "
                   f"null AP 0: {zero}")
    assert ok


# ------------------------------------------------------------------- 11


def _artifacts(work):
    return {str(p.relative_to(work)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(work.rglob("*")) if p.suffix in (".ckpt", ".csv", ".svg")}


def test_11_byte_identical_reruns(pipelines, tmp_path_factory):
    first = pipelines[SEEDS[0]][0]
    again = tmp_path_factory.mktemp("rerun")
    _run_pipeline(again, SEEDS[0])
    a, b = _artifacts(first / "work"), _artifacts(again / "work")
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not diff and len(a) >= 11
    report(11, ok, f"{len(a)} checkpoints/CSVs/SVGs compared, differing: {diff or 'none'}")
    assert ok
