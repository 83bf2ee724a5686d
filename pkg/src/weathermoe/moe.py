"""Weather-routed mixture of experts: confidence-weighted loss and box fusion, NMS,
and the four-stage training schedule."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import geometry as geo
from . import nncore as nn
from ._validation import check_k
from .iwr import PointFeatureRouter, RoutingDecision, WeatherClassifier, route, top_k
from .nncore import Rng
from .pointcloud import GridSpec, crop, pillarize
from .udma import AugmentationSpec, apply_sync, build_gt_database, wsgts_sample
from .wse import DetectionSet, Expert, SharedBackbone, decode, detection_loss

N_EXPERTS = 7


# ------------------------------------------------------------ loss / fusion


def cw_loss(losses: dict, probs, selected) -> float:
    """Sum of P_w * L_w over the selected experts."""
    total = 0.0
    for w in selected:
        if w not in losses:
            raise ValueError(f"no loss for selected expert {w}")
        total += float(probs[w]) * losses[w]
    return total


def nms(dets: DetectionSet, threshold: float, mode: str = "3d") -> DetectionSet:
    """Greedy non-maximum suppression in descending score order."""
    if len(dets) == 0:
        return DetectionSet(expert=dets.expert, weight=dets.weight)
    iou = geo.iou_3d if mode == "3d" else geo.bev_iou
    order = np.argsort(-dets.scores, kind="stable")
    keep: list = []
    for i in order:
        if all(iou(dets.boxes[i], dets.boxes[j]) <= threshold for j in keep):
            keep.append(int(i))
    keep_idx = np.array(keep, dtype=np.int64)
    return DetectionSet(dets.boxes[keep_idx], dets.scores[keep_idx], dets.expert, dets.weight)


def cw_postprocess(sets, tau: float = 0.3, tau_nms: float = 0.1) -> DetectionSet:
    """Fuse detections from several experts.

    Boxes are visited by descending score. Each unvisited box seeds a
    cluster and takes, from every other expert, that expert's best-scoring
    unvisited box with 3D IoU >= ``tau``. A cluster is fused with
    ``weighted_box_mean`` using the experts' routing weights; its score is
    the weighted mean of member scores. Singletons pass through untouched.
    A final NMS at ``tau_nms`` follows.
    """
    if not 0 < tau < 1:
        raise ValueError("matching threshold must lie in (0, 1)")
    sets = [s for s in sets]
    if not sets:
        return DetectionSet()
    boxes = np.concatenate([s.boxes for s in sets])
    scores = np.concatenate([s.scores for s in sets])
    owner = np.concatenate([np.full(len(s), k) for k, s in enumerate(sets)]).astype(np.int64)
    weights = np.array([s.weight for s in sets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    used = np.zeros(len(scores), dtype=bool)
    out_boxes, out_scores = [], []
    for i in order:
        if used[i]:
            continue
        used[i] = True
        members = [int(i)]
        for k in range(len(sets)):
            if k == owner[i]:
                continue
            for j in order:
                if used[j] or owner[j] != k:
                    continue
                if geo.iou_3d(boxes[i], boxes[j]) >= tau:
                    used[j] = True
                    members.append(int(j))
                    break
        if len(members) == 1:
            out_boxes.append(boxes[i])
            out_scores.append(scores[i])
            continue
        w = weights[owner[members]]
        fused = geo.weighted_box_mean([(boxes[m], wm) for m, wm in zip(members, w)])
        out_boxes.append(fused.to_array())
        out_scores.append(float(np.dot(w / w.sum(), scores[members])))
    merged = DetectionSet(np.array(out_boxes).reshape(-1, 7), np.array(out_scores),
                          expert=sets[0].expert if len(sets) == 1 else -1,
                          weight=sets[0].weight if len(sets) == 1 else 1.0)
    return nms(merged, tau_nms)


# ---------------------------------------------------------------- the model


@dataclass
class TrainState:
    stage: int = 0
    epochs_done: int = 0
    steps_done: int = 0


class MoEDetector(BaseEstimator):
    """Shared backbone + N weather-specific experts, routed by an image classifier.

    Training follows four stages: ``fit_stage1`` (shared + designated
    expert on all weather), an externally trained ``WeatherClassifier``,
    ``init_experts`` (copy the designated expert, freeze the shared
    backbone) and ``fit_stage4`` (routed, confidence-weighted updates of the
    selected experts only).
    """

    def __init__(self, grid=None, width=32, fused=64, n_experts=N_EXPERTS, designated=0, k=1,
                 routing="iwr", forced_class=None, tau=0.3, tau_nms=0.1, score_threshold=0.1, max_boxes=64,
                 lr=0.01, momentum=0.9, batch_size=4, augment=True, gt_sample=3, stage1_epochs=8, stage4_epochs=8,
                 seed=0):
        self.grid = grid
        self.width = width
        self.fused = fused
        self.n_experts = n_experts
        self.designated = designated
        self.k = k
        self.routing = routing
        self.forced_class = forced_class
        self.tau = tau
        self.tau_nms = tau_nms
        self.score_threshold = score_threshold
        self.max_boxes = max_boxes
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.augment = augment
        self.gt_sample = gt_sample
        self.stage1_epochs = stage1_epochs
        self.stage4_epochs = stage4_epochs
        self.seed = seed

    # -- construction -------------------------------------------------------

    @property
    def grid_(self) -> GridSpec:
        return self.grid if self.grid is not None else GridSpec()

    def initialize(self) -> "MoEDetector":
        rng = Rng(nn.derive_seed(self.seed, 0xB0B))
        self.shared_ = SharedBackbone(4, self.width, rng=rng.spawn(0))
        self.experts_ = [Expert(self.width, self.fused, rng=rng.spawn(1 + w)) for w in range(self.n_experts)]
        self.classifier_ = None
        self.pfr_ = None
        self.state_ = TrainState()
        self.loss_curve_ = []
        self.audit_log_ = []
        return self

    def _check(self):
        check_is_fitted(self, "shared_")

    def set_classifier(self, classifier: WeatherClassifier) -> "MoEDetector":
        self.classifier_ = classifier
        return self

    # -- features -----------------------------------------------------------

    def fit(self, frames, y=None, classifier: WeatherClassifier | None = None):
        """All four stages. Stage 2 trains a default classifier unless one is given."""
        self.initialize()
        self.fit_stage1(frames, self.stage1_epochs)
        if classifier is None:
            X = np.stack([f.image for f in frames])
            labels = np.array([int(f.weather) for f in frames])
            classifier = WeatherClassifier(seed=self.seed, image_shape=X.shape[1:]).fit(X, labels)
        self.init_experts()
        return self.fit_stage4(frames, self.stage4_epochs, classifier)

    def featurize(self, frames):
        g = self.grid_
        lidar = np.stack([pillarize(crop(f.lidar, g), g).features for f in frames])
        radar = np.stack([pillarize(crop(f.radar, g), g).features for f in frames])
        return lidar, radar

    def shared_features(self, frames):
        self._check()
        lg, rg = self.featurize(frames)
        return nn.detached(self.shared_).forward(lg, rg)

    # -- routing ------------------------------------------------------------

    def route_frame(self, frame, k: int | None = None, shared_feature=None) -> RoutingDecision:
        k = check_k(self.k if k is None else k, self.n_experts)
        if self.routing == "forced":
            if self.forced_class is None:
                raise ValueError("forced routing needs forced_class")
            p = np.zeros(self.n_experts)
            p[int(self.forced_class)] = 1.0
            return RoutingDecision(p, top_k(p, k))
        if self.routing == "oracle":
            p = np.zeros(self.n_experts)
            p[int(frame.weather)] = 1.0
            return RoutingDecision(p, top_k(p, k))
        if self.routing == "pfr":
            if self.pfr_ is None:
                raise ValueError("missing checkpoint component: pfr gate")
            if shared_feature is None:
                fl, fr = self.shared_features([frame])
                shared_feature = np.concatenate([fl, fr], axis=1)[0]
            return self.pfr_.pfr_route(shared_feature, k)
        if self.classifier_ is None:
            raise ValueError("missing checkpoint component: classifier")
        return route(self.classifier_.classify(frame.image), k)

    # -- training -----------------------------------------------------------

    def _augmented(self, frames, rng: Rng, db):
        if not self.augment:
            return list(frames)
        out = []
        for f in frames:
            if db is not None and self.gt_sample > 0:
                f, _ = wsgts_sample(f, db, self.gt_sample, rng, self.grid_)
            f = apply_sync(f, AugmentationSpec.random(rng))
            out.append(f)
        return out

    def _batches(self, n: int, rng: Rng):
        perm = rng.permutation(n)
        for i in range(0, n, self.batch_size):
            yield perm[i:i + self.batch_size]

    def expert_loss(self, w: int, frames, shared=None):
        """Mean detection loss of expert ``w`` alone over ``frames`` (no update)."""
        self._check()
        fl, fr = shared if shared is not None else self.shared_features(frames)
        maps = nn.detached(self.experts_[w]).forward(fl, fr)
        total = 0.0
        for i, f in enumerate(frames):
            total += detection_loss(maps[i], f.gt_boxes, self.grid_)[0]
        return total / len(frames)

    def fit_stage1(self, frames, epochs: int, snapshot_epochs=(), on_epoch=None):
        """Train the shared backbone and the designated expert on all-weather data.

        Returns {epoch: tensors} for each epoch listed in ``snapshot_epochs``.
        """
        if len(frames) == 0:
            raise ValueError("stage 1 needs training frames")
        if not hasattr(self, "shared_"):
            self.initialize()
        d = self.designated
        expert = self.experts_[d]
        params = list(self.shared_.params().values()) + list(expert.params().values())
        rng = Rng(nn.derive_seed(self.seed, 0x51))
        db = build_gt_database(frames) if self.augment and self.gt_sample > 0 else None
        snaps = {}
        self.state_.stage = 1
        for epoch in range(1, epochs + 1):
            total, n = 0.0, 0
            for idx in self._batches(len(frames), rng):
                batch = self._augmented([frames[i] for i in idx], rng, db)
                lg, rg = self.featurize(batch)
                self.shared_.zero_grad()
                expert.zero_grad()
                fl, fr = self.shared_.forward(lg, rg)
                maps = expert.forward(fl, fr)
                grad = np.zeros_like(maps)
                loss = 0.0
                for i, f in enumerate(batch):
                    li, gi = detection_loss(maps[i], f.gt_boxes, self.grid_)
                    loss += li
                    grad[i] = gi / len(batch)
                gl, gr, _ = expert.backward(grad)
                self.shared_.backward(gl, gr)
                nn.sgd_step(params, self.lr, self.momentum)
                total += loss
                n += len(batch)
                self.state_.steps_done += 1
            self.loss_curve_.append(total / n)
            self.state_.epochs_done += 1
            if epoch in snapshot_epochs:
                snaps[epoch] = self.to_tensors()
            if on_epoch is not None:
                on_epoch(epoch, self)
        self.shared_.clear()
        expert.clear()
        return snaps

    def init_experts(self) -> "MoEDetector":
        """Copy the designated expert into every branch and freeze the shared backbone."""
        self._check()
        src = self.experts_[self.designated]
        for w, e in enumerate(self.experts_):
            if w != self.designated:
                e.copy_from(src)
        for p in src.params().values():
            p.velocity = np.zeros_like(p.value)
        self.state_.stage = 3
        return self

    def fit_pfr(self, frames, **params) -> PointFeatureRouter:
        """Train the point-feature gate on pooled, frozen shared features."""
        fl, fr = self.shared_features(frames)
        feats = np.concatenate([fl, fr], axis=1)
        y = np.array([int(f.weather) for f in frames])
        self.pfr_ = PointFeatureRouter(n_classes=self.n_experts, seed=self.seed, **params).fit(feats, y)
        return self.pfr_

    def stage4_step_loss(self, batch, decisions, shared=None):
        """Confidence-weighted loss and per-expert head gradients for one batch (no update).

        Returns (loss, {expert: (frame indices, head maps, head grads)}).
        """
        fl, fr = shared if shared is not None else self.shared_features(batch)
        n = len(batch)
        groups: "OrderedDict[int, list]" = OrderedDict()
        for i, dec in enumerate(decisions):
            for w in dec.selected:
                groups.setdefault(int(w), []).append(i)
        per_frame = [dict() for _ in range(n)]
        out = OrderedDict()
        for w in sorted(groups):
            idx = np.array(groups[w])
            maps = self.experts_[w].forward(fl[idx], fr[idx])
            grads = np.zeros_like(maps)
            for j, i in enumerate(idx):
                li, gi = detection_loss(maps[j], batch[i].gt_boxes, self.grid_)
                pw = decisions[i].probs[w]
                per_frame[i][w] = li
                grads[j] = (gi * np.asarray(pw, dtype=gi.dtype)) / n
            out[w] = (idx, maps, grads)
        loss = 0.0
        for i in range(n):
            loss += cw_loss(per_frame[i], decisions[i].probs, decisions[i].selected)
        return loss / n, out

    def fit_stage4(self, frames, epochs: int, classifier: WeatherClassifier | None = None, k: int | None = None,
                   audit_every: int = 0, on_epoch=None):
        """Routed training; only experts selected in a step are updated, the shared backbone stays frozen."""
        self._check()
        if self.state_.stage < 3:
            raise ValueError("call init_experts before stage 4")
        k = check_k(self.k if k is None else k, self.n_experts)
        if classifier is not None:
            self.classifier_ = classifier
        rng = Rng(nn.derive_seed(self.seed, 0x54))
        db = build_gt_database(frames) if self.augment and self.gt_sample > 0 else None
        decisions_cache = {}
        self.state_.stage = 4
        shared_hash0 = nn.param_hash(self.shared_)
        step = 0
        for epoch in range(1, epochs + 1):
            total, n = 0.0, 0
            for idx in self._batches(len(frames), rng):
                raw = [frames[i] for i in idx]
                batch = self._augmented(raw, rng, db)
                decisions = []
                for f in raw:
                    key = (int(f.id), int(f.weather))
                    if key not in decisions_cache:
                        decisions_cache[key] = self.route_frame(f, k)
                    decisions.append(decisions_cache[key])
                audit = audit_every and step % audit_every == 0
                if audit:
                    before = [nn.param_hash(e) for e in self.experts_]
                fl, fr = self.shared_features(batch)
                for e in self.experts_:
                    e.zero_grad()
                loss, groups = self.stage4_step_loss(batch, decisions, (fl, fr))
                for w, (_, _, grads) in groups.items():
                    self.experts_[w].backward(grads)
                    nn.sgd_step(self.experts_[w].params().values(), self.lr, self.momentum)
                if audit:
                    after = [nn.param_hash(e) for e in self.experts_]
                    selected = sorted(groups)
                    self.audit_log_.append({
                        "step": step, "selected": selected,
                        "shared_unchanged": nn.param_hash(self.shared_) == shared_hash0,
                        "others_unchanged": all(before[w] == after[w] for w in range(self.n_experts)
                                                if w not in groups)})
                total += loss * len(batch)
                n += len(batch)
                step += 1
                self.state_.steps_done += 1
            self.loss_curve_.append(total / n)
            self.state_.epochs_done += 1
            if on_epoch is not None:
                on_epoch(epoch, self)
        for e in self.experts_:
            e.clear()
        return self

    # -- inference ----------------------------------------------------------

    def expert_detections(self, w: int, frame, shared=None) -> DetectionSet:
        fl, fr = shared if shared is not None else self.shared_features([frame])
        maps = nn.detached(self.experts_[w]).forward(fl, fr)
        return decode(maps[0], self.score_threshold, self.grid_, self.max_boxes)

    def standalone(self, w: int, frame) -> DetectionSet:
        """Expert ``w`` alone: decode then NMS."""
        dets = self.expert_detections(w, frame)
        dets.expert = w
        return nms(dets, self.tau_nms)

    def infer(self, frame, k: int | None = None):
        """Route, run the selected experts, fuse. Returns (DetectionSet, RoutingDecision)."""
        self._check()
        shared = self.shared_features([frame])
        feat = np.concatenate(shared, axis=1)[0] if self.routing == "pfr" else None
        dec = self.route_frame(frame, k, feat)
        sets = []
        for w in dec.selected:
            d = self.expert_detections(w, frame, shared)
            d.expert = int(w)
            d.weight = float(dec.probs[w])
            sets.append(d)
        return cw_postprocess(sets, self.tau, self.tau_nms), dec

    def predict(self, frames) -> list:
        return [self.infer(f)[0] for f in frames]

    # -- persistence --------------------------------------------------------

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        self._check()
        out = nn.state_dict(self.shared_, "shared.")
        for w, e in enumerate(self.experts_):
            out.update(nn.state_dict(e, f"expert_{w}."))
        ref = b"" if self.classifier_ is None else hashlib.sha256(
            nn.dump_tensors(self.classifier_.to_tensors())).hexdigest().encode()
        out["meta.classifier_hash"] = np.frombuffer(ref, dtype=np.uint8) if ref else np.zeros(0, np.uint8)
        out["meta.stage"] = np.array([self.state_.stage], dtype=np.int64)
        return out

    def load_tensors(self, tensors) -> "MoEDetector":
        self.initialize()
        for name in ("shared.lidar.0.weight", "expert_0.head.weight"):
            if name not in tensors:
                raise ValueError(f"missing checkpoint component: {name.split('.')[0]}")
        nn.load_state(self.shared_, tensors, "shared.")
        for w, e in enumerate(self.experts_):
            if f"expert_{w}.head.weight" not in tensors:
                raise ValueError(f"missing checkpoint component: expert_{w}")
            nn.load_state(e, tensors, f"expert_{w}.")
        if "meta.stage" in tensors:
            self.state_.stage = int(tensors["meta.stage"][0])
        return self

    def save(self, path) -> None:
        nn.save_tensors(path, self.to_tensors())

    def load(self, path) -> "MoEDetector":
        return self.load_tensors(nn.read_tensors(path))

    def expert_hashes(self) -> list:
        return [nn.param_hash(e) for e in self.experts_]
