"""Command line: gen, train-stage1, train-classifier, train-moe, eval, report, selftest.

Every verb takes ``--config <file> --seed <u64>``. Failures print one JSON
line ``{"error": ..., "verb": ..., "message": ...}`` to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import nncore as nn
from .config import RunConfig, load_config
from .evalrep import METRICS, ConfusionMatrix, EvalResult, emit_report, evaluate_detections
from .iwr import PointFeatureRouter, WeatherClassifier
from .moe import MoEDetector
from .weathersim import build_dataset, load_split

log = logging.getLogger("weathermoe")
EVAL_FILE = "eval.json"


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the earlier verb first)")
    return path


def _detector(cfg: RunConfig, seed: int, **extra) -> MoEDetector:
    s1, inf = cfg.stage1, cfg.inference
    params = dict(lr=s1["lr"], batch_size=s1["batch_size"], augment=s1["augment"], gt_sample=s1["gt_sample"],
                  k=inf["k"], tau=inf["tau"], tau_nms=inf["tau_nms"], score_threshold=inf["score_threshold"],
                  seed=seed)
    params.update(extra)
    return MoEDetector(**params)


def _train_frames(cfg: RunConfig):
    return load_split(_need(cfg.dataset_dir, "dataset"), "train")


# -------------------------------------------------------------------- verbs


def cmd_gen(cfg: RunConfig, seed: int) -> None:
    manifest = build_dataset(cfg.dataset, seed, cfg.dataset_dir)
    log.info("wrote %d frames to %s", len(manifest.entries), cfg.dataset_dir)


def cmd_train_stage1(cfg: RunConfig, seed: int) -> None:
    """Stage 1, plus the single-branch baseline that keeps training for the stage-4 budget."""
    frames = _train_frames(cfg)
    e1 = cfg.stage1["epochs"]
    extra = cfg.stage1["baseline_extra_epochs"]
    model = _detector(cfg, seed).initialize()
    snaps = model.fit_stage1(frames, e1 + extra, snapshot_epochs=(e1,))
    nn.save_tensors(cfg.path("stage1.ckpt"), snaps[e1])
    model.save(cfg.path("baseline.ckpt"))
    log.info("stage 1 loss curve: %s", ", ".join(f"{v:.4f}" for v in model.loss_curve_))


def cmd_train_classifier(cfg: RunConfig, seed: int) -> None:
    frames = _train_frames(cfg)
    X = np.stack([f.image for f in frames])
    y = np.array([int(f.weather) for f in frames])
    clf = WeatherClassifier(seed=seed, image_shape=X.shape[1:], **cfg.classifier).fit(X, y)
    clf.save(cfg.path("classifier.ckpt"))
    log.info("classifier train accuracy %.4f", float(np.mean(clf.predict(X) == y)))


def _load_classifier(cfg: RunConfig, seed: int) -> WeatherClassifier:
    return WeatherClassifier.load(_need(cfg.path("classifier.ckpt"), "classifier checkpoint"), seed=seed)


def _pfr_tensors(gate: PointFeatureRouter) -> dict:
    return {"pfr.weight": gate.gate_.weight.value, "pfr.bias": gate.gate_.bias.value,
            "pfr.mean": gate.mean_, "pfr.scale": gate.scale_}


def _load_pfr(path: Path, seed: int) -> PointFeatureRouter:
    t = nn.read_tensors(_need(path, "point-feature gate"))
    gate = PointFeatureRouter(seed=seed).initialize(t["pfr.mean"].shape[0], t["pfr.mean"], t["pfr.scale"])
    gate.gate_.weight.value = t["pfr.weight"]
    gate.gate_.bias.value = t["pfr.bias"]
    return gate


def cmd_train_moe(cfg: RunConfig, seed: int) -> None:
    """Stages 3 and 4 from the stage-1 and classifier checkpoints; also fits the point-feature gate."""
    frames = _train_frames(cfg)
    clf = _load_classifier(cfg, seed)
    model = _detector(cfg, seed, lr=cfg.stage4["lr"], k=cfg.stage4["k"])
    model.load(_need(cfg.path("stage1.ckpt"), "stage-1 checkpoint"))
    model.set_classifier(clf)
    gate = model.fit_pfr(frames)
    nn.save_tensors(cfg.path("pfr.ckpt"), _pfr_tensors(gate))
    model.init_experts()
    model.fit_stage4(frames, cfg.stage4["epochs"], clf, audit_every=10)
    bad = [a for a in model.audit_log_ if not (a["shared_unchanged"] and a["others_unchanged"])]
    if bad:
        raise RuntimeError(f"stage 4 update-confinement audit failed at step {bad[0]['step']}")
    model.save(cfg.path("moe.ckpt"))
    log.info("stage 4 loss curve: %s", ", ".join(f"{v:.4f}" for v in model.loss_curve_))


def _result_to_json(res: EvalResult) -> dict:
    return {"ap": [[m, t, res.ap[(m, t)]] for m, t in METRICS if (m, t) in res.ap],
            "confusion": res.confusion.counts.tolist(), "gt_counts": res.gt_counts,
            "frame_counts": res.frame_counts}


def _result_from_json(d: dict) -> EvalResult:
    res = EvalResult()
    for m, t, row in d["ap"]:
        res.ap[(m, float(t))] = row
    res.confusion = ConfusionMatrix()
    res.confusion.counts = np.array(d["confusion"], dtype=np.int64)
    res.gt_counts = d["gt_counts"]
    res.frame_counts = d["frame_counts"]
    return res


def cmd_eval(cfg: RunConfig, seed: int) -> None:
    """Baseline, MoE and point-feature routing on the test split; writes eval.json."""
    frames = load_split(_need(cfg.dataset_dir, "dataset"), "test")
    if not frames:
        raise ValueError("test split is empty")
    inf = cfg.inference
    results = {}
    base = _detector(cfg, seed, routing="forced", forced_class=0, k=1)
    base.load(_need(cfg.path("baseline.ckpt"), "baseline checkpoint"))
    results["baseline"] = evaluate_detections(base.predict(frames), frames)
    moe = _detector(cfg, seed, routing=inf["routing"]).load(_need(cfg.path("moe.ckpt"), "MoE checkpoint"))
    moe.set_classifier(_load_classifier(cfg, seed))
    moe.pfr_ = _load_pfr(cfg.path("pfr.ckpt"), seed)
    outs = [moe.infer(f) for f in frames]
    results["moe"] = evaluate_detections([o[0] for o in outs], frames, [o[1] for o in outs])
    moe.routing = "pfr"
    pfr = EvalResult()
    for f in frames:
        pfr.confusion.add(int(f.weather), moe.route_frame(f, 1).top)
    results["pfr_gate"] = pfr
    payload = {"schema": "weathermoe-evaljson", "schema_version": 1, "seed": seed,
               "runs": {k: _result_to_json(v) for k, v in sorted(results.items())}}
    cfg.path(EVAL_FILE).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    for name, res in sorted(results.items()):
        if res.ap:
            log.info("%s AP_3D@0.3 total %.4f adverse mean %.4f", name, res.value("AP_3D", 0.3),
                     res.adverse_mean())
        if res.confusion.total:
            log.info("%s routing accuracy %.4f", name, res.confusion.accuracy)


def load_eval(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != "weathermoe-evaljson":
        raise ValueError(f"{path} is not an evaluation file")
    return {k: _result_from_json(v) for k, v in d["runs"].items()}


def cmd_report(cfg: RunConfig, seed: int) -> None:
    results = load_eval(_need(cfg.path(EVAL_FILE), "evaluation results"))
    paths = emit_report(results, cfg.path("report"))
    for p in paths:
        log.info("wrote %s", p)


def cmd_selftest(cfg: RunConfig, seed: int) -> None:
    from .selftest import run_all

    failures = run_all(seed, out=sys.stdout)
    if failures:
        raise AssertionError(f"{len(failures)} self-test check(s) failed: {', '.join(failures)}")


VERBS = {"gen": cmd_gen, "train-stage1": cmd_train_stage1, "train-classifier": cmd_train_classifier,
         "train-moe": cmd_train_moe, "eval": cmd_eval, "report": cmd_report, "selftest": cmd_selftest}


class _Parser(argparse.ArgumentParser):
    # usage errors become exceptions so they share the JSON error line
    def error(self, message):
        raise ValueError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weathermoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", required=True, type=_seed, help="unsigned 64-bit seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(verb: str, exc: BaseException) -> int:
    line = {"error": type(exc).__name__, "verb": verb, "message": str(exc)}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (ValueError, argparse.ArgumentError) as exc:
        verb = argv[0] if argv and argv[0] in VERBS else "?"
        return _fail(verb, ValueError(f"usage: {exc}"))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        VERBS[args.verb](cfg, args.seed)
        log.info("%s done in %.1fs", args.verb, time.time() - t0)
    except Exception as exc:  # one machine-readable line for any failure
        return _fail(args.verb, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
