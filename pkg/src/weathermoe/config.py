"""Run configuration: an INI file with sections dataset, classifier, stage1, stage4, inference, paths."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .weathersim import DatasetConfig, SceneConfig

DEFAULT_TEXT = """\
[dataset]
per_class = 200
ratios =
train_fraction = 0.5
test_fraction = 0.5

[classifier]
lr = 0.1
epochs = 30
batch_size = 16

[stage1]
epochs = 8
lr = 0.01
batch_size = 4
augment = true
gt_sample = 3
baseline_extra_epochs = 8

[stage4]
epochs = 8
lr = 0.01
k = 1

[inference]
k = 1
tau = 0.3
tau_nms = 0.1
score_threshold = 0.1
routing = iwr

[paths]
workdir = run
"""


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    classifier: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage4: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)
    workdir: Path = Path("run")

    @property
    def dataset_dir(self) -> Path:
        return self.workdir / "dataset"

    def path(self, name: str) -> Path:
        return self.workdir / name


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config(text: str, base_dir=".") -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(DEFAULT_TEXT)
    cp.read_string(text)
    d = cp["dataset"]
    ratios = d.get("ratios", "").strip()
    dataset = DatasetConfig(per_class=d.getint("per_class"),
                            ratios=tuple(float(r) for r in ratios.split(",")) if ratios else None,
                            train_fraction=d.getfloat("train_fraction"), test_fraction=d.getfloat("test_fraction"),
                            scene=SceneConfig())
    c = cp["classifier"]
    classifier = {"lr": c.getfloat("lr"), "epochs": c.getint("epochs"), "batch_size": c.getint("batch_size")}
    s1 = cp["stage1"]
    stage1 = {"epochs": s1.getint("epochs"), "lr": s1.getfloat("lr"), "batch_size": s1.getint("batch_size"),
              "augment": _bool(s1.get("augment")), "gt_sample": s1.getint("gt_sample"),
              "baseline_extra_epochs": s1.getint("baseline_extra_epochs")}
    s4 = cp["stage4"]
    stage4 = {"epochs": s4.getint("epochs"), "lr": s4.getfloat("lr"), "k": s4.getint("k")}
    inf = cp["inference"]
    inference = {"k": inf.getint("k"), "tau": inf.getfloat("tau"), "tau_nms": inf.getfloat("tau_nms"),
                 "score_threshold": inf.getfloat("score_threshold"), "routing": inf.get("routing").strip()}
    if inference["routing"] not in ("iwr", "pfr", "oracle"):
        raise ValueError(f"unknown routing mode {inference['routing']!r}")
    workdir = Path(cp["paths"].get("workdir"))
    if not workdir.is_absolute():
        workdir = Path(base_dir) / workdir
    return RunConfig(dataset, classifier, stage1, stage4, inference, workdir)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    try:
        return parse_config(text, p.parent)
    except (configparser.Error, ValueError) as exc:
        raise ValueError(f"invalid config {p}: {exc}") from exc
