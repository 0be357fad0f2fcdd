"""Shared fixtures: one desk-scale train/attack/reverse run through the CLI."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from semgap import cli
from semgap import model as M
from semgap.attack import AttackConfig

TRAIN_CONFIG = {
    "seed": 1,
    "arch": "convnet",
    "dataset": {"k": 10, "n_train": 2000, "n_test": 1000, "shape": [3, 16, 16], "sigma": 0.15},
    "train": {"lr": 0.01, "epochs": 5, "batch": 64, "momentum": 0.9},
}
# defaults everywhere except the fine-tune step size (see README)
ATTACK_CONFIG = dict(AttackConfig().to_json(), finetune_lr=0.01)
PLAN_CONFIG = {"passes": ["fold_affine", "reassociate"], "block": 4, "fma": False}
IDENTITY_PLAN = {"passes": [], "fma": False}


def write(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
    return str(path)


def run_cli(*argv):
    code = cli.main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"semgap {' '.join(map(str, argv))} exited {code}")


@dataclass
class DeskRun:
    root: Path
    paths: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def json(self, key):
        return json.loads(Path(self.paths[key]).read_text())

    def model(self, key):
        return M.load(self.paths[key])

    def trigger(self):
        return M.TriggerSpec.from_json(self.json("attack_report")["trigger"])

    def train_set(self):
        return cli.datasets_for(self.model("clean"))[0]

    def test_set(self):
        return cli.datasets_for(self.model("clean"))[1]


def desk_pipeline(root: Path, reverse=True) -> DeskRun:
    root.mkdir(parents=True, exist_ok=True)
    run = DeskRun(root)
    p = run.paths
    p["train_config"] = write(root / "train.json", TRAIN_CONFIG)
    p["attack_config"] = write(root / "attack.json", ATTACK_CONFIG)
    p["plan"] = write(root / "plan.json", PLAN_CONFIG)
    p["identity"] = write(root / "identity.json", IDENTITY_PLAN)
    p["clean"] = str(root / "clean.sgmodel.json")
    p["train_report"] = str(root / "train-report.json")
    p["attacked"] = str(root / "attacked.sgmodel.json")
    p["attack_report"] = str(root / "attack-report.json")
    p["reverse_report"] = str(root / "reverse.json")

    t0 = time.perf_counter()
    run_cli("train", "--config", p["train_config"], "--out", p["clean"], "--report", p["train_report"])
    t1 = time.perf_counter()
    run_cli("attack", "--model", p["clean"], "--config", p["attack_config"], "--plan", p["plan"],
            "--out", p["attacked"], "--report", p["attack_report"])
    t2 = time.perf_counter()
    run.seconds["train"] = t1 - t0
    run.seconds["attack"] = t2 - t1
    if reverse:
        run_cli("reverse", "--model", p["attacked"], "--plan", p["plan"], "--seeds", 100,
                "--threshold", 0.8, "--out", p["reverse_report"])
        run.seconds["reverse"] = time.perf_counter() - t2
    return run


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return desk_pipeline(tmp_path_factory.mktemp("desk"))


# --------------------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
